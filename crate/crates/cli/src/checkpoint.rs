//! Trained parameters on disk: `model.json` plus one tensor file per leaf.

use std::path::{Path, PathBuf};

use lgqave_core::datamodel::{read_tensor, write_tensor};
use lgqave_core::model::{ModelDims, ModelParams, Pipeline};
use lgqave_core::numcore::ParamTree;
use lgqave_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: ModelDims,
    beta: f32,
    gamma: f32,
    pipeline: Pipeline,
    leaves: Vec<String>,
}

fn leaf_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("params").join(format!("{name}.lgqe"))
}

pub fn save(dir: &Path, params: &ModelParams, pipeline: &Pipeline) -> Result<()> {
    let leaves = params.leaf_names();
    std::fs::create_dir_all(dir.join("params")).map_err(|e| Error::Io { path: dir.join("params"), source: e })?;
    let mut result = Ok(());
    params.visit("", &mut |name, t| {
        if result.is_ok() {
            result = write_tensor(&leaf_path(dir, name), t);
        }
    });
    result?;
    let header = Header {
        dims: params.dims,
        beta: params.selector.beta,
        gamma: params.fusion.gamma,
        pipeline: *pipeline,
        leaves,
    };
    let path = dir.join("model.json");
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path, source: e })
}

pub fn load(dir: &Path) -> Result<(ModelParams, Pipeline)> {
    let path = dir.join("model.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    let mut params = ModelParams::init(header.dims, 0, header.beta, header.gamma)?;
    if params.leaf_names() != header.leaves {
        return Err(Error::Json { path, line: 0, reason: "parameter layout does not match this build".into() });
    }
    let mut result = Ok(());
    params.visit_mut("", &mut |name, t| {
        if result.is_err() {
            return;
        }
        let file = leaf_path(dir, name);
        result = read_tensor(&file).and_then(|loaded| {
            if loaded.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "{}: expected {:?}, found {:?}",
                    file.display(),
                    t.shape(),
                    loaded.shape()
                )));
            }
            *t = loaded;
            Ok(())
        });
    });
    result?;
    Ok((params, header.pipeline))
}
