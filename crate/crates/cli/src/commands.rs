use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lgqave_core::datamodel::{load_split, Episode};
use lgqave_core::frame_select::{select, SelectorParams};
use lgqave_core::graphs::build_graph_sequence;
use lgqave_core::model::{prepare, ModelDims, ModelParams, Pipeline};
use lgqave_core::synthbench::{calibrated_beta, generate_dataset, toy_episode};
use lgqave_core::training::{evaluate, fit, model_grad_check, prepare_all, Metric, TrainSummary};
use lgqave_core::{Error, Exec, Result};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint;
use crate::config::RunConfig;

/// Largest relative gradient error `gradcheck` accepts.
pub const GRAD_TOLERANCE: f64 = 1e-3;

/// Where command output goes. Lines are JSON unless a command prints a table.
pub struct Output<W: Write> {
    out: W,
}

impl<W: Write> Output<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "{text}").map_err(|e| Error::Io { path: PathBuf::from("<stdout>"), source: e })
    }

    fn json<T: Serialize>(&mut self, value: &T) -> Result<()> {
        self.line(&serde_json::to_string(value).expect("value serializes"))
    }
}

fn load(cfg: &RunConfig, split: &str) -> Result<Vec<Episode>> {
    let eps = load_split(&cfg.manifest(split), Exec::Parallel)?;
    if eps.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no episodes", cfg.manifest(split).display())));
    }
    Ok(eps)
}

fn dims_for(cfg: &RunConfig, eps: &[Episode]) -> ModelDims {
    cfg.dims(eps[0].visual_width(), eps[0].text_width())
}

fn out_dir(cfg: &RunConfig, fallback: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

pub fn synth<W: Write>(cfg: &RunConfig, out: &mut Output<W>) -> Result<i32> {
    let synth = cfg.synth();
    let dir = cfg.out.clone().unwrap_or_else(|| cfg.data.clone());
    let paths = generate_dataset(&synth, &dir, Exec::Parallel)?;
    let count = |p: &Path| lgqave_core::datamodel::read_manifest(p).map(|m| m.len());
    out.json(&json!({
        "dir": dir,
        "train": count(&paths.train)?,
        "val": count(&paths.val)?,
        "test": count(&paths.test)?,
        "calibrated_beta": calibrated_beta(&synth, 64)?,
    }))?;
    Ok(0)
}

#[derive(Serialize)]
struct FrameRow<'a> {
    video_id: &'a str,
    t: usize,
    s_t: f32,
    kept: bool,
    window: bool,
}

pub fn select_frames<W: Write>(cfg: &RunConfig, out: &mut Output<W>) -> Result<i32> {
    let eps = load(cfg, &cfg.split)?;
    let dims = dims_for(cfg, &eps);
    let params = SelectorParams::identity(dims.c_visual, dims.c_text, dims.d, cfg.effective_beta()?);
    for ep in &eps {
        let sel = select(ep, &params, cfg.sampling)?;
        for (pos, (frame, &s_t)) in ep.frames.iter().zip(&sel.scores).enumerate() {
            out.json(&FrameRow {
                video_id: &ep.video_id,
                t: frame.frame_index,
                s_t,
                kept: sel.kept.contains(&pos),
                window: sel.windows.contains(&pos),
            })?;
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct GraphRow<'a> {
    video_id: &'a str,
    clip: usize,
    frame_index: usize,
    s_t: f32,
    nodes: usize,
    objects: usize,
    /// Largest deviation of an adjacency row sum from one.
    row_sum_error: f32,
}

pub fn graphs<W: Write>(cfg: &RunConfig, out: &mut Output<W>) -> Result<i32> {
    let eps = load(cfg, &cfg.split)?;
    let params = ModelParams::init(dims_for(cfg, &eps), cfg.seed, cfg.effective_beta()?, cfg.gamma)?;
    for ep in &eps {
        let sel = select(ep, &params.selector, cfg.sampling)?;
        for g in build_graph_sequence(ep, &sel, &params.graph, cfg.grounding, None)?.iter().flatten() {
            let row_sum_error =
                g.adjacency.iter_rows().map(|r| (r.iter().sum::<f32>() - 1.0).abs()).fold(0.0, f32::max);
            out.json(&GraphRow {
                video_id: &ep.video_id,
                clip: g.clip,
                frame_index: g.frame_index,
                s_t: g.score,
                nodes: g.node_mask.len(),
                objects: g.node_mask.iter().filter(|&&k| k).count() - 1,
                row_sum_error,
            })?;
        }
    }
    Ok(0)
}

/// Fits a fresh model on the train and validation splits.
fn train_model(
    cfg: &RunConfig,
    pipeline: Pipeline,
    train: &[Episode],
    val: &[Episode],
    sink: &mut dyn FnMut(&Metric),
) -> Result<(ModelParams, TrainSummary)> {
    let mut tc = cfg.train()?;
    tc.pipeline = pipeline;
    let mut params = ModelParams::init(dims_for(cfg, train), cfg.seed, tc.beta, tc.gamma)?;
    let summary = fit(&mut params, train, val, &tc, Exec::Parallel, sink)?;
    Ok((params, summary))
}

pub fn train<W: Write>(cfg: &RunConfig, out: &mut Output<W>) -> Result<i32> {
    let started = Instant::now();
    let train = load(cfg, "train")?;
    let val = load(cfg, "val")?;
    let dir = out_dir(cfg, "run");
    create_dir(&dir)?;
    let metrics_path = dir.join("metrics.ndjson");
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path).map_err(|e| Error::Io { path: metrics_path.clone(), source: e })?,
    );
    let mut write_err = None;
    let (params, summary) = train_model(cfg, cfg.pipeline(), &train, &val, &mut |m| {
        if let Metric::Epoch(e) = m {
            log::info!("epoch {} val accuracy {:.3} loss {:.4}", e.epoch, e.val_accuracy, e.val_loss);
        }
        let line = serde_json::to_string(m).expect("metric serializes");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::Io { path: metrics_path, source: e });
    }
    metrics.flush().map_err(|e| Error::Io { path: metrics_path.clone(), source: e })?;
    checkpoint::save(&dir, &params, &cfg.pipeline())?;
    let config_path = dir.join("config.toml");
    let text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&config_path, text).map_err(|e| Error::Io { path: config_path, source: e })?;

    let mut report = serde_json::to_value(&summary).expect("summary serializes");
    report["out"] = json!(dir);
    if !cfg.deterministic {
        report["elapsed_s"] = json!(started.elapsed().as_secs_f64());
    }
    out.json(&report)?;
    Ok(0)
}

pub fn eval<W: Write>(cfg: &RunConfig, out: &mut Output<W>) -> Result<i32> {
    let dir = out_dir(cfg, "run");
    let (params, pipeline) = checkpoint::load(&dir)?;
    let eps = load(cfg, &cfg.split)?;
    let prepared = prepare_all(&eps, &params, &pipeline, Exec::Parallel)?;
    let e = evaluate(&params, &prepared, &pipeline, Exec::Parallel)?;
    out.json(&json!({
        "split": cfg.split,
        "episodes": eps.len(),
        "accuracy": e.accuracy,
        "loss": e.loss,
    }))?;
    Ok(0)
}

/// Central-difference check of every parameter tensor on a toy episode with
/// one frame, three objects and three options at width 16.
pub fn gradcheck<W: Write>(cfg: &RunConfig, out: &mut Output<W>) -> Result<i32> {
    let pipeline = cfg.pipeline();
    pipeline.validate()?;
    let mut params = ModelParams::init(ModelDims::new(16, 16, 16), cfg.seed, cfg.beta, cfg.gamma)?;
    params.randomize_heads(cfg.seed.wrapping_add(1));
    let ep = prepare(&toy_episode(cfg.seed, 1, 3, 3, 16), &params, &pipeline)?;
    let checks = model_grad_check(&params, &[&ep], cfg.lambda, &pipeline, 1e-3)?;
    let mut worst = 0.0f64;
    for c in &checks {
        out.json(c)?;
        worst = if c.max_rel_error.is_nan() { f64::NAN } else { worst.max(c.max_rel_error) };
    }
    let pass = worst <= GRAD_TOLERANCE;
    out.json(&json!({
        "tensors": checks.len(),
        "max_rel_error": worst,
        "tolerance": GRAD_TOLERANCE,
        "pass": pass,
    }))?;
    Ok(if pass { 0 } else { 3 })
}

/// One row of the ablation table.
#[derive(Clone, Copy, Debug)]
pub struct Ablation {
    pub name: &'static str,
    pub sampling: bool,
    pub grounding: bool,
    pub local: bool,
    pub global: bool,
}

pub const ABLATIONS: [Ablation; 5] = [
    Ablation { name: "C-1", sampling: false, grounding: false, local: false, global: true },
    Ablation { name: "C-2", sampling: true, grounding: false, local: false, global: true },
    Ablation { name: "C-3", sampling: true, grounding: true, local: false, global: true },
    Ablation { name: "C-4", sampling: true, grounding: false, local: true, global: true },
    Ablation { name: "C-5", sampling: true, grounding: true, local: true, global: true },
];

fn mark(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "no"
    }
}

pub fn ablate<W: Write>(cfg: &RunConfig, out: &mut Output<W>) -> Result<i32> {
    let train = load(cfg, "train")?;
    let val = load(cfg, "val")?;
    let test = load(cfg, &cfg.split)?;
    let mut header = format!(
        "{:<6} {:>8} {:>9} {:>6} {:>6} {:>8}",
        "config", "sampling", "grounding", "local", "global", "accuracy"
    );
    if !cfg.deterministic {
        header.push_str(&format!(" {:>8}", "time_s"));
    }
    out.line(&header)?;
    for a in ABLATIONS {
        let started = Instant::now();
        let pipeline = Pipeline {
            sampling: a.sampling,
            grounding: a.grounding,
            local: a.local,
            global: a.global,
            ..cfg.pipeline()
        };
        log::info!("training {}", a.name);
        let (params, _) = train_model(cfg, pipeline, &train, &val, &mut |_| {})?;
        let prepared = prepare_all(&test, &params, &pipeline, Exec::Parallel)?;
        let acc = evaluate(&params, &prepared, &pipeline, Exec::Parallel)?.accuracy;
        let mut row = format!(
            "{:<6} {:>8} {:>9} {:>6} {:>6} {:>8.4}",
            a.name,
            mark(a.sampling),
            mark(a.grounding),
            mark(a.local),
            mark(a.global),
            acc
        );
        if !cfg.deterministic {
            row.push_str(&format!(" {:>8.1}", started.elapsed().as_secs_f64()));
        }
        out.line(&row)?;
    }
    Ok(0)
}
