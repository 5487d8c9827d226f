//! Flat run configuration read from a TOML file, with flag overrides.

use std::path::{Path, PathBuf};

use lgqave_core::datamodel::QaMode;
use lgqave_core::model::{ModelDims, Pipeline};
use lgqave_core::numcore::PoolMode;
use lgqave_core::synthbench::{calibrated_beta, SynthConfig};
use lgqave_core::training::TrainConfig;
use lgqave_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every tunable of a run in one flat table. Missing keys take defaults and
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // synthetic data
    pub episodes: usize,
    pub frames: usize,
    pub object_classes: usize,
    pub answer_options: usize,
    pub width: usize,
    pub noise_std: f32,
    pub qa_mode: QaMode,

    // model
    pub d: usize,
    pub beta: f32,
    /// Replace `beta` by the threshold calibrated on the synthetic generator.
    pub calibrate_beta: bool,
    pub gamma: f32,
    pub pool: PoolMode,
    pub sampling: bool,
    pub grounding: bool,
    pub local: bool,
    pub global: bool,
    pub edge_transform: bool,
    pub temperature: f64,

    // training
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_keep: f64,
    pub patience: usize,
    pub train_selector: bool,

    // paths and output
    pub data: PathBuf,
    pub split: String,
    pub out: Option<PathBuf>,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        let pipe = Pipeline::default();
        Self {
            seed: synth.seed,
            episodes: synth.n_episodes,
            frames: synth.frames,
            object_classes: synth.n_object_classes,
            answer_options: synth.n_answer_options,
            width: synth.width,
            noise_std: synth.noise_std,
            qa_mode: synth.qa_mode,
            d: 64,
            beta: train.beta,
            calibrate_beta: false,
            gamma: train.gamma,
            pool: pipe.pool,
            sampling: pipe.sampling,
            grounding: pipe.grounding,
            local: pipe.local,
            global: pipe.global,
            edge_transform: pipe.edge_transform,
            temperature: pipe.temperature,
            lambda: train.lambda,
            lr: train.lr0,
            epochs: train.epochs,
            batch_size: train.batch_size,
            mask_keep: train.mask_keep,
            patience: train.patience,
            train_selector: train.train_selector,
            data: PathBuf::from("data"),
            split: "test".into(),
            out: None,
            deterministic: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            n_episodes: self.episodes,
            frames: self.frames,
            n_object_classes: self.object_classes,
            n_answer_options: self.answer_options,
            width: self.width,
            noise_std: self.noise_std,
            qa_mode: self.qa_mode,
        }
    }

    pub fn pipeline(&self) -> Pipeline {
        Pipeline {
            sampling: self.sampling,
            grounding: self.grounding,
            local: self.local,
            global: self.global,
            edge_transform: self.edge_transform,
            pool: self.pool,
            temperature: self.temperature,
        }
    }

    /// The threshold in effect, calibrating it first when asked to.
    pub fn effective_beta(&self) -> Result<f32> {
        if self.calibrate_beta {
            calibrated_beta(&self.synth(), 64)
        } else {
            Ok(self.beta)
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lambda: self.lambda,
            lr0: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            beta: self.effective_beta()?,
            gamma: self.gamma,
            mask_keep: self.mask_keep,
            patience: self.patience,
            train_selector: self.train_selector,
            pipeline: self.pipeline(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dims(&self, c_visual: usize, c_text: usize) -> ModelDims {
        ModelDims::new(c_visual, c_text, self.d)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        self.train().map(|_| ())
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.data.join(format!("{split}.ndjson"))
    }
}
