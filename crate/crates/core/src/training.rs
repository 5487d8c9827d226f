//! Contrastive losses, negative sampling, the learning-rate schedule and the
//! training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Episode, QaMode};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward_on, predict_scored, prepare, ModelGrads, ModelParams, Pipeline, PreparedEpisode, Scoring};
use crate::numcore::{seeded, sub_seed, Adam, AdamConfig, Mat, ParamTree, Real, Tape, Tensor};

/// Most same-category answers added to an open-ended pool.
pub const HARD_NEGATIVES: usize = 4;

/// `-log(e^pos / (e^pos + Σ e^neg))`, evaluated with log-sum-exp.
pub fn contrastive_loss(pos: f64, negs: &[f64]) -> f64 {
    let max = negs.iter().copied().fold(pos, f64::max);
    let sum: f64 = std::iter::once(pos).chain(negs.iter().copied()).map(|s| (s - max).exp()).sum();
    max + sum.ln() - pos
}

/// `lr0 · ½ (1 + cos(π · step / total))`
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta: f32,
    pub gamma: f32,
    /// Probability that a question token survives masking during training.
    pub mask_keep: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Whether the selector projections receive updates.
    pub train_selector: bool,
    pub pipeline: Pipeline,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lr0: 5e-5,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            beta: 0.4,
            gamma: 0.9,
            mask_keep: 0.9,
            patience: 5,
            train_selector: false,
            pipeline: Pipeline::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if self.lr0.is_nan() || self.lr0 <= 0.0 {
            return bad(format!("learning rate {} must be positive", self.lr0));
        }
        if self.epochs == 0 || self.epochs > 30 {
            return bad(format!("epochs {} must lie in 1..=30", self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1]", self.beta));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.mask_keep) {
            return bad(format!("mask keep rate {} outside [0, 1]", self.mask_keep));
        }
        self.pipeline.validate()
    }
}

/// Positive answers of the training set grouped by category, used as hard
/// negatives for open-ended questions.
#[derive(Clone, Debug, Default)]
pub struct CategoryBank {
    by_category: BTreeMap<String, Vec<Vec<f32>>>,
}

impl CategoryBank {
    pub fn from_episodes<'a>(eps: impl IntoIterator<Item = &'a PreparedEpisode>) -> Self {
        let mut by_category: BTreeMap<String, Vec<Vec<f32>>> = BTreeMap::new();
        for ep in eps {
            let rows = by_category.entry(ep.category.clone()).or_default();
            let pos = ep.positive_answer();
            if !rows.iter().any(|r| r.as_slice() == pos) {
                rows.push(pos.to_vec());
            }
        }
        Self { by_category }
    }

    pub fn answers(&self, category: &str) -> &[Vec<f32>] {
        self.by_category.get(category).map_or(&[], Vec::as_slice)
    }
}

/// Negatives of one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NegativeSet {
    /// Non-label options of the episode's own bank.
    Options(Vec<usize>),
    /// Positives of other batch episodes plus same-category bank entries.
    Pool { foreign: Vec<usize>, hard: Vec<usize> },
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        match self {
            Self::Options(o) => o.len(),
            Self::Pool { foreign, hard } => foreign.len() + hard.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Chooses negatives for batch member `i`. Hard negatives are drawn without
/// replacement from `seed`, skipping answers equal to the positive.
pub fn sample_negatives(i: usize, batch: &[&PreparedEpisode], bank: &CategoryBank, seed: u64) -> NegativeSet {
    let ep = batch[i];
    match ep.qa_mode {
        QaMode::MultiChoice => NegativeSet::Options((0..ep.answers.rows()).filter(|&l| l != ep.label).collect()),
        QaMode::OpenEnded => {
            let foreign = (0..batch.len()).filter(|&j| j != i).collect();
            let pos = ep.positive_answer();
            let mut candidates: Vec<usize> = bank
                .answers(&ep.category)
                .iter()
                .enumerate()
                .filter(|(_, a)| a.as_slice() != pos)
                .map(|(k, _)| k)
                .collect();
            candidates.shuffle(&mut seeded(seed));
            candidates.truncate(HARD_NEGATIVES);
            candidates.sort_unstable();
            NegativeSet::Pool { foreign, hard: candidates }
        }
    }
}

/// Answer rows scored for an open-ended episode: positive first.
fn answer_pool(i: usize, batch: &[&PreparedEpisode], bank: &CategoryBank, negs: &NegativeSet) -> Result<Tensor> {
    let NegativeSet::Pool { foreign, hard } = negs else {
        unreachable!("pools are only built for open-ended episodes")
    };
    let mut rows: Vec<&[f32]> = vec![batch[i].positive_answer()];
    rows.extend(foreign.iter().map(|&j| batch[j].positive_answer()));
    let cat = bank.answers(&batch[i].category);
    rows.extend(hard.iter().map(|&k| cat[k].as_slice()));
    if rows.len() < 2 {
        return Err(Error::Config(format!(
            "open-ended episode {} has no negatives; use a larger batch or a category bank",
            batch[i].video_id
        )));
    }
    Tensor::from_rows(&rows)
}

/// Bernoulli keep mask over question tokens.
pub fn sample_question_mask(tokens: usize, keep: f64, seed: u64) -> Vec<bool> {
    let mut rng = seeded(seed);
    (0..tokens).map(|_| rng.random::<f64>() < keep).collect()
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParts {
    pub loss: f64,
    pub l_vqa: f64,
    /// `None` when the batch has a single episode.
    pub l_vq: Option<f64>,
}

/// Per-step inputs that are not model parameters.
pub struct StepInputs<'a> {
    pub bank: &'a CategoryBank,
    /// One question mask per batch episode.
    pub masks: Vec<Vec<bool>>,
    /// Seed for hard-negative draws.
    pub seed: u64,
}

impl<'a> StepInputs<'a> {
    /// Masks drawn for training step `step`.
    pub fn for_step(batch: &[&PreparedEpisode], cfg: &TrainConfig, bank: &'a CategoryBank, step: u64) -> Self {
        let seed = sub_seed(cfg.seed, step);
        let masks = batch
            .iter()
            .enumerate()
            .map(|(i, ep)| sample_question_mask(ep.question.rows(), cfg.mask_keep, sub_seed(seed, 2 * i as u64)))
            .collect();
        Self { bank, masks, seed }
    }

    /// All tokens kept, no randomness.
    pub fn unmasked(batch: &[&PreparedEpisode], bank: &'a CategoryBank) -> Self {
        Self { bank, masks: batch.iter().map(|ep| vec![true; ep.question.rows()]).collect(), seed: 0 }
    }
}

/// Batch loss and its gradient with respect to every parameter leaf, in
/// [`ParamTree`] visit order.
///
/// Episodes run on separate tapes. The question contrast couples episodes,
/// so its gradient is computed from the collected video and question
/// vectors and seeded back into each tape before the reverse sweep. Leaf
/// gradients are summed in batch order.
pub fn batch_gradients<T: Real>(
    params: &ModelParams,
    batch: &[&PreparedEpisode],
    lambda: f64,
    pipeline: &Pipeline,
    inputs: &StepInputs<'_>,
    exec: Exec,
) -> Result<(LossParts, Vec<Vec<T>>)> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let indices: Vec<usize> = (0..b).collect();
    let forwards = exec.map(&indices, |&i| -> Result<_> {
        let ep = batch[i];
        let mut tape = Tape::<T>::new();
        let p = params.bind(&mut tape);
        let pool = match ep.qa_mode {
            QaMode::MultiChoice => None,
            QaMode::OpenEnded => {
                let negs = sample_negatives(i, batch, inputs.bank, sub_seed(inputs.seed, 2 * i as u64 + 1));
                Some(answer_pool(i, batch, inputs.bank, &negs)?)
            }
        };
        let scoring = pool.as_ref().map_or(Scoring::Options, Scoring::Pool);
        let fw = forward_on(&mut tape, &p, ep, pipeline, &inputs.masks[i], scoring)?;
        let loss = tape.scalar(fw.loss).as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss of episode {} is {loss}", ep.video_id)));
        }
        Ok((tape, p, fw))
    });
    let forwards: Vec<_> = forwards.into_iter().collect::<Result<_>>()?;

    let l_vqa = forwards.iter().map(|(t, _, fw)| t.scalar(fw.loss).as_f64()).sum::<f64>() / b as f64;
    let d = params.dims.d;
    let mut seeds_f = vec![vec![0f64; d]; b];
    let mut seeds_q = vec![vec![0f64; d]; b];
    let l_vq = if b > 1 && lambda != 0.0 {
        let f: Vec<Vec<f64>> = forwards.iter().map(|(t, _, fw)| to_f64(&t.value(fw.f_final).data)).collect();
        let q: Vec<Vec<f64>> = forwards.iter().map(|(t, _, fw)| to_f64(&t.value(fw.q_pool).data)).collect();
        let inv_tau = 1.0 / pipeline.temperature;
        let mut total = 0.0;
        for i in 0..b {
            let logits: Vec<f64> = q.iter().map(|qj| dot(&f[i], qj) * inv_tau).collect();
            let negs: Vec<f64> = logits.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &s)| s).collect();
            total += contrastive_loss(logits[i], &negs);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|s| (s - max).exp()).sum();
            for (j, &s) in logits.iter().enumerate() {
                let g = ((s - max).exp() / z - if i == j { 1.0 } else { 0.0 }) * inv_tau * lambda / b as f64;
                for k in 0..d {
                    seeds_f[i][k] += g * q[j][k];
                    seeds_q[j][k] += g * f[i][k];
                }
            }
        }
        Some(total / b as f64)
    } else {
        if b == 1 && lambda != 0.0 {
            log::warn!("batch of one episode: question contrast skipped, no negatives available");
        }
        None
    };

    let jobs: Vec<usize> = (0..b).collect();
    let per_episode = exec.map(&jobs, |&i| {
        let (tape, p, fw) = &forwards[i];
        let seeds = [
            (fw.loss, Mat::from_vec(1, 1, vec![T::of_f64(1.0 / b as f64)])),
            (fw.f_final, Mat::from_vec(1, d, seeds_f[i].iter().map(|&v| T::of_f64(v)).collect())),
            (fw.q_pool, Mat::from_vec(1, d, seeds_q[i].iter().map(|&v| T::of_f64(v)).collect())),
        ];
        let grads = tape.backward(&seeds);
        p.leaves()
            .into_iter()
            .zip(params.leaves())
            .map(|(&v, t)| grads.values_or_zeros(v, t.len()))
            .collect::<Vec<Vec<T>>>()
    });

    let mut total: Vec<Vec<T>> = params.leaves().iter().map(|t| vec![T::zero(); t.len()]).collect();
    for ep_grads in per_episode {
        for (acc, g) in total.iter_mut().zip(ep_grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    let loss = l_vqa + lambda * l_vq.unwrap_or(0.0);
    Ok((LossParts { loss, l_vqa, l_vq }, total))
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Packs flat leaf gradients into the parameter layout.
pub fn grads_to_tree(params: &ModelParams, flat: Vec<Vec<f32>>) -> ModelGrads {
    let mut out = params.zeros_like();
    let mut it = flat.into_iter();
    out.visit_mut("", &mut |_, t| {
        let g = it.next().expect("one gradient per leaf");
        t.data_mut().copy_from_slice(&g);
    });
    out
}

/// Optimiser state and step counter of a run.
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam,
    pub step: u64,
    pub total_steps: usize,
    pub exec: Exec,
}

impl Trainer {
    pub fn new(config: TrainConfig, total_steps: usize, exec: Exec) -> Self {
        Self { config, adam: Adam::new(AdamConfig::default()), step: 0, total_steps, exec }
    }

    /// One optimiser update on `batch`.
    pub fn train_step(
        &mut self,
        params: &mut ModelParams,
        batch: &[&PreparedEpisode],
        bank: &CategoryBank,
    ) -> Result<StepRecord> {
        let cfg = &self.config;
        let inputs = StepInputs::for_step(batch, cfg, bank, self.step);
        let (parts, flat) = batch_gradients::<f32>(params, batch, cfg.lambda, &cfg.pipeline, &inputs, self.exec)?;
        if !parts.loss.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|e| e.video_id.as_str()).collect();
            return Err(Error::NonFinite(format!("batch loss {} over episodes {ids:?}", parts.loss)));
        }
        let grads = grads_to_tree(params, flat);
        let lr = cosine_lr(self.step as usize, self.total_steps, cfg.lr0);
        let train_selector = cfg.train_selector;
        self.adam.step(params, &grads, lr, |name| train_selector || !name.starts_with("selector."));
        let record = StepRecord { step: self.step, lr, loss: parts.loss, l_vqa: parts.l_vqa, l_vq: parts.l_vq };
        self.step += 1;
        Ok(record)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub l_vqa: f64,
    pub l_vq: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Metric {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: u64,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub final_loss: f64,
}

/// Prepares every episode for the given parameters and pipeline.
pub fn prepare_all(
    eps: &[Episode],
    params: &ModelParams,
    pipeline: &Pipeline,
    exec: Exec,
) -> Result<Vec<PreparedEpisode>> {
    exec.map(eps, |e| prepare(e, params, pipeline)).into_iter().collect()
}

/// Fraction of episodes answered correctly.
pub fn evaluate_accuracy(
    params: &ModelParams,
    eps: &[PreparedEpisode],
    pipeline: &Pipeline,
    exec: Exec,
) -> Result<f64> {
    evaluate(params, eps, pipeline, exec).map(|e| e.accuracy)
}

/// Accuracy and mean answer cross-entropy over a split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

impl Evaluation {
    /// Higher accuracy wins; equal accuracy falls back to lower loss.
    pub fn beats(&self, other: &Evaluation) -> bool {
        self.accuracy > other.accuracy || (self.accuracy == other.accuracy && self.loss < other.loss)
    }
}

pub fn evaluate(params: &ModelParams, eps: &[PreparedEpisode], pipeline: &Pipeline, exec: Exec) -> Result<Evaluation> {
    if eps.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty split".into()));
    }
    let scored = exec
        .map(eps, |e| predict_scored(params, e, pipeline).map(|(a, loss)| (a == e.label, loss)))
        .into_iter()
        .collect::<Result<Vec<(bool, f64)>>>()?;
    let n = eps.len() as f64;
    Ok(Evaluation {
        accuracy: scored.iter().filter(|(hit, _)| *hit).count() as f64 / n,
        loss: scored.iter().map(|(_, l)| l).sum::<f64>() / n,
    })
}

/// Trains `params` on `train`, keeping the parameters with the best
/// validation accuracy (ties broken by validation loss). Stops early after
/// `patience` epochs without improvement.
pub fn fit(
    params: &mut ModelParams,
    train: &[Episode],
    val: &[Episode],
    cfg: &TrainConfig,
    exec: Exec,
    sink: &mut dyn FnMut(&Metric),
) -> Result<TrainSummary> {
    cfg.validate()?;
    params.selector.beta = cfg.beta;
    params.fusion.gamma = cfg.gamma;
    let pipeline = cfg.pipeline;
    let mut train_p = prepare_all(train, params, &pipeline, exec)?;
    let mut val_p = prepare_all(val, params, &pipeline, exec)?;
    if train_p.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let bank = CategoryBank::from_episodes(&train_p);
    let batches_per_epoch = train_p.len().div_ceil(cfg.batch_size);
    let mut trainer = Trainer::new(cfg.clone(), batches_per_epoch * cfg.epochs, exec);

    let mut best = (Evaluation { accuracy: f64::NEG_INFINITY, loss: f64::INFINITY }, 0usize, params.clone());
    let mut final_loss = f64::NAN;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..train_p.len()).collect();
    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        order.sort_unstable();
        order.shuffle(&mut seeded(sub_seed(cfg.seed, 0xE90C + epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedEpisode> = chunk.iter().map(|&i| &train_p[i]).collect();
            let rec = trainer.train_step(params, &batch, &bank)?;
            final_loss = rec.loss;
            sink(&Metric::Step(rec));
        }
        if cfg.train_selector {
            train_p = prepare_all(train, params, &pipeline, exec)?;
            val_p = prepare_all(val, params, &pipeline, exec)?;
        }
        let eval = if val_p.is_empty() {
            Evaluation { accuracy: 0.0, loss: 0.0 }
        } else {
            evaluate(params, &val_p, &pipeline, exec)?
        };
        sink(&Metric::Epoch(EpochRecord { epoch, val_accuracy: eval.accuracy, val_loss: eval.loss }));
        if eval.beats(&best.0) {
            best = (eval, epoch, params.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (best_eval, best_epoch, best_params) = best;
    *params = best_params;
    Ok(TrainSummary { epochs_run, steps: trainer.step, best_epoch, best_val_accuracy: best_eval.accuracy, final_loss })
}

/// Batch loss without gradients.
pub fn batch_loss<T: Real>(
    params: &ModelParams,
    batch: &[&PreparedEpisode],
    lambda: f64,
    pipeline: &Pipeline,
    inputs: &StepInputs<'_>,
) -> Result<LossParts> {
    let b = batch.len();
    let mut l_vqa = 0.0;
    let mut f = Vec::with_capacity(b);
    let mut q = Vec::with_capacity(b);
    for (i, ep) in batch.iter().enumerate() {
        let mut tape = Tape::<T>::new();
        let p = params.bind(&mut tape);
        let pool = match ep.qa_mode {
            QaMode::MultiChoice => None,
            QaMode::OpenEnded => {
                let negs = sample_negatives(i, batch, inputs.bank, sub_seed(inputs.seed, 2 * i as u64 + 1));
                Some(answer_pool(i, batch, inputs.bank, &negs)?)
            }
        };
        let scoring = pool.as_ref().map_or(Scoring::Options, Scoring::Pool);
        let fw = forward_on(&mut tape, &p, ep, pipeline, &inputs.masks[i], scoring)?;
        l_vqa += tape.scalar(fw.loss).as_f64() / b as f64;
        f.push(to_f64(&tape.value(fw.f_final).data));
        q.push(to_f64(&tape.value(fw.q_pool).data));
    }
    let l_vq = (b > 1 && lambda != 0.0).then(|| {
        let inv_tau = 1.0 / pipeline.temperature;
        (0..b)
            .map(|i| {
                let pos = dot(&f[i], &q[i]) * inv_tau;
                let negs: Vec<f64> = (0..b).filter(|&j| j != i).map(|j| dot(&f[i], &q[j]) * inv_tau).collect();
                contrastive_loss(pos, &negs)
            })
            .sum::<f64>()
            / b as f64
    });
    Ok(LossParts { loss: l_vqa + lambda * l_vq.unwrap_or(0.0), l_vqa, l_vq })
}

/// Worst relative gradient error of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeafCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

/// Compares the analytic batch gradient against central differences for
/// every parameter tensor, with the full question visible.
///
/// Both routes evaluate in `f64`. Parameters are stored in `f32`, so each
/// probe divides by the step actually realised after rounding.
pub fn model_grad_check(
    params: &ModelParams,
    batch: &[&PreparedEpisode],
    lambda: f64,
    pipeline: &Pipeline,
    eps: f32,
) -> Result<Vec<LeafCheck>> {
    let bank = CategoryBank::from_episodes(batch.iter().copied());
    let inputs = StepInputs::unmasked(batch, &bank);
    let (_, analytic) = batch_gradients::<f64>(params, batch, lambda, pipeline, &inputs, Exec::Sequential)?;
    let names = params.leaf_names();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(names.len());
    for (leaf, name) in names.iter().enumerate() {
        let len = analytic[leaf].len();
        let mut numeric = Vec::with_capacity(len);
        for k in 0..len {
            let orig = with_entry(&mut probe, leaf, k, |_| None);
            let up = orig + eps;
            let down = orig - eps;
            with_entry(&mut probe, leaf, k, |_| Some(up));
            let lu = batch_loss::<f64>(&probe, batch, lambda, pipeline, &inputs)?.loss;
            with_entry(&mut probe, leaf, k, |_| Some(down));
            let ld = batch_loss::<f64>(&probe, batch, lambda, pipeline, &inputs)?.loss;
            with_entry(&mut probe, leaf, k, |_| Some(orig));
            numeric.push((lu - ld) / (up as f64 - down as f64));
        }
        let max_rel_error = crate::numcore::max_relative_error(&analytic[leaf], &numeric);
        out.push(LeafCheck { name: name.clone(), entries: len, max_rel_error });
    }
    Ok(out)
}

/// Reads entry `k` of leaf `leaf`, optionally overwriting it.
fn with_entry(p: &mut ModelParams, leaf: usize, k: usize, set: impl Fn(f32) -> Option<f32>) -> f32 {
    let mut i = 0;
    let mut old = 0.0;
    p.visit_mut("", &mut |_, t| {
        if i == leaf {
            old = t.data()[k];
            if let Some(v) = set(old) {
                t.data_mut()[k] = v;
            }
        }
        i += 1;
    });
    old
}
