//! Synthetic episodes with a known answer rule.
//!
//! Every video has a scene-tagged span in which the questioned actor performs
//! the answer action. Off-span segments show the same actor doing other
//! listed actions, and a second actor performs a fourth listed action inside
//! the span. Only the question's scene separates the answer from the
//! distractors, so frame selection and grounding both carry information.
//!
//! Each frame has eight patch rows: five scene rows, an actor row, a second
//! actor (or clutter) row and an object row. Prototypes are orthogonal apart
//! from a shared offset along the all-ones direction that every scene carries.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{self, BoundingBox, Episode, FrameRecord, ManifestEntry, QaMode};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::frame_select::frame_score;
use crate::numcore::{mean_pool, seeded, sub_seed, Prng, Tensor};

/// Patch rows per synthetic frame.
pub const PATCH_ROWS: usize = 8;
const SCENE_ROWS: usize = 5;
const GUARD: usize = 2;
const SPAN_LEN: Range<usize> = 8..12;
const VISIBLE: Range<usize> = 2..4;
/// Cosine between the all-ones direction and every scene prototype.
const SCENE_OFFSET: f32 = 0.5;
const PROTOTYPE_TAG: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_episodes: usize,
    pub frames: usize,
    pub n_object_classes: usize,
    pub n_answer_options: usize,
    pub width: usize,
    pub noise_std: f32,
    pub qa_mode: QaMode,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            n_episodes: 2000,
            frames: 32,
            n_object_classes: 8,
            n_answer_options: 5,
            width: 64,
            noise_std: 0.1,
            qa_mode: QaMode::MultiChoice,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_answer_options < 2 {
            return bad(format!("n_answer_options must be at least 2, got {}", self.n_answer_options));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and non-negative, got {}", self.noise_std));
        }
        if self.n_object_classes < self.n_answer_options.max(5) {
            return bad(format!(
                "n_object_classes must be at least max(5, n_answer_options), got {}",
                self.n_object_classes
            ));
        }
        let min_frames = SPAN_LEN.end - 1 + 2 * GUARD + 2 * (VISIBLE.end - 1);
        if self.frames < min_frames {
            return bad(format!("frames must be at least {min_frames}, got {}", self.frames));
        }
        let needed = 3 * self.n_object_classes + 4;
        if self.width < needed {
            return bad(format!("width {} too small for {} orthogonal prototypes", self.width, needed));
        }
        Ok(())
    }

    /// Prototype set shared by every episode generated with this config.
    pub fn prototypes(&self) -> Prototypes {
        Prototypes::new(sub_seed(self.seed, PROTOTYPE_TAG), self.n_object_classes, self.width)
    }
}

/// Class prototypes in the shared visual/text embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub scenes: Tensor,
    pub actors: Tensor,
    pub actions: Tensor,
    pub clutter: Vec<f32>,
    pub query: Vec<f32>,
    pub function: Vec<f32>,
}

impl Prototypes {
    /// Draws `3k + 3` mutually orthogonal zero-mean directions of norm
    /// `√width`; scenes additionally share an offset along the ones vector.
    pub fn new(seed: u64, classes: usize, width: usize) -> Self {
        let mut rng = seeded(seed);
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < 3 * classes + 3 {
            let mut v: Vec<f64> = (0..width).map(|_| normal.sample(&mut rng)).collect();
            let mean = v.iter().sum::<f64>() / width as f64;
            v.iter_mut().for_each(|x| *x -= mean);
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let scale = (width as f64).sqrt();
        let offset = SCENE_OFFSET as f64;
        let residual = (1.0 - offset * offset).sqrt();
        let plain = |b: &[f64]| -> Vec<f32> { b.iter().map(|x| (scale * x) as f32).collect() };
        let scene = |b: &[f64]| -> Vec<f32> { b.iter().map(|x| (scale * residual * x + offset) as f32).collect() };
        let table = |rows: &[Vec<f64>], f: &dyn Fn(&[f64]) -> Vec<f32>| -> Tensor {
            let rows: Vec<Vec<f32>> = rows.iter().map(|b| f(b)).collect();
            Tensor::from_rows(&rows).expect("prototype rows")
        };
        let k = classes;
        Prototypes {
            scenes: table(&basis[..k], &scene),
            actors: table(&basis[k..2 * k], &plain),
            actions: table(&basis[2 * k..3 * k], &plain),
            clutter: plain(&basis[3 * k]),
            query: plain(&basis[3 * k + 1]),
            function: plain(&basis[3 * k + 2]),
        }
    }

    /// Text embedding of the answer "actor performs action".
    pub fn answer(&self, actor: usize, action: usize) -> Vec<f32> {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        self.actors.row(actor).iter().zip(self.actions.row(action)).map(|(a, b)| s * (a + b)).collect()
    }

    pub fn classes(&self) -> usize {
        self.actors.rows()
    }
}

/// What a frame shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameRole {
    /// Inside the questioned span.
    Span,
    /// Scene-only frame next to the span.
    Guard,
    /// Outside the span, other scene.
    OffSpan,
}

/// Latent description of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Script {
    pub scene: usize,
    /// Scenes of the segments before and after the span.
    pub side_scenes: [usize; 2],
    pub actor: usize,
    /// Actor sharing the span with `actor`.
    pub confuser: usize,
    /// Background actors of the two off-span segments.
    pub side_actors: [usize; 2],
    pub action: usize,
    /// Action of the confusing actor.
    pub confuser_action: usize,
    /// Actions of `actor` outside the span, shown in `side_frames`.
    pub side_actions: [usize; 2],
    pub span: Range<usize>,
    pub action_frames: Vec<usize>,
    pub confuser_frames: Vec<usize>,
    pub side_frames: [Vec<usize>; 2],
    /// Action class behind each answer slot (open-ended: every class).
    pub options: Vec<usize>,
    pub label: usize,
}

impl Script {
    pub fn role(&self, t: usize) -> FrameRole {
        if self.span.contains(&t) {
            FrameRole::Span
        } else if t + GUARD >= self.span.start && t < self.span.end + GUARD {
            FrameRole::Guard
        } else {
            FrameRole::OffSpan
        }
    }

    fn side(&self, t: usize) -> usize {
        usize::from(t >= self.span.end)
    }
}

fn distinct(rng: &mut Prng, n: usize, k: usize, exclude: &[usize]) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).filter(|i| !exclude.contains(i)).collect();
    pool.shuffle(rng);
    pool.truncate(k);
    pool
}

fn pick(rng: &mut Prng, from: &[usize], k: usize) -> Vec<usize> {
    let mut v = from.to_vec();
    v.shuffle(rng);
    v.truncate(k);
    v.sort_unstable();
    v
}

/// Draws the latent script of episode `index`.
pub fn sample_script(cfg: &SynthConfig, index: usize) -> Script {
    let mut rng = seeded(sub_seed(cfg.seed, index as u64));
    let k = cfg.n_object_classes;
    let t = cfg.frames;
    let scenes = distinct(&mut rng, k, 3, &[]);
    let actors = distinct(&mut rng, k, 4, &[]);
    let actions = distinct(&mut rng, k, 4, &[]);
    let len = rng.random_range(SPAN_LEN);
    let start = rng.random_range(GUARD..=t - len - GUARD);
    let span = start..start + len;
    let span_frames: Vec<usize> = span.clone().collect();
    let n_action = rng.random_range(VISIBLE);
    let n_confuser = rng.random_range(VISIBLE);
    let chosen = pick(&mut rng, &span_frames, n_action + n_confuser);
    let mut shuffled = chosen.clone();
    shuffled.shuffle(&mut rng);
    let mut action_frames = shuffled[..n_action].to_vec();
    let mut confuser_frames = shuffled[n_action..].to_vec();
    action_frames.sort_unstable();
    confuser_frames.sort_unstable();

    let off: Vec<usize> = (0..t).filter(|&f| f + GUARD < span.start || f >= span.end + GUARD).collect();
    let n_first = rng.random_range(VISIBLE);
    let n_second = rng.random_range(VISIBLE);
    let chosen = pick(&mut rng, &off, n_first + n_second);
    let mut shuffled = chosen;
    shuffled.shuffle(&mut rng);
    let mut first = shuffled[..n_first].to_vec();
    let mut second = shuffled[n_first..].to_vec();
    first.sort_unstable();
    second.sort_unstable();

    let (options, label) = match cfg.qa_mode {
        QaMode::MultiChoice => {
            let mut opts = actions.clone();
            opts.extend(distinct(&mut rng, k, cfg.n_answer_options.saturating_sub(4), &actions));
            opts.truncate(cfg.n_answer_options);
            opts.shuffle(&mut rng);
            let label = opts.iter().position(|&a| a == actions[0]).expect("answer among options");
            (opts, label)
        }
        QaMode::OpenEnded => ((0..k).collect(), actions[0]),
    };
    Script {
        scene: scenes[0],
        side_scenes: [scenes[1], scenes[2]],
        actor: actors[0],
        confuser: actors[1],
        side_actors: [actors[2], actors[3]],
        action: actions[0],
        confuser_action: actions[1],
        side_actions: [actions[2], actions[3]],
        span,
        action_frames,
        confuser_frames,
        side_frames: [first, second],
        options,
        label,
    }
}

struct Noise {
    rng: Prng,
    normal: Option<Normal<f32>>,
}

impl Noise {
    fn new(seed: u64, std: f32) -> Self {
        Noise { rng: seeded(seed), normal: (std > 0.0).then(|| Normal::new(0.0, std).expect("valid deviation")) }
    }

    fn row(&mut self, proto: &[f32]) -> Vec<f32> {
        match &self.normal {
            Some(n) => proto.iter().map(|&v| v + n.sample(&mut self.rng)).collect(),
            None => proto.to_vec(),
        }
    }
}

fn actor_box(rng: &mut Prng) -> BoundingBox {
    let x1 = rng.random_range(0.0..0.5f32);
    let y1 = rng.random_range(0.0..0.4f32);
    BoundingBox { x1, y1, x2: x1 + rng.random_range(0.2..0.4f32), y2: y1 + rng.random_range(0.3..0.5f32) }
}

fn object_box(rng: &mut Prng, actor: &BoundingBox) -> BoundingBox {
    let x1 = (actor.x2 - 0.05).min(0.85);
    let y1 = actor.y1 + rng.random_range(0.0..0.2f32);
    BoundingBox {
        x1,
        y1,
        x2: (x1 + rng.random_range(0.05..0.15f32)).min(1.0),
        y2: (y1 + rng.random_range(0.05..0.15f32)).min(1.0),
    }
}

/// Renders the episode described by `script`.
/// Object row of a frame and whether it is grounded.
type GroundedRow<'a> = (&'a [f32], bool);

pub fn render_episode(cfg: &SynthConfig, protos: &Prototypes, script: &Script, index: usize) -> Episode {
    let mut noise = Noise::new(sub_seed(cfg.seed ^ 0x5EED, index as u64), cfg.noise_std);
    let mut rng = seeded(sub_seed(cfg.seed ^ 0xB0C5, index as u64));
    let frames = (0..cfg.frames)
        .map(|t| {
            let role = script.role(t);
            let side = script.side(t);
            let scene = match role {
                FrameRole::Span => script.scene,
                _ => script.side_scenes[side],
            };
            let mut rows: Vec<Vec<f32>> = (0..SCENE_ROWS).map(|_| noise.row(protos.scenes.row(scene))).collect();
            // (actor row, actor is the questioned one), second actor row, (object row, grounded)
            let (first, second, object): (Option<usize>, Option<usize>, Option<GroundedRow>) = match role {
                FrameRole::Span => {
                    let obj = if script.action_frames.contains(&t) {
                        Some((protos.actions.row(script.action), true))
                    } else if script.confuser_frames.contains(&t) {
                        Some((protos.actions.row(script.confuser_action), false))
                    } else {
                        None
                    };
                    (Some(script.actor), Some(script.confuser), obj)
                }
                FrameRole::Guard => (None, None, None),
                FrameRole::OffSpan => {
                    let obj = (0..2)
                        .find(|&k| script.side_frames[k].contains(&t))
                        .map(|k| (protos.actions.row(script.side_actions[k]), true));
                    (Some(script.actor), Some(script.side_actors[side]), obj)
                }
            };
            let actor_row = noise.row(first.map_or(&protos.clutter[..], |a| protos.actors.row(a)));
            rows.push(actor_row.clone());
            rows.push(noise.row(second.map_or(&protos.clutter[..], |a| protos.actors.row(a))));
            let object_row = noise.row(object.map_or(&protos.clutter[..], |(p, _)| p));
            rows.push(object_row.clone());

            let mut boxes = Vec::new();
            let mut rois = Vec::new();
            if first.is_some() {
                let a = actor_box(&mut rng);
                boxes.push(a);
                rois.push(actor_row);
                if let Some((_, true)) = object {
                    boxes.push(object_box(&mut rng, &a));
                    rois.push(object_row);
                }
            }
            let patches = Tensor::from_rows(&rows).expect("patch rows");
            let spatial: Vec<[f32; 4]> = boxes.iter().map(|&b| b.into()).collect();
            let width = cfg.width;
            FrameRecord {
                frame_index: t,
                frame_feature: mean_pool(&patches, None).expect("patch rows"),
                patch_embeddings: patches,
                roi_features: if rois.is_empty() {
                    Tensor::zeros(vec![0, width])
                } else {
                    Tensor::from_rows(&rois).expect("roi rows")
                },
                spatial_features: if spatial.is_empty() {
                    Tensor::zeros(vec![0, 4])
                } else {
                    Tensor::from_rows(&spatial).expect("box rows")
                },
                boxes,
            }
        })
        .collect();
    let question = [
        protos.scenes.row(script.scene).to_vec(),
        protos.actors.row(script.actor).to_vec(),
        protos.query.clone(),
        protos.function.clone(),
    ];
    let question: Vec<Vec<f32>> = question.iter().map(|r| noise.row(r)).collect();
    let answers: Vec<Vec<f32>> = script.options.iter().map(|&a| noise.row(&protos.answer(script.actor, a))).collect();
    Episode {
        video_id: format!("synth{}_{index:05}", cfg.seed),
        frames,
        question_tokens: Tensor::from_rows(&question).expect("question rows"),
        answer_bank: Tensor::from_rows(&answers).expect("answer rows"),
        qa_mode: cfg.qa_mode,
        label: script.label,
        category: format!("actor{}", script.actor),
    }
}

/// Episode `index` of the dataset described by `cfg`.
pub fn generate_episode(cfg: &SynthConfig, index: usize) -> Episode {
    render_episode(cfg, &cfg.prototypes(), &sample_script(cfg, index), index)
}

/// Index ranges of the 80/10/10 train/val/test split.
pub fn split_ranges(n: usize) -> [Range<usize>; 3] {
    let train = n * 8 / 10;
    let val = n * 9 / 10;
    [0..train, train..val, val..n]
}

/// All episodes of `cfg` in memory, split 80/10/10 by index.
pub fn generate_splits(cfg: &SynthConfig, exec: Exec) -> Result<[Vec<Episode>; 3]> {
    cfg.validate()?;
    let protos = cfg.prototypes();
    let all = exec.map_range(cfg.n_episodes, |i| render_episode(cfg, &protos, &sample_script(cfg, i), i));
    let [_, val, test] = split_ranges(cfg.n_episodes);
    let mut all = all;
    let test_eps = all.split_off(test.start);
    let val_eps = all.split_off(val.start);
    Ok([all, val_eps, test_eps])
}

/// Manifests written by [`generate_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths { train: dir.join("train.ndjson"), val: dir.join("val.ndjson"), test: dir.join("test.ndjson") }
    }
}

/// Writes every episode and the three split manifests under `dir`.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path, exec: Exec) -> Result<DatasetPaths> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let protos = cfg.prototypes();
    let entries: Vec<ManifestEntry> = exec
        .map_range(cfg.n_episodes, |i| {
            let ep = render_episode(cfg, &protos, &sample_script(cfg, i), i);
            datamodel::write_episode(&ep, dir)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let paths = DatasetPaths::in_dir(dir);
    let [train, val, test] = split_ranges(cfg.n_episodes);
    datamodel::write_manifest(&paths.train, &entries[train])?;
    datamodel::write_manifest(&paths.val, &entries[val])?;
    datamodel::write_manifest(&paths.test, &entries[test])?;
    Ok(paths)
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn nearest(x: &[f32], table: &Tensor) -> (usize, f32) {
    table.iter_rows().map(|r| cosine(x, r)).enumerate().fold((0, f32::NEG_INFINITY), |best, (i, c)| {
        if c > best.1 {
            (i, c)
        } else {
            best
        }
    })
}

/// Hand-written nearest-prototype reader of an episode: finds the question's
/// scene and actor, collects the actor's grounded actions in frames of that
/// scene and answers with the most frequent one.
pub fn oracle_predict(protos: &Prototypes, ep: &Episode) -> usize {
    let (scene, _) = nearest(ep.question_tokens.row(0), &protos.scenes);
    let (actor, _) = nearest(ep.question_tokens.row(1), &protos.actors);
    let mut votes = vec![0usize; protos.classes()];
    for f in &ep.frames {
        if nearest(f.frame_feature.row(0), &protos.scenes).0 != scene {
            continue;
        }
        for roi in f.roi_features.iter_rows() {
            let (act, ca) = nearest(roi, &protos.actions);
            let (_, cp) = nearest(roi, &protos.actors);
            if ca > cp {
                votes[act] += 1;
            }
        }
    }
    let action = votes.iter().enumerate().fold(0, |best, (i, &v)| if v > votes[best] { i } else { best });
    let target = protos.answer(actor, action);
    nearest(&target, &ep.answer_bank).0
}

/// Oracle similarity of every answer slot to the scripted answer.
pub fn oracle_similarities(protos: &Prototypes, script: &Script, ep: &Episode) -> Vec<f32> {
    let target = protos.answer(script.actor, script.action);
    ep.answer_bank.iter_rows().map(|r| cosine(r, &target)).collect()
}

/// Uniformly random answer slots, one per episode.
pub fn random_predictions(eps: &[Episode], seed: u64) -> Vec<usize> {
    let mut rng = seeded(seed);
    eps.iter().map(|e| rng.random_range(0..e.answer_bank.rows())).collect()
}

/// Fraction of `predictions` equal to the episode labels.
pub fn accuracy(eps: &[Episode], predictions: &[usize]) -> f64 {
    if eps.is_empty() {
        return 0.0;
    }
    let hits = eps.iter().zip(predictions).filter(|(e, &p)| e.label == p).count();
    hits as f64 / eps.len() as f64
}

/// Frame scores of an episode under identity projections.
pub fn identity_scores(ep: &Episode) -> Result<Vec<f32>> {
    let norm = |t: &Tensor| {
        let rows: Vec<Vec<f32>> = t
            .iter_rows()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f32>().sqrt();
                r.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    };
    let q = norm(&ep.question_tokens)?;
    ep.frames.iter().map(|f| frame_score(&norm(&f.patch_embeddings)?, &q)).collect()
}

/// Threshold halfway between the lowest span-frame score and the highest
/// other-frame score of noise-free renderings under identity projections.
///
/// With scores normalised as in frame selection the scale is roughly
/// `1/√width`, so this is the natural interior operating point.
pub fn calibrated_beta(cfg: &SynthConfig, probes: usize) -> Result<f32> {
    let clean = SynthConfig { noise_std: 0.0, ..cfg.clone() };
    clean.validate()?;
    let protos = clean.prototypes();
    let mut lo_span = f32::INFINITY;
    let mut hi_other = f32::NEG_INFINITY;
    for i in 0..probes.max(1) {
        let script = sample_script(&clean, i);
        let ep = render_episode(&clean, &protos, &script, i);
        for (t, s) in identity_scores(&ep)?.into_iter().enumerate() {
            if script.role(t) == FrameRole::Span {
                lo_span = lo_span.min(s);
            } else {
                hi_other = hi_other.max(s);
            }
        }
    }
    Ok(0.5 * (lo_span + hi_other))
}

fn gaussian(rng: &mut Prng, rows: usize, cols: usize, std: f32) -> Tensor {
    let n = Normal::new(0.0f32, std).expect("valid deviation");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).expect("shape")
}

/// Small unstructured multi-choice episode for gradient and invariant checks.
pub fn toy_episode(seed: u64, frames: usize, objects: usize, options: usize, width: usize) -> Episode {
    let mut rng = seeded(seed);
    let frames = (0..frames)
        .map(|t| {
            let patches = gaussian(&mut rng, 4, width, 1.0);
            let boxes: Vec<BoundingBox> = (0..objects).map(|_| actor_box(&mut rng)).collect();
            let spatial: Vec<[f32; 4]> = boxes.iter().map(|&b| b.into()).collect();
            FrameRecord {
                frame_index: t,
                frame_feature: mean_pool(&patches, None).expect("patch rows"),
                patch_embeddings: patches,
                roi_features: gaussian(&mut rng, objects, width, 1.0),
                spatial_features: if objects == 0 {
                    Tensor::zeros(vec![0, 4])
                } else {
                    Tensor::from_rows(&spatial).expect("box rows")
                },
                boxes,
            }
        })
        .collect();
    Episode {
        video_id: format!("toy{seed}"),
        frames,
        question_tokens: gaussian(&mut rng, 3, width, 1.0),
        answer_bank: gaussian(&mut rng, options, width, 1.0),
        qa_mode: QaMode::MultiChoice,
        label: rng.random_range(0..options),
        category: "toy".into(),
    }
}
