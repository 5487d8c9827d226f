//! The full model: parameters, per-episode preparation and the forward pass
//! from frames and question to answer scores.

use serde::{Deserialize, Serialize};

use crate::datamodel::{token_mask, Episode, QaMode, MAX_OBJECTS};
use crate::error::{Error, Result};
use crate::frame_select::{select, Selection, SelectorParams};
use crate::fusion::{fuse_on, predict_objective, predict_subjective, FusionParams};
use crate::graphs::{plan_graphs, GraphInput, GraphParams};
use crate::numcore::params::{init_linear, param_tree, ParamTree};
use crate::numcore::{seeded, PoolMode, Real, Tape, Tensor, Var};
use crate::qdgt::{encode_on, mask_question, EncodeOptions, QdgtParams};

/// Input and model widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub c_visual: usize,
    pub c_text: usize,
    pub d: usize,
    pub max_objects: usize,
}

impl ModelDims {
    pub fn new(c_visual: usize, c_text: usize, d: usize) -> Self {
        Self { c_visual, c_text, d, max_objects: MAX_OBJECTS }
    }
}

/// Answer scoring heads mapping a concatenated pair back to width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P = Tensor> {
    /// `[2d × d]` applied to `[pooled question ; option]`.
    pub w_mc: P,
    /// `[2d × d]` applied to `[video ; pooled question]`.
    pub w_oe: P,
}

param_tree!(HeadParams; meta: []; leaf: [w_mc, w_oe]; list: []; group: []);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor> {
    pub dims: ModelDims,
    pub selector: SelectorParams<P>,
    pub graph: GraphParams<P>,
    pub qdgt: QdgtParams<P>,
    pub fusion: FusionParams<P>,
    pub heads: HeadParams<P>,
}

param_tree!(ModelParams; meta: [dims]; leaf: []; list: []; group: [selector, graph, qdgt, fusion, heads]);

/// Gradients share the parameter layout.
pub type ModelGrads = ModelParams<Tensor>;

impl ModelParams {
    /// Seeded initialisation. Selector projections start as identity
    /// truncations and the scoring heads start at zero.
    pub fn init(dims: ModelDims, seed: u64, beta: f32, gamma: f32) -> Result<Self> {
        let ModelDims { c_visual, c_text, d, max_objects } = dims;
        if d == 0 || d % 2 != 0 {
            return Err(Error::Config(format!("model width {d} must be positive and even")));
        }
        let mut rng = seeded(seed);
        Ok(Self {
            dims,
            selector: SelectorParams::identity(c_visual, c_text, d, beta),
            graph: GraphParams::init(&mut rng, c_visual, d),
            qdgt: QdgtParams::init(&mut rng, c_text, d, max_objects)?,
            fusion: FusionParams::init(&mut rng, d, gamma),
            heads: HeadParams { w_mc: Tensor::zeros(vec![2 * d, d]), w_oe: Tensor::zeros(vec![2 * d, d]) },
        })
    }

    /// Replaces the zero scoring heads with random ones.
    pub fn randomize_heads(&mut self, seed: u64) {
        let mut rng = seeded(seed);
        let d = self.dims.d;
        self.heads.w_mc = init_linear(&mut rng, 2 * d, d);
        self.heads.w_oe = init_linear(&mut rng, 2 * d, d);
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> ModelParams<Var> {
        self.map_ref(&mut |t| tape.leaf(t))
    }

    pub fn parameter_count(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> ModelGrads {
        self.map_ref(&mut |t| Tensor::zeros(t.shape().to_vec()))
    }
}

/// Pipeline switches used by the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub sampling: bool,
    pub grounding: bool,
    pub local: bool,
    pub global: bool,
    pub edge_transform: bool,
    pub pool: PoolMode,
    /// Logits are divided by this before every softmax loss.
    pub temperature: f64,
}

impl Default for Pipeline {
    fn default() -> Self {
        Self {
            sampling: true,
            grounding: true,
            local: true,
            global: true,
            edge_transform: true,
            pool: PoolMode::Mean,
            temperature: 1.0,
        }
    }
}

impl Pipeline {
    pub fn validate(&self) -> Result<()> {
        if !self.local && !self.global {
            return Err(Error::Config("at least one of local and global representations must be enabled".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }

    fn encode_options(&self) -> EncodeOptions {
        EncodeOptions { local: self.local, global: self.global, edge_transform: self.edge_transform, pool: self.pool }
    }
}

/// An episode with its frame selection and graph inputs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedEpisode {
    pub video_id: String,
    pub question: Tensor,
    /// Real (non-padding) question tokens.
    pub question_tokens: Vec<bool>,
    pub answers: Tensor,
    pub label: usize,
    pub qa_mode: QaMode,
    pub category: String,
    pub selection: Selection,
    pub clips: Vec<Vec<GraphInput>>,
}

impl PreparedEpisode {
    pub fn graph_count(&self) -> usize {
        self.clips.iter().map(Vec::len).sum()
    }

    /// Raw embedding of the labelled answer.
    pub fn positive_answer(&self) -> &[f32] {
        self.answers.row(self.label)
    }
}

/// Runs frame selection and graph planning for one episode.
pub fn prepare(ep: &Episode, params: &ModelParams, pipeline: &Pipeline) -> Result<PreparedEpisode> {
    let dims = params.dims;
    if ep.visual_width() != dims.c_visual || ep.text_width() != dims.c_text {
        return Err(Error::episode(
            &ep.video_id,
            format!(
                "embedding widths ({}, {}) do not match the model ({}, {})",
                ep.visual_width(),
                ep.text_width(),
                dims.c_visual,
                dims.c_text
            ),
        ));
    }
    let selection = select(ep, &params.selector, pipeline.sampling)?;
    let clips = plan_graphs(ep, &selection, pipeline.grounding);
    let question_tokens = token_mask(&ep.question_tokens);
    if !question_tokens.iter().any(|&k| k) {
        return Err(Error::episode(&ep.video_id, "question has no non-zero token"));
    }
    Ok(PreparedEpisode {
        video_id: ep.video_id.clone(),
        question: ep.question_tokens.clone(),
        question_tokens,
        answers: ep.answer_bank.clone(),
        label: ep.label,
        qa_mode: ep.qa_mode,
        category: ep.category.clone(),
        selection,
        clips,
    })
}

/// How the answers of an episode are scored.
#[derive(Clone, Copy, Debug)]
pub enum Scoring<'a> {
    /// Score every option of the episode's own bank against its label.
    Options,
    /// Score raw answer rows, positive first, against the video.
    Pool(&'a Tensor),
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub f_final: Var,
    pub f_global: Option<Var>,
    pub locals: Vec<Var>,
    /// Pooled projected question, `[1 × d]`.
    pub q_pool: Var,
    /// `[1 × n]` answer logits before temperature.
    pub logits: Var,
    /// Option encodings `[n × d]` for multi-choice scoring.
    pub option_codes: Option<Var>,
    /// Softmax cross-entropy of the logits against the positive.
    pub loss: Var,
}

/// Records the forward pass of one episode.
///
/// `question_mask` selects the tokens that reach the transformer; padding
/// tokens are always dropped from the pooled question.
pub fn forward_on<T: Real>(
    tape: &mut Tape<T>,
    p: &ModelParams<Var>,
    ep: &PreparedEpisode,
    pipeline: &Pipeline,
    question_mask: &[bool],
    scoring: Scoring<'_>,
) -> Result<Forward> {
    let q = tape.leaf(&ep.question);
    let q_proj = tape.matmul(q, p.selector.phi_q);
    let q_pool = tape.mean_rows_masked(q_proj, &ep.question_tokens);

    let q_hat = mask_question(&ep.question, question_mask)?;
    let q_hat = tape.leaf(&q_hat);
    let z = tape.matmul(q_hat, p.qdgt.phi_qhat);

    let lg = encode_on(tape, &p.graph, &p.qdgt, &ep.clips, z, &pipeline.encode_options());
    let f_final = match (lg.global, lg.locals.is_empty()) {
        (Some(g), false) => fuse_on(tape, &p.fusion, g, &lg.locals),
        (Some(g), true) => g,
        (None, false) => {
            let stacked = tape.concat_rows(&lg.locals);
            tape.mean_rows(stacked)
        }
        (None, true) => {
            return Err(Error::episode(&ep.video_id, "no frame representation was produced"));
        }
    };

    let (logits, option_codes, target) = match scoring {
        Scoring::Options => {
            let a = tape.leaf(&ep.answers);
            let a_proj = tape.matmul(a, p.selector.phi_q);
            let n = ep.answers.rows();
            let rep = tape.repeat_rows(q_pool, n);
            let pair = tape.concat_cols(&[rep, a_proj]);
            let codes = tape.matmul(pair, p.heads.w_mc);
            (tape.matmul_nt(f_final, codes), Some(codes), ep.label)
        }
        Scoring::Pool(pool) => {
            let a = tape.leaf(pool);
            let a_proj = tape.matmul(a, p.selector.phi_q);
            let pair = tape.concat_cols(&[f_final, q_pool]);
            let code = tape.matmul(pair, p.heads.w_oe);
            (tape.matmul_nt(code, a_proj), None, 0)
        }
    };
    let scaled = if pipeline.temperature == 1.0 { logits } else { tape.scale(logits, 1.0 / pipeline.temperature) };
    let loss = tape.cross_entropy(scaled, target);
    Ok(Forward { f_final, f_global: lg.global, locals: lg.locals, q_pool, logits, option_codes, loss })
}

/// Answer chosen by the model for an episode, with the full question.
pub fn predict(params: &ModelParams, ep: &PreparedEpisode, pipeline: &Pipeline) -> Result<usize> {
    predict_scored(params, ep, pipeline).map(|(answer, _)| answer)
}

/// Chosen answer together with the cross-entropy of the tempered answer
/// logits against the true label.
pub fn predict_scored(params: &ModelParams, ep: &PreparedEpisode, pipeline: &Pipeline) -> Result<(usize, f64)> {
    let mut tape = Tape::<f32>::new();
    let p = params.bind(&mut tape);
    let all = vec![true; ep.question.rows()];
    let (answer, fw) = match ep.qa_mode {
        QaMode::MultiChoice => {
            let fw = forward_on(&mut tape, &p, ep, pipeline, &all, Scoring::Options)?;
            let f = tape.tensor(fw.f_final);
            let codes = tape.tensor(fw.option_codes.expect("option scoring yields codes"));
            (predict_objective(f.data(), &codes), fw)
        }
        QaMode::OpenEnded => {
            let fw = forward_on(&mut tape, &p, ep, pipeline, &all, Scoring::Pool(&ep.answers))?;
            let f = tape.tensor(fw.f_final);
            let q = tape.tensor(fw.q_pool);
            let a = ep.answers.matmul(&params.selector.phi_q)?;
            (predict_subjective(f.data(), q.data(), &a), fw)
        }
    };
    let logits: Vec<f64> = tape.tensor(fw.logits).data().iter().map(|&v| v as f64 / pipeline.temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok((answer, lse - logits[ep.label]))
}
