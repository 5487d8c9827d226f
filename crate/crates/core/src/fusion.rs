//! Blending the global representation with attention over locals, and
//! answer prediction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::params::{init_linear, param_tree, ParamTree};
use crate::numcore::{Real, Tape, Tensor, Var};

/// Single-head cross-attention maps and the blend weight.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<P = Tensor> {
    pub gamma: f32,
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
}

param_tree!(FusionParams; meta: [gamma]; leaf: [w_q, w_k, w_v]; list: []; group: []);

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, gamma: f32) -> Self {
        Self { gamma, w_q: init_linear(rng, d, d), w_k: init_linear(rng, d, d), w_v: init_linear(rng, d, d) }
    }
}

/// Scaled dot-product attention of one query row over `keys`.
pub fn cross_attention_on<T: Real>(tape: &mut Tape<T>, p: &FusionParams<Var>, query: Var, keys: Var) -> Var {
    let q = tape.matmul(query, p.w_q);
    let k = tape.matmul(keys, p.w_k);
    let v = tape.matmul(keys, p.w_v);
    let d = tape.shape(q).1;
    let logits = tape.matmul_nt(q, k);
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let att = tape.softmax_rows(logits);
    tape.matmul(att, v)
}

/// `(1 − γ) F_global + γ CrossAtt(F_global, locals)`.
///
/// At `γ = 0` the global feature is returned as is.
pub fn fuse_on<T: Real>(tape: &mut Tape<T>, p: &FusionParams<Var>, global: Var, locals: &[Var]) -> Var {
    let gamma = p.gamma as f64;
    if gamma == 0.0 || locals.is_empty() {
        return global;
    }
    let keys = tape.concat_rows(locals);
    let att = cross_attention_on(tape, p, global, keys);
    if gamma == 1.0 {
        return att;
    }
    let a = tape.scale(global, 1.0 - gamma);
    let b = tape.scale(att, gamma);
    tape.add(a, b)
}

/// Fusion on plain tensors.
pub fn fuse_final(global: &Tensor, locals: &[Tensor], p: &FusionParams) -> Result<Tensor> {
    if locals.is_empty() {
        return Err(Error::InvalidInput("fusion needs at least one local representation".into()));
    }
    if !(0.0..=1.0).contains(&p.gamma) {
        return Err(Error::Config(format!("gamma {} outside [0, 1]", p.gamma)));
    }
    let mut tape = Tape::<f32>::new();
    let pv = p.map_ref(&mut |t| tape.leaf(t));
    let g = tape.leaf(global);
    let ls: Vec<Var> = locals.iter().map(|l| tape.leaf(l)).collect();
    let out = fuse_on(&mut tape, &pv, g, &ls);
    Ok(tape.tensor(out))
}

/// First index of the largest value.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn dots(f: &[f32], answers: &Tensor) -> Vec<f32> {
    answers.iter_rows().map(|a| a.iter().zip(f).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() as f32).collect()
}

/// Option with the highest dot product against `f_final`.
pub fn predict_objective(f_final: &[f32], answers: &Tensor) -> usize {
    argmax(&dots(f_final, answers))
}

/// Option maximising the product of video and question similarities.
pub fn predict_subjective(f_final: &[f32], question_pooled: &[f32], answers: &Tensor) -> usize {
    let video = dots(f_final, answers);
    let question = dots(question_pooled, answers);
    let product: Vec<f32> = video.iter().zip(&question).map(|(a, b)| a * b).collect();
    argmax(&product)
}
