//! Question-aware frame selection.
//!
//! Frames are sampled into fixed clips, scored against the question by
//! cross-attention between projected patch and token embeddings, thresholded,
//! and grown into short temporal windows.

use std::ops::Range;

use crate::datamodel::{token_mask, Episode};
use crate::error::{Error, Result};
use crate::numcore::params::param_tree;
use crate::numcore::{identity_projection, Tensor};

pub const SAMPLED_FRAMES: usize = 32;
pub const CLIPS: usize = 8;
pub const FRAMES_PER_CLIP: usize = 4;
pub const WINDOW_RADIUS: usize = 2;

/// Patch and token projections plus the selection threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorParams<P = Tensor> {
    pub beta: f32,
    /// `[C × d]`
    pub phi_e: P,
    /// `[C_text × d]`
    pub phi_q: P,
}

param_tree!(SelectorParams; meta: [beta]; leaf: [phi_e, phi_q]; list: []; group: []);

impl SelectorParams {
    /// Identity-truncation projections, so that at initialisation the score
    /// compares raw embedding directions.
    pub fn identity(c: usize, c_text: usize, d: usize, beta: f32) -> Self {
        Self { beta, phi_e: identity_projection(c, d), phi_q: identity_projection(c_text, d) }
    }
}

/// Uniformly strided frame indices grouped into `clips × per_clip` slots.
/// Short videos repeat their last frame.
pub fn sample_clips(n_frames: usize, target: usize, clips: usize, per_clip: usize) -> Vec<usize> {
    debug_assert_eq!(target, clips * per_clip);
    if n_frames == 0 {
        return Vec::new();
    }
    (0..target).map(|i| if n_frames >= target { i * n_frames / target } else { i.min(n_frames - 1) }).collect()
}

/// Range of original frame indices covered by each clip of a sampling.
pub fn clip_spans(sampled: &[usize], per_clip: usize, n_frames: usize) -> Vec<Range<usize>> {
    let starts: Vec<usize> = sampled.chunks(per_clip).map(|c| c[0]).collect();
    starts
        .iter()
        .enumerate()
        .map(|(c, &s)| {
            let end = starts.get(c + 1).copied().unwrap_or(n_frames).max(s + 1);
            s..end.min(n_frames.max(s + 1))
        })
        .collect()
}

/// Clip index of an original frame index under `spans`.
pub fn clip_of(spans: &[Range<usize>], t: usize) -> usize {
    spans.iter().rposition(|r| r.start <= t).unwrap_or(0)
}

/// Projects rows by `phi` and L2-normalises them. All-zero rows stay zero.
pub fn project_normalize(x: &Tensor, phi: &Tensor) -> Result<Tensor> {
    let mut out = x.matmul(phi)?;
    let c = out.cols();
    if c == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(c) {
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
    }
    Ok(out)
}

/// Relevance of one frame to the question.
///
/// Each patch row attends over question tokens; the score is the mean of all
/// entries of the attended matrix. All-zero rows on either side are padding
/// and are ignored.
pub fn frame_score(patches: &Tensor, question: &Tensor) -> Result<f32> {
    if patches.cols() != question.cols() {
        return Err(Error::Shape(format!(
            "patch width {} differs from question width {}",
            patches.cols(),
            question.cols()
        )));
    }
    let d = patches.cols();
    let rows: Vec<&[f32]> =
        patches.iter_rows().zip(token_mask(patches)).filter_map(|(r, keep)| keep.then_some(r)).collect();
    let tokens: Vec<&[f32]> =
        question.iter_rows().zip(token_mask(question)).filter_map(|(r, keep)| keep.then_some(r)).collect();
    if rows.is_empty() || tokens.is_empty() || d == 0 {
        return Err(Error::InvalidInput("frame score needs at least one patch and one token".into()));
    }
    // Only the token means matter once the attended rows are averaged.
    let token_means: Vec<f64> = tokens.iter().map(|t| t.iter().map(|&v| v as f64).sum::<f64>() / d as f64).collect();
    let mut logits = vec![0f64; tokens.len()];
    let mut total = 0f64;
    for r in &rows {
        for (l, t) in logits.iter_mut().zip(&tokens) {
            *l = r.iter().zip(t.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0f64;
        let mut acc = 0f64;
        for (l, m) in logits.iter().zip(&token_means) {
            let w = (l - max).exp();
            z += w;
            acc += w * m;
        }
        total += acc / z;
    }
    Ok((total / rows.len() as f64) as f32)
}

/// Indices whose score strictly exceeds `beta`, or the first argmax if none
/// does.
pub fn select_frames(scores: &[f32], beta: f32) -> Vec<usize> {
    let kept: Vec<usize> = scores.iter().enumerate().filter(|(_, &s)| s > beta).map(|(i, _)| i).collect();
    if !kept.is_empty() || scores.is_empty() {
        return kept;
    }
    vec![argmax(scores)]
}

fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Union of `[t - 2, t + 2] ∩ [0, n)` over `kept`, sorted and deduplicated.
pub fn expand_window(kept: &[usize], n: usize) -> Vec<usize> {
    let mut hit = vec![false; n];
    for &t in kept {
        let lo = t.saturating_sub(WINDOW_RADIUS);
        let hi = (t + WINDOW_RADIUS).min(n.saturating_sub(1));
        for h in hit.iter_mut().take(hi + 1).skip(lo) {
            *h = true;
        }
    }
    hit.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect()
}

/// Outcome of selecting frames for one episode. Indices refer to positions in
/// `Episode::frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Score of every frame of the episode.
    pub scores: Vec<f32>,
    /// Positions chosen by clip sampling, 32 entries.
    pub sampled: Vec<usize>,
    /// Sorted sampled positions that passed the threshold.
    pub kept: Vec<usize>,
    /// Sorted positions after window growth.
    pub windows: Vec<usize>,
}

/// Scores every frame of `ep` and selects windows.
///
/// With `sampling` off every sampled frame is kept and no threshold applies.
pub fn select(ep: &Episode, params: &SelectorParams, sampling: bool) -> Result<Selection> {
    let n = ep.frames.len();
    let sampled = sample_clips(n, SAMPLED_FRAMES, CLIPS, FRAMES_PER_CLIP);
    let mut unique = sampled.clone();
    unique.dedup();
    let q = project_normalize(&ep.question_tokens, &params.phi_q)?;
    let scores = ep
        .frames
        .iter()
        .map(|f| frame_score(&project_normalize(&f.patch_embeddings, &params.phi_e)?, &q))
        .collect::<Result<Vec<f32>>>()
        .map_err(|e| Error::episode(&ep.video_id, e.to_string()))?;
    if let Some(t) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::episode(&ep.video_id, format!("non-finite frame score at frame {t}")));
    }
    let (kept, windows) = if sampling {
        let sampled_scores: Vec<f32> = unique.iter().map(|&t| scores[t]).collect();
        let kept: Vec<usize> = select_frames(&sampled_scores, params.beta).into_iter().map(|i| unique[i]).collect();
        let windows = expand_window(&kept, n);
        (kept, windows)
    } else {
        (unique.clone(), unique)
    };
    Ok(Selection { scores, sampled, kept, windows })
}
