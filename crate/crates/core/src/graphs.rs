//! Frame-specific spatial graphs.
//!
//! Each windowed frame becomes a graph whose nodes are the grounded objects
//! followed by one node for the whole frame. Edge weights come from a row
//! softmax over projected feature similarity.

use rand::Rng;

use crate::datamodel::{pad_grounding, Episode, FrameRecord};
use crate::error::{Error, Result};
use crate::frame_select::{clip_of, clip_spans, Selection, CLIPS, FRAMES_PER_CLIP, SAMPLED_FRAMES};
use crate::numcore::params::{init_linear, param_tree, ParamTree};
use crate::numcore::{Real, Tape, Tensor, Var};

/// Most graphs kept per clip.
pub const MAX_GRAPHS_PER_CLIP: usize = 10;

/// Node projection and the adjacency key/value maps.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphParams<P = Tensor> {
    /// `[C × d]`
    pub proj_v: P,
    /// `[d × d/2]`
    pub phi_k: P,
    /// `[d × d/2]`
    pub phi_v: P,
}

param_tree!(GraphParams; meta: []; leaf: [proj_v, phi_k, phi_v]; list: []; group: []);

impl GraphParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, c: usize, d: usize) -> Self {
        Self { proj_v: init_linear(rng, c, d), phi_k: init_linear(rng, d, d / 2), phi_v: init_linear(rng, d, d / 2) }
    }
}

/// Unprojected inputs of one frame graph, ready to be replayed on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    /// Position of the frame in `Episode::frames`.
    pub frame: usize,
    pub clip: usize,
    /// Slot on the 32-step sampled timeline, used for position embeddings.
    pub position: usize,
    pub score: f32,
    /// `[(m+1) × C]`: object RoI features then the frame feature.
    pub raw_nodes: Tensor,
    /// `[(m+1) × 4]`: box coordinates, zero for the frame node.
    pub spatial: Tensor,
    /// `m + 1` entries; padded objects are `false`, the frame node is `true`.
    pub mask: Vec<bool>,
}

impl GraphInput {
    /// Builds the node inputs of a frame. The record may be padded, in which
    /// case `object_mask` marks its real objects.
    pub fn from_record(rec: &FrameRecord, object_mask: &[bool]) -> Self {
        let m = rec.roi_features.rows();
        assert_eq!(object_mask.len(), m, "object mask length");
        let c = rec.frame_feature.cols();
        let mut raw = Vec::with_capacity((m + 1) * c);
        raw.extend_from_slice(rec.roi_features.data());
        raw.extend_from_slice(rec.frame_feature.data());
        let mut spatial = Vec::with_capacity((m + 1) * 4);
        spatial.extend_from_slice(rec.spatial_features.data());
        spatial.extend_from_slice(&[0.0; 4]);
        let mut mask = object_mask.to_vec();
        mask.push(true);
        Self {
            frame: 0,
            clip: 0,
            position: 0,
            score: 0.0,
            raw_nodes: Tensor::matrix(m + 1, c, raw).expect("node shape"),
            spatial: Tensor::matrix(m + 1, 4, spatial).expect("spatial shape"),
            mask,
        }
    }

    pub fn node_count(&self) -> usize {
        self.mask.len()
    }

    pub fn real_objects(&self) -> usize {
        self.mask.iter().filter(|&&k| k).count() - 1
    }

    /// Same graph with every object slot padded out to `m_max`.
    pub fn padded(&self, m_max: usize) -> Self {
        let m = self.node_count() - 1;
        assert!(m <= m_max, "cannot pad {m} objects down to {m_max}");
        let c = self.raw_nodes.cols();
        let mut raw = vec![0.0; (m_max + 1) * c];
        let mut spatial = vec![0.0; (m_max + 1) * 4];
        let mut mask = vec![false; m_max + 1];
        raw[..m * c].copy_from_slice(&self.raw_nodes.data()[..m * c]);
        raw[m_max * c..].copy_from_slice(self.raw_nodes.row(m));
        spatial[..m * 4].copy_from_slice(&self.spatial.data()[..m * 4]);
        mask[..m].copy_from_slice(&self.mask[..m]);
        mask[m_max] = true;
        Self {
            raw_nodes: Tensor::matrix(m_max + 1, c, raw).expect("node shape"),
            spatial: Tensor::matrix(m_max + 1, 4, spatial).expect("spatial shape"),
            mask,
            ..self.clone()
        }
    }
}

/// Projected node features and mask for a record padded to `object_mask.len()`
/// objects. The frame node is the last row and always unmasked.
pub fn assemble_nodes(rec: &FrameRecord, object_mask: &[bool], proj_v: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    if rec.roi_features.rows() != object_mask.len() {
        return Err(Error::Shape(format!(
            "{} roi rows for an object mask of {}",
            rec.roi_features.rows(),
            object_mask.len()
        )));
    }
    let g = GraphInput::from_record(rec, object_mask);
    Ok((g.raw_nodes.matmul(proj_v)?, g.mask))
}

/// Records the soft adjacency `softmax(hφ_k (hφ_v)ᵀ)` with masked columns
/// removed and masked rows replaced by identity rows.
pub fn adjacency_on<T: Real>(tape: &mut Tape<T>, h: Var, phi_k: Var, phi_v: Var, mask: &[bool]) -> Var {
    let k = tape.matmul(h, phi_k);
    let v = tape.matmul(h, phi_v);
    let logits = tape.matmul_nt(k, v);
    if mask.iter().all(|&m| m) {
        tape.softmax_rows(logits)
    } else {
        tape.masked_softmax_rows(logits, Some(mask), Some(mask))
    }
}

/// Soft adjacency of projected node features.
pub fn build_adjacency(f_u: &Tensor, phi_k: &Tensor, phi_v: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let n = f_u.rows();
    if mask.len() != n {
        return Err(Error::Shape(format!("mask of {} for {n} nodes", mask.len())));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidInput("every node is masked".into()));
    }
    if phi_k.rows() != f_u.cols() || phi_v.rows() != f_u.cols() || phi_k.cols() != phi_v.cols() {
        return Err(Error::Shape(format!(
            "adjacency maps [{}x{}], [{}x{}] for node width {}",
            phi_k.rows(),
            phi_k.cols(),
            phi_v.rows(),
            phi_v.cols(),
            f_u.cols()
        )));
    }
    let mut tape = Tape::<f32>::new();
    let h = tape.leaf(f_u);
    let k = tape.leaf(phi_k);
    let v = tape.leaf(phi_v);
    let r = adjacency_on(&mut tape, h, k, v, mask);
    Ok(tape.tensor(r))
}

/// Groups windowed frames into clips, keeping at most
/// [`MAX_GRAPHS_PER_CLIP`] per clip by score (ties favour earlier frames).
/// Output graphs are in temporal order within each clip.
pub fn plan_graphs(ep: &Episode, selection: &Selection, grounding: bool) -> Vec<Vec<GraphInput>> {
    let n = ep.frames.len();
    let spans = clip_spans(&selection.sampled, FRAMES_PER_CLIP, n);
    let mut clips: Vec<Vec<usize>> = vec![Vec::new(); CLIPS];
    for &t in &selection.windows {
        clips[clip_of(&spans, t)].push(t);
    }
    clips
        .into_iter()
        .enumerate()
        .map(|(c, mut frames)| {
            if frames.len() > MAX_GRAPHS_PER_CLIP {
                frames.sort_by(|&a, &b| selection.scores[b].total_cmp(&selection.scores[a]).then(a.cmp(&b)));
                frames.truncate(MAX_GRAPHS_PER_CLIP);
                frames.sort_unstable();
            }
            frames
                .into_iter()
                .map(|t| {
                    let rec = &ep.frames[t];
                    let mut g = if grounding {
                        GraphInput::from_record(rec, &vec![true; rec.object_count()])
                    } else {
                        GraphInput::from_record(&rec.without_objects(), &[])
                    };
                    g.frame = t;
                    g.clip = c;
                    g.position = timeline_position(t, n);
                    g.score = selection.scores[t];
                    g
                })
                .collect()
        })
        .collect()
}

/// Slot of frame `t` on the fixed sampled timeline.
pub fn timeline_position(t: usize, n_frames: usize) -> usize {
    (t * SAMPLED_FRAMES / n_frames.max(1)).min(SAMPLED_FRAMES - 1)
}

/// A built frame graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameGraph {
    pub frame_index: usize,
    pub clip: usize,
    pub score: f32,
    /// `[(m+1) × d]`
    pub node_features: Tensor,
    /// `[m × 4]`
    pub spatial: Tensor,
    /// `[(m+1) × (m+1)]`
    pub adjacency: Tensor,
    pub node_mask: Vec<bool>,
}

/// Builds every frame graph of an episode, grouped by clip.
pub fn build_graph_sequence(
    ep: &Episode,
    selection: &Selection,
    params: &GraphParams,
    grounding: bool,
    pad_to: Option<usize>,
) -> Result<Vec<Vec<FrameGraph>>> {
    plan_graphs(ep, selection, grounding)
        .into_iter()
        .map(|clip| {
            clip.into_iter()
                .map(|g| {
                    let g = match pad_to {
                        Some(m) => g.padded(m),
                        None => g,
                    };
                    let f_u = g.raw_nodes.matmul(&params.proj_v)?;
                    let adjacency = build_adjacency(&f_u, &params.phi_k, &params.phi_v, &g.mask)?;
                    let m = g.node_count() - 1;
                    Ok(FrameGraph {
                        frame_index: ep.frames[g.frame].frame_index,
                        clip: g.clip,
                        score: g.score,
                        node_features: f_u,
                        spatial: g.spatial.take_rows(m),
                        adjacency,
                        node_mask: g.mask,
                    })
                })
                .collect()
        })
        .collect()
}

/// Pads a record and assembles its graph input in one step.
pub fn padded_input(rec: &FrameRecord, m_max: usize) -> GraphInput {
    let (padded, mask) = pad_grounding(rec, m_max);
    GraphInput::from_record(&padded, &mask)
}

/// Binds graph parameters to tape leaves.
pub fn bind<T: Real>(tape: &mut Tape<T>, p: &GraphParams) -> GraphParams<Var> {
    p.map_ref(&mut |t| tape.leaf(t))
}
