//! Question-aware dynamic graph transformer.
//!
//! The spatial unit refines the nodes of each frame graph with a few rounds of
//! message passing over an adjacency rebuilt from the updated features, then
//! self-attention. The temporal unit mixes frame summaries within a clip.
//! Local (per frame) and global (whole video) representations are then
//! refined with gated question tokens.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graphs::{adjacency_on, GraphInput, GraphParams};
use crate::numcore::params::{init_linear, param_tree, ParamTree};
use crate::numcore::{mhsa_on, pool_on, Mat, MhsaParams, PoolMode, Real, Tape, Tensor, Var};

pub const ATTENTION_HEADS: usize = 8;
pub const EDGE_HEADS: usize = 5;
pub const GRAPH_LAYERS: usize = 2;
pub const TIMELINE: usize = 32;

/// Width of the edge transformer: the largest multiple of its head count
/// not above `d`.
pub fn edge_width(d: usize) -> usize {
    (EDGE_HEADS * (d / EDGE_HEADS)).max(EDGE_HEADS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QdgtParams<P = Tensor> {
    /// `[4 × d]` embedding of box coordinates added to object nodes.
    pub box_embed: P,
    /// One `[d × d]` message map per graph layer.
    pub layers: Vec<P>,
    pub spatial_mhsa: MhsaParams<P>,
    pub temporal_mhsa: MhsaParams<P>,
    /// `[32 × d]` temporal position table, sinusoidal at initialisation.
    pub positions: P,
    /// `[(m_max+1) × E]`
    pub edge_in: P,
    pub edge_mhsa: MhsaParams<P>,
    /// `[E × (m_max+1)]`
    pub edge_out: P,
    /// `[d × d]`
    pub phi_local: P,
    /// `[C_text × d]` projection of masked question tokens.
    pub phi_qhat: P,
    pub global_mhsa: MhsaParams<P>,
}

param_tree!(QdgtParams;
    meta: [];
    leaf: [box_embed, positions, edge_in, edge_out, phi_local, phi_qhat];
    list: [layers];
    group: [spatial_mhsa, temporal_mhsa, edge_mhsa, global_mhsa]);

impl QdgtParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, c_text: usize, d: usize, max_objects: usize) -> Result<Self> {
        if !d.is_multiple_of(ATTENTION_HEADS) {
            return Err(Error::Config(format!("model width {d} is not divisible by {ATTENTION_HEADS} heads")));
        }
        let slots = max_objects + 1;
        let e = edge_width(d);
        Ok(Self {
            box_embed: init_linear(rng, 4, d),
            layers: (0..GRAPH_LAYERS).map(|_| init_linear(rng, d, d)).collect(),
            spatial_mhsa: MhsaParams::init(rng, d, d, ATTENTION_HEADS)?,
            temporal_mhsa: MhsaParams::init(rng, d, d, ATTENTION_HEADS)?,
            positions: sinusoidal_table(TIMELINE, d),
            edge_in: init_linear(rng, slots, e),
            edge_mhsa: MhsaParams::init(rng, e, e, EDGE_HEADS)?,
            edge_out: init_linear(rng, e, slots),
            phi_local: init_linear(rng, d, d),
            phi_qhat: init_linear(rng, c_text, d),
            global_mhsa: MhsaParams::init(rng, d, d, ATTENTION_HEADS)?,
        })
    }

    /// Node slots per graph in the canonical edge layout.
    pub fn slots(&self) -> usize {
        self.edge_in.rows()
    }
}

/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(...)`.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![len, d]);
    for p in 0..len {
        for i in 0..d {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = p as f64 / freq;
            t.set(p, i, if i % 2 == 0 { a.sin() } else { a.cos() } as f32);
        }
    }
    t
}

/// Zeroes the question tokens whose mask entry is `false`.
pub fn mask_question(q: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if mask.len() != q.rows() {
        return Err(Error::Shape(format!("mask of {} for {} tokens", mask.len(), q.rows())));
    }
    let mut out = q.clone();
    for (i, &keep) in mask.iter().enumerate() {
        if !keep {
            out.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Token projection `Z = Q̂ φ`.
pub fn project_tokens(q_hat: &Tensor, phi_qhat: &Tensor) -> Result<Tensor> {
    q_hat.matmul(phi_qhat)
}

/// Records `F + Σ_h σ(F·z_h) z_h` for a single row `f` and token rows `z`.
pub fn crossmodal_refine_on<T: Real>(tape: &mut Tape<T>, f: Var, z: Var) -> Var {
    let logits = tape.matmul_nt(z, f);
    let alpha = tape.sigmoid(logits);
    let alpha_t = tape.transpose(alpha);
    let gated = tape.matmul(alpha_t, z);
    tape.add(f, gated)
}

pub fn crossmodal_refine(f: &Tensor, z: &Tensor) -> Result<Tensor> {
    if f.cols() != z.cols() || f.rows() != 1 {
        return Err(Error::Shape(format!(
            "refining a [{}x{}] feature with [{}x{}] tokens",
            f.rows(),
            f.cols(),
            z.rows(),
            z.cols()
        )));
    }
    let mut tape = Tape::<f32>::new();
    let fv = tape.leaf(f);
    let zv = tape.leaf(z);
    let out = crossmodal_refine_on(&mut tape, fv, zv);
    Ok(tape.tensor(out))
}

/// Constant `[n × slots]` map placing object `i` in slot `i` and the frame
/// node in the last slot.
fn canonical_scatter<T: Real>(n: usize, slots: usize) -> Mat<T> {
    let mut s = Mat::zeros(n, slots);
    for i in 0..n - 1 {
        s.data[i * slots + i] = T::one();
    }
    s.data[(n - 1) * slots + slots - 1] = T::one();
    s
}

/// Constant `[n × k]` map sending the `j`-th unmasked row back to its node.
fn unmasked_scatter<T: Real>(mask: &[bool]) -> (Mat<T>, Vec<usize>) {
    let kept: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    let mut p = Mat::zeros(mask.len(), kept.len());
    for (j, &i) in kept.iter().enumerate() {
        p.data[i * kept.len() + j] = T::one();
    }
    (p, kept)
}

/// Refines the adjacency matrices of one clip jointly.
///
/// Unmasked rows of every graph are laid out in a canonical slot order,
/// mixed by self-attention across the whole clip, added back as logits and
/// re-normalised per graph.
pub fn edge_transform_on<T: Real>(
    tape: &mut Tape<T>,
    p: &QdgtParams<Var>,
    adjacency: &[Var],
    masks: &[&[bool]],
    slots: usize,
) -> Vec<Var> {
    let mut canon = Vec::with_capacity(adjacency.len());
    let mut rows = Vec::with_capacity(adjacency.len());
    for (&r, mask) in adjacency.iter().zip(masks) {
        let n = mask.len();
        assert!(n <= slots, "graph with {n} nodes exceeds {slots} slots");
        let scatter = tape.leaf_mat(canonical_scatter(n, slots));
        let full = tape.matmul(r, scatter);
        let (_, kept) = unmasked_scatter::<T>(mask);
        rows.push(tape.gather_rows(full, &kept));
        canon.push((full, scatter));
    }
    let x = tape.concat_rows(&rows);
    let h = tape.matmul(x, p.edge_in);
    let a = mhsa_on(tape, h, &p.edge_mhsa, None);
    let y = tape.matmul(a, p.edge_out);

    let mut offset = 0;
    canon
        .into_iter()
        .zip(masks)
        .map(|((full, scatter), mask)| {
            let (place, kept) = unmasked_scatter::<T>(mask);
            let idx: Vec<usize> = (offset..offset + kept.len()).collect();
            offset += kept.len();
            let yg = tape.gather_rows(y, &idx);
            let place = tape.leaf_mat(place);
            let yg = tape.matmul(place, yg);
            let logits = tape.add(full, yg);
            let logits = tape.matmul_nt(logits, scatter);
            if mask.iter().all(|&m| m) {
                tape.softmax_rows(logits)
            } else {
                tape.masked_softmax_rows(logits, Some(mask), Some(mask))
            }
        })
        .collect()
}

/// Output of the spatial unit for one graph.
#[derive(Clone, Copy, Debug)]
pub struct SpatialOut {
    /// `[(m+1) × d]` refined node features.
    pub nodes: Var,
    /// `[1 × d]` mean of unmasked nodes.
    pub summary: Var,
}

/// Runs the spatial unit over every graph of a clip in lockstep.
pub fn spatial_clip_on<T: Real>(
    tape: &mut Tape<T>,
    graph: &GraphParams<Var>,
    p: &QdgtParams<Var>,
    clip: &[GraphInput],
    edge_transform: bool,
) -> Vec<SpatialOut> {
    let slots = tape.shape(p.edge_in).0;
    let masks: Vec<&[bool]> = clip.iter().map(|g| g.mask.as_slice()).collect();
    let mut hs = Vec::with_capacity(clip.len());
    let mut adj = Vec::with_capacity(clip.len());
    for g in clip {
        let x = tape.leaf(&g.raw_nodes);
        let f_u = tape.matmul(x, graph.proj_v);
        adj.push(adjacency_on(tape, f_u, graph.phi_k, graph.phi_v, &g.mask));
        let s = tape.leaf(&g.spatial);
        let boxes = tape.matmul(s, p.box_embed);
        hs.push(tape.add(f_u, boxes));
    }
    for (u, &w) in p.layers.iter().enumerate() {
        if edge_transform {
            adj = edge_transform_on(tape, p, &adj, &masks, slots);
        }
        for (h, r) in hs.iter_mut().zip(&adj) {
            let msg = tape.matmul(*r, *h);
            let msg = tape.matmul(msg, w);
            let msg = tape.relu(msg);
            *h = tape.add(*h, msg);
        }
        if u + 1 < p.layers.len() {
            for ((a, h), g) in adj.iter_mut().zip(&hs).zip(clip) {
                *a = adjacency_on(tape, *h, graph.phi_k, graph.phi_v, &g.mask);
            }
        }
    }
    hs.into_iter()
        .zip(clip)
        .map(|(h, g)| {
            let all = g.mask.iter().all(|&m| m);
            let key_mask = if all { None } else { Some(g.mask.as_slice()) };
            let att = mhsa_on(tape, h, &p.spatial_mhsa, key_mask);
            let nodes = tape.add(h, att);
            let summary = if all { tape.mean_rows(nodes) } else { tape.mean_rows_masked(nodes, &g.mask) };
            SpatialOut { nodes, summary }
        })
        .collect()
}

/// Mixes the frame summaries of one clip. Returns one row per frame.
pub fn temporal_on<T: Real>(tape: &mut Tape<T>, p: &QdgtParams<Var>, summaries: &[Var], positions: &[usize]) -> Var {
    let v = tape.concat_rows(summaries);
    let pos = tape.gather_rows(p.positions, positions);
    let x = tape.add(v, pos);
    let att = mhsa_on(tape, x, &p.temporal_mhsa, None);
    tape.add(x, att)
}

/// `refine(φ_local(summary))` for one frame.
pub fn local_on<T: Real>(tape: &mut Tape<T>, p: &QdgtParams<Var>, summary: Var, z: Var) -> Var {
    let f = tape.matmul(summary, p.phi_local);
    crossmodal_refine_on(tape, f, z)
}

/// `refine(pool(MHSA(frames)))` over all temporally mixed frame rows.
pub fn global_on<T: Real>(tape: &mut Tape<T>, p: &QdgtParams<Var>, frames: Var, z: Var, pool: PoolMode) -> Var {
    let att = mhsa_on(tape, frames, &p.global_mhsa, None);
    let pooled = pool_on(tape, att, pool, None);
    crossmodal_refine_on(tape, pooled, z)
}

/// Local and global representations of one episode.
#[derive(Clone, Debug)]
pub struct LocalGlobal<V = Var> {
    pub locals: Vec<V>,
    pub global: Option<V>,
}

/// Runs the whole transformer over prepared clips.
///
/// `z` holds the projected masked question tokens. Empty clips are skipped.
pub fn encode_on<T: Real>(
    tape: &mut Tape<T>,
    graph: &GraphParams<Var>,
    p: &QdgtParams<Var>,
    clips: &[Vec<GraphInput>],
    z: Var,
    opts: &EncodeOptions,
) -> LocalGlobal {
    let mut locals = Vec::new();
    let mut temporal_rows = Vec::new();
    for clip in clips.iter().filter(|c| !c.is_empty()) {
        let outs = spatial_clip_on(tape, graph, p, clip, opts.edge_transform);
        let summaries: Vec<Var> = outs.iter().map(|o| o.summary).collect();
        if opts.local {
            for &s in &summaries {
                locals.push(local_on(tape, p, s, z));
            }
        }
        if opts.global {
            let positions: Vec<usize> = clip.iter().map(|g| g.position).collect();
            temporal_rows.push(temporal_on(tape, p, &summaries, &positions));
        }
    }
    let global = if opts.global && !temporal_rows.is_empty() {
        let frames = tape.concat_rows(&temporal_rows);
        Some(global_on(tape, p, frames, z, opts.pool))
    } else {
        None
    };
    LocalGlobal { locals, global }
}

/// Which parts of the transformer run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeOptions {
    pub local: bool,
    pub global: bool,
    pub edge_transform: bool,
    pub pool: PoolMode,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self { local: true, global: true, edge_transform: true, pool: PoolMode::Mean }
    }
}

/// Binds transformer parameters to tape leaves.
pub fn bind<T: Real>(tape: &mut Tape<T>, p: &QdgtParams) -> QdgtParams<Var> {
    p.map_ref(&mut |t| tape.leaf(t))
}
