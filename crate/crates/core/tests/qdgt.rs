use lgqave_core::graphs::{self, padded_input, GraphInput, GraphParams};
use lgqave_core::model::{forward_on, prepare, ModelDims, ModelParams, Pipeline, Scoring};
use lgqave_core::numcore::{seeded, MhsaParams, PoolMode, Tape, Tensor};
use lgqave_core::qdgt::{
    self, crossmodal_refine, edge_transform_on, edge_width, encode_on, local_on, mask_question, project_tokens,
    spatial_clip_on, temporal_on, EncodeOptions, QdgtParams, EDGE_HEADS,
};
use lgqave_core::synthbench::toy_episode;
use lgqave_core::training::model_grad_check;
use rand_distr::{Distribution, StandardNormal};

type M = Vec<Vec<f64>>;

fn gaussian(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn m64(t: &Tensor) -> M {
    t.iter_rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn mm(a: &M, b: &M) -> M {
    a.iter().map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect()).collect()
}

fn mm_nt(a: &M, b: &M) -> M {
    a.iter().map(|r| b.iter().map(|s| r.iter().zip(s).map(|(x, y)| x * y).sum()).collect()).collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn masked_softmax(logits: &M, mask: &[bool]) -> M {
    logits
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if !mask[i] {
                return (0..row.len()).map(|j| if i == j { 1.0 } else { 0.0 }).collect();
            }
            let max = row.iter().zip(mask).filter(|(_, &k)| k).map(|(v, _)| *v).fold(f64::MIN, f64::max);
            let e: Vec<f64> = row.iter().zip(mask).map(|(v, &k)| if k { (v - max).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

fn mhsa_ref(x: &M, p: &MhsaParams, mask: &[bool]) -> M {
    let (q, k, v) = (mm(x, &m64(&p.w_q)), mm(x, &m64(&p.w_k)), mm(x, &m64(&p.w_v)));
    let width = q[0].len();
    let hd = width / p.n_heads;
    let mut merged = vec![vec![0.0; width]; x.len()];
    for h in 0..p.n_heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..x.len() {
            let logits: Vec<f64> = (0..x.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let max = logits.iter().zip(mask).filter(|(_, &m)| m).map(|(l, _)| *l).fold(f64::MIN, f64::max);
            let w: Vec<f64> = logits.iter().zip(mask).map(|(l, &m)| if m { (l - max).exp() } else { 0.0 }).collect();
            let z: f64 = w.iter().sum();
            for c in cols.clone() {
                merged[i][c] = (0..x.len()).map(|j| w[j] / z * v[j][c]).sum();
            }
        }
    }
    mm(&merged, &m64(&p.w_o))
}

fn refine_ref(f: &[f64], z: &M) -> Vec<f64> {
    let mut out = f.to_vec();
    for t in z {
        let a = 1.0 / (1.0 + (-f.iter().zip(t).map(|(x, y)| x * y).sum::<f64>()).exp());
        out.iter_mut().zip(t).for_each(|(o, v)| *o += a * v);
    }
    out
}

/// Spatial unit without the edge transformer followed by the local head.
fn local_ref(g: &GraphInput, gp: &GraphParams, qp: &QdgtParams, z: &M) -> Vec<f64> {
    let f_u = mm(&m64(&g.raw_nodes), &m64(&gp.proj_v));
    let adj = |h: &M| masked_softmax(&mm_nt(&mm(h, &m64(&gp.phi_k)), &mm(h, &m64(&gp.phi_v))), &g.mask);
    let mut r = adj(&f_u);
    let mut h = add(&f_u, &mm(&m64(&g.spatial), &m64(&qp.box_embed)));
    for (u, w) in qp.layers.iter().enumerate() {
        let msg = mm(&mm(&r, &h), &m64(w));
        h = h.iter().zip(&msg).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y.max(0.0)).collect()).collect();
        if u + 1 < qp.layers.len() {
            r = adj(&h);
        }
    }
    let nodes = add(&h, &mhsa_ref(&h, &qp.spatial_mhsa, &g.mask));
    let kept = g.mask.iter().filter(|&&k| k).count() as f64;
    let summary: Vec<f64> = (0..nodes[0].len())
        .map(|c| nodes.iter().zip(&g.mask).filter(|(_, &k)| k).map(|(n, _)| n[c]).sum::<f64>() / kept)
        .collect();
    let f = mm(&vec![summary], &m64(&qp.phi_local));
    refine_ref(&f[0], z)
}

fn setup(seed: u64, d: usize) -> (GraphParams, QdgtParams) {
    let mut rng = seeded(seed);
    (GraphParams::init(&mut rng, d, d), QdgtParams::init(&mut rng, d, d, 10).unwrap())
}

fn graph_input(seed: u64, m: usize, d: usize) -> GraphInput {
    let ep = toy_episode(seed, 1, m, 3, d);
    GraphInput::from_record(&ep.frames[0], &vec![true; m])
}

fn assert_close(a: &[f32], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((*x as f64 - y).abs() <= tol * y.abs().max(1.0), "{x} vs {y}");
    }
}

#[test]
fn question_masking_examples() {
    let q = gaussian(1, 2, 4);
    assert_eq!(mask_question(&q, &[true, true]).unwrap(), q);
    assert!(mask_question(&q, &[false, false]).unwrap().data().iter().all(|&v| v == 0.0));
    let half = mask_question(&q, &[true, false]).unwrap();
    assert_eq!(half.row(0), q.row(0));
    assert!(half.row(1).iter().all(|&v| v == 0.0));
    assert!(mask_question(&q, &[true]).is_err());
}

#[test]
fn token_projection_is_linear() {
    let phi = gaussian(2, 4, 6);
    assert!(project_tokens(&Tensor::zeros(vec![3, 4]), &phi).unwrap().data().iter().all(|&v| v == 0.0));
    let q = gaussian(3, 3, 4);
    let z = project_tokens(&q, &phi).unwrap();
    let scaled = Tensor::matrix(3, 4, q.data().iter().map(|v| 2.5 * v).collect()).unwrap();
    let zs = project_tokens(&scaled, &phi).unwrap();
    for (a, b) in z.data().iter().zip(zs.data()) {
        assert!((2.5 * a - b).abs() < 1e-5);
    }
    assert_eq!(project_tokens(&gaussian(4, 1, 4), &phi).unwrap().shape(), [1, 6]);
}

#[test]
fn refinement_examples() {
    let f = gaussian(5, 1, 4);
    assert_eq!(crossmodal_refine(&f, &Tensor::zeros(vec![3, 4])).unwrap(), f);

    let f = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    let z = Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap();
    assert_eq!(crossmodal_refine(&f, &z).unwrap().data(), [1.0, 1.0]);

    let f = gaussian(6, 1, 4);
    let z1 = gaussian(7, 1, 4);
    let z3 = Tensor::from_rows(&[z1.row(0); 3]).unwrap();
    let dot: f64 = f.data().iter().zip(z1.data()).map(|(a, b)| (a * b) as f64).sum();
    let a = 3.0 / (1.0 + (-dot).exp());
    let want: Vec<f64> = f.data().iter().zip(z1.data()).map(|(x, z)| *x as f64 + a * *z as f64).collect();
    assert_close(crossmodal_refine(&f, &z3).unwrap().data(), &want, 1e-6);
    assert!(crossmodal_refine(&f, &gaussian(8, 2, 3)).is_err());
}

#[test]
fn edge_width_is_a_multiple_of_its_heads() {
    assert_eq!(edge_width(512), 510);
    assert_eq!(edge_width(64), 60);
    assert_eq!(edge_width(16), 15);
    assert_eq!(edge_width(512) / EDGE_HEADS, 102);
}

fn random_stochastic(seed: u64, mask: &[bool]) -> Tensor {
    let n = mask.len();
    let logits = m64(&gaussian(seed, n, n));
    let r = masked_softmax(&logits, mask);
    Tensor::matrix(n, n, r.into_iter().flatten().map(|v| v as f32).collect()).unwrap()
}

#[test]
fn edge_transform_with_uniform_attention_matches_a_mean_reference() {
    for seed in 0..20 {
        let d = 16;
        let (_, mut qp) = setup(seed, d);
        let e = edge_width(d);
        qp.edge_mhsa.w_q = Tensor::zeros(vec![e, e]);
        qp.edge_mhsa.w_k = Tensor::zeros(vec![e, e]);
        let slots = qp.slots();
        let masks: Vec<Vec<bool>> = vec![vec![true, true, false, true], vec![true, true], vec![true; 11]];
        let rs: Vec<Tensor> =
            masks.iter().enumerate().map(|(i, m)| random_stochastic(seed * 7 + i as u64, m)).collect();

        let mut tape = Tape::<f64>::new();
        let p = qdgt::bind(&mut tape, &qp);
        let vars: Vec<_> = rs.iter().map(|r| tape.leaf(r)).collect();
        let mrefs: Vec<&[bool]> = masks.iter().map(Vec::as_slice).collect();
        let out = edge_transform_on(&mut tape, &p, &vars, &mrefs, slots);

        let slot_of = |n: usize, i: usize| if i + 1 == n { slots - 1 } else { i };
        let mut rows: M = Vec::new();
        for (r, mask) in rs.iter().zip(&masks) {
            let n = mask.len();
            for i in (0..n).filter(|&i| mask[i]) {
                let mut canon = vec![0.0; slots];
                for j in 0..n {
                    canon[slot_of(n, j)] = r.get(i, j) as f64;
                }
                rows.push(canon);
            }
        }
        let k = rows.len() as f64;
        let mean: Vec<f64> = (0..slots).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / k).collect();
        let y = mm(
            &mm(&mm(&mm(&vec![mean], &m64(&qp.edge_in)), &m64(&qp.edge_mhsa.w_v)), &m64(&qp.edge_mhsa.w_o)),
            &m64(&qp.edge_out),
        )[0]
        .clone();
        for ((r, mask), v) in rs.iter().zip(&masks).zip(&out) {
            let n = mask.len();
            let logits: M = (0..n)
                .map(|i| (0..n).map(|j| r.get(i, j) as f64 + if mask[i] { y[slot_of(n, j)] } else { 0.0 }).collect())
                .collect();
            let want = masked_softmax(&logits, mask);
            let got = tape.tensor(*v);
            assert_close(got.data(), &want.concat(), 1e-6);
        }
    }
}

#[test]
fn edge_transform_keeps_rows_stochastic() {
    for seed in 0..50 {
        let (_, qp) = setup(seed, 16);
        let masks: Vec<Vec<bool>> =
            (0..3).map(|g| (0..4 + g).map(|i| i == 3 + g || !(seed + i as u64).is_multiple_of(3)).collect()).collect();
        let mut tape = Tape::<f32>::new();
        let p = qdgt::bind(&mut tape, &qp);
        let vars: Vec<_> =
            masks.iter().enumerate().map(|(i, m)| tape.leaf(&random_stochastic(seed + 100 * i as u64, m))).collect();
        let mrefs: Vec<&[bool]> = masks.iter().map(Vec::as_slice).collect();
        for (v, mask) in edge_transform_on(&mut tape, &p, &vars, &mrefs, qp.slots()).iter().zip(&masks) {
            let r = tape.tensor(*v);
            for (i, row) in r.iter_rows().enumerate() {
                if mask[i] {
                    let s: f64 = row.iter().map(|&x| x as f64).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!(row.iter().zip(mask).all(|(&x, &k)| x >= 0.0 && (k || x == 0.0)));
                }
            }
        }
    }
}

#[test]
fn local_representation_matches_a_straight_line_reference() {
    for seed in 0..10 {
        let d = 16;
        let (gp, qp) = setup(seed, d);
        let g = graph_input(seed + 50, 3, d).padded(5);
        let z = gaussian(seed + 90, 4, d);
        let mut tape = Tape::<f64>::new();
        let gv = graphs::bind(&mut tape, &gp);
        let qv = qdgt::bind(&mut tape, &qp);
        let zv = tape.leaf(&z);
        let outs = spatial_clip_on(&mut tape, &gv, &qv, std::slice::from_ref(&g), false);
        let local = local_on(&mut tape, &qv, outs[0].summary, zv);
        let want = local_ref(&g, &gp, &qp, &m64(&z));
        assert_close(tape.tensor(local).data(), &want, 1e-6);
    }
}

#[test]
fn zero_graph_stays_zero() {
    let (gp, qp) = setup(1, 16);
    let mut g = graph_input(2, 3, 16);
    g.raw_nodes = Tensor::zeros(vec![4, 16]);
    g.spatial = Tensor::zeros(vec![4, 4]);
    let mut tape = Tape::<f32>::new();
    let gv = graphs::bind(&mut tape, &gp);
    let qv = qdgt::bind(&mut tape, &qp);
    let outs = spatial_clip_on(&mut tape, &gv, &qv, &[g], true);
    assert!(tape.tensor(outs[0].nodes).data().iter().all(|&v| v == 0.0));
}

fn encode(
    gp: &GraphParams,
    qp: &QdgtParams,
    clips: &[Vec<GraphInput>],
    z: &Tensor,
    opts: &EncodeOptions,
) -> (Vec<Tensor>, Tensor) {
    let mut tape = Tape::<f32>::new();
    let gv = graphs::bind(&mut tape, gp);
    let qv = qdgt::bind(&mut tape, qp);
    let zv = tape.leaf(z);
    let lg = encode_on(&mut tape, &gv, &qv, clips, zv, opts);
    (lg.locals.iter().map(|&v| tape.tensor(v)).collect(), tape.tensor(lg.global.unwrap()))
}

fn toy_clips(seed: u64, d: usize) -> Vec<Vec<GraphInput>> {
    let ep = toy_episode(seed, 5, 3, 3, d);
    let mut clips = vec![Vec::new(); 2];
    for (t, rec) in ep.frames.iter().enumerate() {
        let m = (t % 3) + 1;
        let mut rec = rec.clone();
        rec.roi_features = rec.roi_features.take_rows(m);
        rec.spatial_features = rec.spatial_features.take_rows(m);
        rec.boxes.truncate(m);
        let mut g = GraphInput::from_record(&rec, &vec![true; m]);
        g.frame = t;
        g.position = 3 * t;
        clips[t / 3].push(g);
    }
    clips
}

#[test]
fn padding_leaves_locals_and_global_unchanged() {
    let d = 16;
    for seed in 0..50 {
        let (gp, qp) = setup(seed, d);
        let clips = toy_clips(seed, d);
        let padded: Vec<Vec<GraphInput>> = clips.iter().map(|c| c.iter().map(|g| g.padded(10)).collect()).collect();
        let z = gaussian(seed + 3, 4, d);
        let opts = EncodeOptions::default();
        let (la, ga) = encode(&gp, &qp, &clips, &z, &opts);
        let (lb, gb) = encode(&gp, &qp, &padded, &z, &opts);
        assert!(ga.max_abs_diff(&gb) < 1e-6 * ga.data().iter().fold(1.0f32, |m, v| m.max(v.abs())));
        for (a, b) in la.iter().zip(&lb) {
            assert!(a.max_abs_diff(b) < 1e-6 * a.data().iter().fold(1.0f32, |m, v| m.max(v.abs())));
        }
    }
}

#[test]
fn padded_input_agrees_with_manual_padding() {
    let ep = toy_episode(4, 1, 2, 3, 8);
    let g = GraphInput::from_record(&ep.frames[0], &[true, true]);
    assert_eq!(padded_input(&ep.frames[0], 10), g.padded(10));
}

#[test]
fn temporal_unit_symmetry_and_order() {
    let d = 16;
    let (_, qp) = setup(3, d);
    let s = gaussian(4, 1, d);
    let other = gaussian(5, 1, d);
    let mut tape = Tape::<f32>::new();
    let p = qdgt::bind(&mut tape, &qp);
    let sv = tape.leaf(&s);
    let ov = tape.leaf(&other);
    let dup = temporal_on(&mut tape, &p, &[sv, sv], &[7, 7]);
    let dup = tape.tensor(dup);
    assert_eq!(dup.row(0), dup.row(1));

    let fwd = temporal_on(&mut tape, &p, &[sv, ov], &[0, 1]);
    let rev = temporal_on(&mut tape, &p, &[ov, sv], &[0, 1]);
    let (fwd, rev) = (tape.tensor(fwd), tape.tensor(rev));
    assert!(fwd.row(0).iter().zip(rev.row(1)).any(|(a, b)| (a - b).abs() > 1e-4));

    let single = temporal_on(&mut tape, &p, &[sv], &[2]);
    assert!(tape.tensor(single).is_finite());
}

#[test]
fn max_and_mean_pooling_differ() {
    let d = 16;
    let (gp, qp) = setup(6, d);
    let clips = toy_clips(6, d);
    let z = gaussian(7, 3, d);
    let (_, mean) = encode(&gp, &qp, &clips, &z, &EncodeOptions::default());
    let (_, max) = encode(&gp, &qp, &clips, &z, &EncodeOptions { pool: PoolMode::Max, ..EncodeOptions::default() });
    assert!(mean.max_abs_diff(&max) > 1e-3);
}

#[test]
fn global_is_frame_order_free_without_positions() {
    let d = 16;
    for seed in 0..10 {
        let (gp, mut qp) = setup(seed, d);
        qp.positions = Tensor::zeros(vec![32, d]);
        let clips = toy_clips(seed, d);
        let reversed: Vec<Vec<GraphInput>> = clips.iter().rev().map(|c| c.iter().rev().cloned().collect()).collect();
        let z = gaussian(seed + 1, 3, d);
        let opts = EncodeOptions::default();
        let (_, a) = encode(&gp, &qp, &clips, &z, &opts);
        let (_, b) = encode(&gp, &qp, &reversed, &z, &opts);
        assert!(a.max_abs_diff(&b) < 1e-5);
    }
}

#[test]
fn zero_mask_makes_representations_text_independent() {
    let mut ep = toy_episode(8, 6, 3, 3, 16);
    let params = ModelParams::init(ModelDims::new(16, 16, 16), 2, 0.0, 0.9).unwrap();
    let pipe = Pipeline::default();
    let prep = prepare(&ep, &params, &pipe).unwrap();
    ep.question_tokens = gaussian(99, 6, 16);
    let mut other = prepare(&ep, &params, &pipe).unwrap();
    other.clips = prep.clips.clone();
    let run = |p: &lgqave_core::model::PreparedEpisode| {
        let mut tape = Tape::<f32>::new();
        let pv = params.bind(&mut tape);
        let mask = vec![false; p.question.rows()];
        let fw = forward_on(&mut tape, &pv, p, &pipe, &mask, Scoring::Options).unwrap();
        let locals: Vec<Tensor> = fw.locals.iter().map(|&v| tape.tensor(v)).collect();
        (locals, tape.tensor(fw.f_global.unwrap()))
    };
    let (la, ga) = run(&prep);
    let (lb, gb) = run(&other);
    assert_eq!(ga, gb);
    assert_eq!(la, lb);
}

#[test]
fn full_transformer_passes_a_gradient_check() {
    let ep = toy_episode(11, 2, 3, 3, 16);
    let mut params = ModelParams::init(ModelDims::new(16, 16, 16), 5, 0.0, 0.9).unwrap();
    params.randomize_heads(13);
    let pipe = Pipeline::default();
    let prep = prepare(&ep, &params, &pipe).unwrap();
    assert_eq!(prep.graph_count(), 2);
    for check in model_grad_check(&params, &[&prep], 0.0, &pipe, 1e-4).unwrap() {
        assert!(check.max_rel_error < 1e-3, "{}: {:.3e}", check.name, check.max_rel_error);
    }
}
