use rand::Rng;

use super::params::{init_linear, param_tree};
use super::real::Real;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Multi-head self-attention weights.
///
/// `w_q`, `w_k`, `w_v` map `[d_in × width]` and `w_o` maps back
/// `[width × d_in]`. The attention width must split evenly across heads.
#[derive(Clone, Debug, PartialEq)]
pub struct MhsaParams<P = Tensor> {
    pub n_heads: usize,
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
}

param_tree!(MhsaParams; meta: [n_heads]; leaf: [w_q, w_k, w_v, w_o]; list: []; group: []);

impl MhsaParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, width: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !width.is_multiple_of(n_heads) {
            return Err(Error::Shape(format!("attention width {width} is not divisible by {n_heads} heads")));
        }
        Ok(Self {
            n_heads,
            w_q: init_linear(rng, d_in, width),
            w_k: init_linear(rng, d_in, width),
            w_v: init_linear(rng, d_in, width),
            w_o: init_linear(rng, width, d_in),
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.cols()
    }

    pub fn validate(&self, d_in: usize) -> Result<()> {
        let width = self.width();
        if self.n_heads == 0 || !width.is_multiple_of(self.n_heads) {
            return Err(Error::Shape(format!("attention width {width} is not divisible by {} heads", self.n_heads)));
        }
        for (name, t, r, c) in [
            ("w_q", &self.w_q, d_in, width),
            ("w_k", &self.w_k, d_in, width),
            ("w_v", &self.w_v, d_in, width),
            ("w_o", &self.w_o, width, d_in),
        ] {
            if t.rows() != r || t.cols() != c {
                return Err(Error::Shape(format!("{name} is [{}x{}], expected [{r}x{c}]", t.rows(), t.cols())));
            }
        }
        Ok(())
    }
}

/// Records scaled dot-product self-attention over the rows of `x`.
///
/// Keys whose mask entry is `false` get zero attention weight.
pub fn mhsa_on<T: Real>(tape: &mut Tape<T>, x: Var, p: &MhsaParams<Var>, key_mask: Option<&[bool]>) -> Var {
    let q = tape.matmul(x, p.w_q);
    let k = tape.matmul(x, p.w_k);
    let v = tape.matmul(x, p.w_v);
    let width = tape.shape(q).1;
    let hd = width / p.n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let heads: Vec<Var> = (0..p.n_heads)
        .map(|h| {
            let (qh, kh, vh) = if p.n_heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, h * hd, hd), tape.slice_cols(k, h * hd, hd), tape.slice_cols(v, h * hd, hd))
            };
            let logits = tape.matmul_nt(qh, kh);
            let logits = tape.scale(logits, scale);
            let att = tape.masked_softmax_rows(logits, key_mask, None);
            tape.matmul(att, vh)
        })
        .collect();
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
    tape.matmul(merged, p.w_o)
}

/// Multi-head self-attention on plain tensors.
pub fn mhsa(x: &Tensor, p: &MhsaParams, key_mask: Option<&[bool]>) -> Result<Tensor> {
    p.validate(x.cols())?;
    if let Some(m) = key_mask {
        if m.len() != x.rows() {
            return Err(Error::Shape(format!("key mask has {} entries for {} rows", m.len(), x.rows())));
        }
    }
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x);
    let pv = bind(&mut tape, p);
    let out = mhsa_on(&mut tape, xv, &pv, key_mask);
    Ok(tape.tensor(out))
}

fn bind<T: Real>(tape: &mut Tape<T>, p: &MhsaParams) -> MhsaParams<Var> {
    use super::params::ParamTree;
    p.map_ref(&mut |t| tape.leaf(t))
}
