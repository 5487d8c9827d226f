//! Numeric core: tensors, a reverse-mode tape, attention, pooling,
//! gradient checking and the optimiser.

pub mod adam;
pub mod attention;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use attention::{mhsa, mhsa_on, MhsaParams};
pub use gradcheck::{central_difference, grad_check, max_relative_error};
pub use params::{identity_projection, init_linear, ParamTree};
pub use real::Real;
pub use tape::{Grads, Mat, Tape, Var};
pub use tensor::Tensor;

use rand::SeedableRng;

/// Pseudo-random generator used everywhere randomness is needed.
pub type Prng = rand_xoshiro::Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Prng {
    Prng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a tag.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> crate::Result<Tensor> {
    if !x.is_finite() {
        return Err(crate::Error::InvalidInput("softmax input has non-finite entries".into()));
    }
    let mut out = x.clone();
    let c = x.cols();
    if c == 0 {
        return Ok(out);
    }
    for (src, dst) in x.data().chunks_exact(c).zip(out.data_mut().chunks_exact_mut(c)) {
        tape::softmax_into(src, None, dst);
    }
    Ok(out)
}

/// Pooling over rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for PoolMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(crate::error::Error::Config(format!("unknown pool mode {other:?}"))),
        }
    }
}

/// Pools the rows kept by `mask` into a single row.
pub fn pool_on<T: Real>(tape: &mut Tape<T>, x: Var, mode: PoolMode, mask: Option<&[bool]>) -> Var {
    match (mode, mask) {
        (PoolMode::Mean, None) => tape.mean_rows(x),
        (PoolMode::Mean, Some(m)) => tape.mean_rows_masked(x, m),
        (PoolMode::Max, m) => tape.max_rows_masked(x, m),
    }
}

/// Mean pooling over rows on plain tensors.
pub fn mean_pool(x: &Tensor, mask: Option<&[bool]>) -> crate::Result<Tensor> {
    pool(x, PoolMode::Mean, mask)
}

/// Max pooling over rows on plain tensors.
pub fn max_pool(x: &Tensor, mask: Option<&[bool]>) -> crate::Result<Tensor> {
    pool(x, PoolMode::Max, mask)
}

/// Pools the rows of `x` kept by `mask`. Fails when no row is kept.
pub fn pool(x: &Tensor, mode: PoolMode, mask: Option<&[bool]>) -> crate::Result<Tensor> {
    if let Some(m) = mask {
        if m.len() != x.rows() {
            return Err(crate::Error::Shape(format!("mask of {} for {} rows", m.len(), x.rows())));
        }
    }
    let kept = mask.map_or(x.rows(), |m| m.iter().filter(|&&k| k).count());
    if kept == 0 {
        return Err(crate::Error::InvalidInput("cannot pool zero rows".into()));
    }
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x);
    let out = pool_on(&mut tape, xv, mode, mask);
    Ok(tape.tensor(out))
}
