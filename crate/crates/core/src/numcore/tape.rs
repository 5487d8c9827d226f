//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] walks the record in reverse and returns the gradient of
//! the seeded outputs with respect to every node.

use super::kernels;
use super::real::Real;
use super::tensor::Tensor;

/// Row-major matrix living on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self { rows: t.rows(), cols: t.cols(), data: t.data().iter().map(|&x| T::of_f32(x)).collect() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.data.iter().map(|x| x.as_f32()).collect()).expect("consistent matrix")
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn scaled(&self, s: T) -> Mat<T> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| x * s).collect() }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, identity_rows: Vec<bool> },
    MeanRows { x: Var, rows: Vec<usize> },
    MaxRows { x: Var, arg: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    RepeatRows(Var),
    CrossEntropy { logits: Var, target: usize },
    SumAll(Var),
}

struct Node<T> {
    value: Mat<T>,
    op: Op,
}

/// Operation record for one forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        self.value(v).to_tensor()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let m = self.value(v);
        (m.rows, m.cols)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Mat::from_tensor(t), Op::Leaf)
    }

    pub fn leaf_mat(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.cols, mb.rows, "matmul inner dimension");
        let mut out = Mat::zeros(ma.rows, mb.cols);
        kernels::matmul(&ma.data, &mb.data, &mut out.data, ma.rows, ma.cols, mb.cols);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.cols, mb.cols, "matmul_nt inner dimension");
        let mut out = Mat::zeros(ma.rows, mb.rows);
        kernels::matmul_nt(&ma.data, &mb.data, &mut out.data, ma.rows, ma.cols, mb.rows);
        self.push(out, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = transpose(self.value(a));
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    /// Adds the single row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((mb.rows, mb.cols), (1, ma.cols), "add_row shape");
        let mut out = ma.clone();
        for r in 0..out.rows {
            for (o, &x) in out.row_mut(r).iter_mut().zip(&mb.data) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(T::of_f64(s));
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        self.masked_softmax_rows(x, None, None)
    }

    /// Row softmax where columns with `keep_cols[j] == false` receive zero
    /// weight and rows with `keep_rows[i] == false` become identity rows.
    pub fn masked_softmax_rows(&mut self, x: Var, keep_cols: Option<&[bool]>, keep_rows: Option<&[bool]>) -> Var {
        let m = self.value(x);
        if let Some(k) = keep_cols {
            assert_eq!(k.len(), m.cols, "column mask length");
        }
        if let Some(k) = keep_rows {
            assert_eq!(k.len(), m.rows, "row mask length");
            assert_eq!(m.rows, m.cols, "identity rows need a square input");
        }
        let mut out = Mat::zeros(m.rows, m.cols);
        let mut identity_rows = vec![false; m.rows];
        for r in 0..m.rows {
            if keep_rows.is_some_and(|k| !k[r]) {
                identity_rows[r] = true;
                out.data[r * m.cols + r] = T::one();
                continue;
            }
            softmax_into(m.row(r), keep_cols, out.row_mut(r));
        }
        self.push(out, Op::Softmax { x, identity_rows })
    }

    /// Mean over all rows, giving a single row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let rows: Vec<usize> = (0..self.value(x).rows).collect();
        self.mean_of_rows(x, rows)
    }

    /// Mean over the rows whose mask entry is `true`.
    pub fn mean_rows_masked(&mut self, x: Var, keep: &[bool]) -> Var {
        assert_eq!(keep.len(), self.value(x).rows, "row mask length");
        let rows: Vec<usize> = keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
        self.mean_of_rows(x, rows)
    }

    fn mean_of_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let m = self.value(x);
        let mut acc = vec![0f64; m.cols];
        for &r in &rows {
            for (a, v) in acc.iter_mut().zip(m.row(r)) {
                *a += v.as_f64();
            }
        }
        let n = rows.len().max(1) as f64;
        let out = Mat::from_vec(1, m.cols, acc.into_iter().map(|a| T::of_f64(a / n)).collect());
        self.push(out, Op::MeanRows { x, rows })
    }

    /// Column-wise maximum over the rows whose mask entry is `true`.
    pub fn max_rows_masked(&mut self, x: Var, keep: Option<&[bool]>) -> Var {
        let m = self.value(x);
        let mut arg = vec![usize::MAX; m.cols];
        let mut best = vec![T::neg_infinity(); m.cols];
        for r in 0..m.rows {
            if keep.is_some_and(|k| !k[r]) {
                continue;
            }
            for (c, &v) in m.row(r).iter().enumerate() {
                if v > best[c] || arg[c] == usize::MAX {
                    best[c] = v;
                    arg[c] = r;
                }
            }
        }
        let best = best.into_iter().map(|b| if b.is_finite() { b } else { T::zero() }).collect();
        let out = Mat::from_vec(1, m.cols, best);
        self.push(out, Op::MaxRows { x, arg })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows, rows, "concat_cols row count");
                out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows column count");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.cols, "slice_cols range");
        let mut out = Mat::zeros(m.rows, len);
        for r in 0..m.rows {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let m = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * m.cols);
        for &i in idx {
            data.extend_from_slice(m.row(i));
        }
        let out = Mat::from_vec(idx.len(), m.cols, data);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Repeats a single row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let m = self.value(x);
        assert_eq!(m.rows, 1, "repeat_rows expects one row");
        let mut data = Vec::with_capacity(n * m.cols);
        for _ in 0..n {
            data.extend_from_slice(&m.data);
        }
        let out = Mat::from_vec(n, m.cols, data);
        self.push(out, Op::RepeatRows(x))
    }

    /// Softmax cross-entropy of a single row of logits against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let m = self.value(logits);
        assert_eq!(m.rows, 1, "cross_entropy expects one row of logits");
        assert!(target < m.cols, "cross_entropy target out of range");
        let lse = log_sum_exp(&m.data);
        let v = lse - m.data[target].as_f64();
        self.push(Mat::from_vec(1, 1, vec![T::of_f64(v)]), Op::CrossEntropy { logits, target })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().map(|v| v.as_f64()).sum();
        self.push(Mat::from_vec(1, 1, vec![T::of_f64(s)]), Op::SumAll(x))
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Mat<T> {
        let m = self.value(a);
        Mat { rows: m.rows, cols: m.cols, data: m.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Mat<T> {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols), "elementwise shape");
        Mat { rows: ma.rows, cols: ma.cols, data: ma.data.iter().zip(&mb.data).map(|(&x, &y)| f(x, y)).collect() }
    }

    /// Gradient of a scalar node with respect to every node.
    pub fn backward_scalar(&self, root: Var) -> Grads<T> {
        self.backward(&[(root, Mat::from_vec(1, 1, vec![T::one()]))])
    }

    /// Vector-Jacobian product seeded at several nodes at once.
    pub fn backward(&self, seeds: &[(Var, Mat<T>)]) -> Grads<T> {
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            let n = &self.nodes[v.0].value;
            assert_eq!((g.rows, g.cols), (n.rows, n.cols), "seed shape");
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ma, mb) = (self.value(a), self.value(b));
                let mut ga = Mat::zeros(ma.rows, ma.cols);
                kernels::matmul_nt(&g.data, &mb.data, &mut ga.data, g.rows, g.cols, mb.rows);
                let mut gb = Mat::zeros(mb.rows, mb.cols);
                kernels::matmul_tn(&ma.data, &g.data, &mut gb.data, ma.rows, ma.cols, g.cols);
                accumulate(grads, a, ga);
                accumulate(grads, b, gb);
            }
            &Op::MatMulNt(a, b) => {
                // c = a bᵀ, so da = g b and db = gᵀ a
                let (ma, mb) = (self.value(a), self.value(b));
                let mut ga = Mat::zeros(ma.rows, ma.cols);
                kernels::matmul(&g.data, &mb.data, &mut ga.data, g.rows, g.cols, mb.cols);
                let mut gb = Mat::zeros(mb.rows, mb.cols);
                kernels::matmul_tn(&g.data, &ma.data, &mut gb.data, g.rows, g.cols, ma.cols);
                accumulate(grads, a, ga);
                accumulate(grads, b, gb);
            }
            &Op::Transpose(a) => accumulate(grads, a, transpose(g)),
            &Op::Add(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.clone());
            }
            &Op::AddRow(a, b) => {
                accumulate(grads, a, g.clone());
                let mut gb = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, &x) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(grads, b, gb);
            }
            &Op::Sub(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.scaled(-T::one()));
            }
            &Op::Mul(a, b) => {
                let (ma, mb) = (self.value(a), self.value(b));
                let ga = zip(g, mb, |x, y| x * y);
                let gb = zip(g, ma, |x, y| x * y);
                accumulate(grads, a, ga);
                accumulate(grads, b, gb);
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.scaled(T::of_f64(s))),
            &Op::Relu(a) => {
                let ga = zip(g, self.value(a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                accumulate(grads, a, ga);
            }
            &Op::Sigmoid(a) => {
                let ga = zip(g, &node.value, |gv, y| gv * y * (T::one() - y));
                accumulate(grads, a, ga);
            }
            Op::Softmax { x, identity_rows } => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows, y.cols);
                for (r, &identity) in identity_rows.iter().enumerate() {
                    if identity {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| (*a * *b).as_f64()).sum();
                    let inner = T::of_f64(inner);
                    for ((o, &yv), &gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MeanRows { x, rows } => {
                let m = self.value(*x);
                let mut gx = Mat::zeros(m.rows, m.cols);
                let inv = T::one() / T::of_f64(rows.len().max(1) as f64);
                for &r in rows {
                    for (o, &gv) in gx.row_mut(r).iter_mut().zip(&g.data) {
                        *o += gv * inv;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MaxRows { x, arg } => {
                let m = self.value(*x);
                let mut gx = Mat::zeros(m.rows, m.cols);
                for (c, &r) in arg.iter().enumerate() {
                    if r != usize::MAX {
                        gx.data[r * m.cols + c] += g.data[c];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    let mut gp = Mat::zeros(g.rows, pc);
                    for r in 0..g.rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                    }
                    accumulate(grads, p, gp);
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows;
                    let gp = Mat::from_vec(pr, g.cols, g.data[off * g.cols..(off + pr) * g.cols].to_vec());
                    accumulate(grads, p, gp);
                    off += pr;
                }
            }
            &Op::SliceCols { x, start } => {
                let m = self.value(x);
                let mut gx = Mat::zeros(m.rows, m.cols);
                for r in 0..m.rows {
                    gx.row_mut(r)[start..start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(grads, x, gx);
            }
            Op::GatherRows { x, idx } => {
                let m = self.value(*x);
                let mut gx = Mat::zeros(m.rows, m.cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &gv) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += gv;
                    }
                }
                accumulate(grads, *x, gx);
            }
            &Op::RepeatRows(x) => {
                let mut gx = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, &gv) in gx.data.iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                accumulate(grads, x, gx);
            }
            &Op::CrossEntropy { logits, target } => {
                let m = self.value(logits);
                let mut p = Mat::zeros(1, m.cols);
                softmax_into(&m.data, None, &mut p.data);
                p.data[target] -= T::one();
                accumulate(grads, logits, p.scaled(g.data[0]));
            }
            &Op::SumAll(x) => {
                let m = self.value(x);
                let gx = Mat::from_vec(m.rows, m.cols, vec![g.data[0]; m.rows * m.cols]);
                accumulate(grads, x, gx);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient as an `f32` tensor of the given shape, zero when the node did
    /// not influence the seeds.
    pub fn tensor_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        match self.get(v) {
            Some(m) => m.to_tensor(),
            None => Tensor::zeros(vec![rows, cols]),
        }
    }

    pub fn values_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        match self.get(v) {
            Some(m) => m.data.clone(),
            None => vec![T::zero(); len],
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip<T: Real>(a: &Mat<T>, b: &Mat<T>, f: impl Fn(T, T) -> T) -> Mat<T> {
    Mat { rows: a.rows, cols: a.cols, data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

fn transpose<T: Real>(m: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(m.cols, m.rows);
    for i in 0..m.rows {
        for j in 0..m.cols {
            out.data[j * m.rows + i] = m.data[i * m.cols + j];
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax of one row with an `f64` denominator.
pub(crate) fn softmax_into<T: Real>(x: &[T], keep: Option<&[bool]>, out: &mut [T]) {
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, v) in x.iter().enumerate() {
        if kept(j) {
            max = max.max(v.as_f64());
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut sum = 0f64;
    let mut ex = vec![0f64; x.len()];
    for (j, v) in x.iter().enumerate() {
        if kept(j) {
            ex[j] = (v.as_f64() - max).exp();
            sum += ex[j];
        }
    }
    for (o, e) in out.iter_mut().zip(ex) {
        *o = T::of_f64(e / sum);
    }
}

pub(crate) fn log_sum_exp<T: Real>(x: &[T]) -> f64 {
    let max = x.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + x.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln()
}
