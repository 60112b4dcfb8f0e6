//! Dense tensors, deterministic randomness, initialization, SGD and the
//! central-difference gradient oracle.
//!
//! Everything numeric runs in `f64`. Checkpoints narrow to `f32` on disk
//! (see [`crate::checkpoint`]).

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major 2-D array.
///
/// Vectors are stored as single-column tensors where a tensor is needed
/// (biases), and as plain `Vec<f64>` everywhere else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "tensor {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// `n x 1` tensor holding `values`.
    pub fn column(values: Vec<f64>) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `out += self * x`.
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `self^T * y`.
    pub fn tmatvec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        self.tmatvec_acc(y, &mut out);
        out
    }

    /// `out += self^T * y`.
    pub fn tmatvec_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), out);
            }
        }
    }

    /// `self += scale * u v^T`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let a = scale * ur;
            if a != 0.0 {
                axpy(a, v, self.row_mut(r));
            }
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(scale, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest value; equal values resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Seeded random stream. Draws depend only on the seed and call order.
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent child stream; does not advance `self`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng(inner)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n as u64) as usize
    }

    /// Fisher-Yates, platform independent.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Samples an index from unnormalized non-negative weights.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            if target < w {
                return i;
            }
            target -= w;
        }
        // Rounding left a sliver past the end: take the last positive weight.
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

/// Glorot-uniform: entries in `[-b, b]` with `b = sqrt(6 / (rows + cols))`.
pub fn glorot_init(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "glorot_init needs non-zero dimensions, got {rows}x{cols}"
        )));
    }
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Ok(Tensor { rows, cols, data })
}

/// A fixed, ordered collection of named tensors that can be updated and
/// differentiated as a whole.
pub trait ParamSet: Clone {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;

    /// Same order as [`ParamSet::named_tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.norm_sq()).sum::<f64>().sqrt()
    }
}

impl ParamSet for Vec<Tensor> {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.iter().enumerate().map(|(i, t)| (i.to_string(), t)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

fn check_same_shapes<P: ParamSet>(a: &P, b: &P) -> Result<()> {
    let ta = a.named_tensors();
    let tb = b.named_tensors();
    if ta.len() != tb.len() {
        return Err(Error::invalid(format!(
            "parameter sets differ in size: {} vs {}",
            ta.len(),
            tb.len()
        )));
    }
    for ((name, x), (_, y)) in ta.iter().zip(&tb) {
        if x.shape() != y.shape() {
            return Err(Error::invalid(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping. Grads are untouched when the norm is
/// already within bounds.
pub fn clip_global_norm<P: ParamSet>(grads: &mut P, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip_norm {
        let factor = clip_norm / norm;
        for t in grads.tensors_mut() {
            t.scale(factor);
        }
    }
    norm
}

/// One plain SGD update with global-norm clipping. Returns the pre-clip
/// gradient norm.
pub fn sgd_step<P: ParamSet>(params: &mut P, grads: &P, lr: f64, clip_norm: f64) -> Result<f64> {
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    if !(clip_norm > 0.0) {
        return Err(Error::invalid(format!("clip_norm must be > 0, got {clip_norm}")));
    }
    check_same_shapes(params, grads)?;
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NumericalFailure("non-finite gradient norm".into()));
    }
    let factor = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        p.add_scaled(g, -lr * factor);
    }
    Ok(norm)
}

/// Central-difference gradient of `loss_fn` at `params`, one scalar at a time.
pub fn finite_diff_grad<P, F>(mut loss_fn: F, params: &P, eps: f64) -> Result<P>
where
    P: ParamSet,
    F: FnMut(&P) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be > 0, got {eps}")));
    }
    let mut work = params.clone();
    let mut grads = params.zeros_like();
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    for (ti, &len) in shapes.iter().enumerate() {
        for i in 0..len {
            let orig = work.tensors_mut()[ti].as_slice()[i];
            work.tensors_mut()[ti].as_mut_slice()[i] = orig + eps;
            let plus = loss_fn(&work);
            work.tensors_mut()[ti].as_mut_slice()[i] = orig - eps;
            let minus = loss_fn(&work);
            work.tensors_mut()[ti].as_mut_slice()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "loss is non-finite when perturbing tensor {ti} entry {i}"
                )));
            }
            grads.tensors_mut()[ti].as_mut_slice()[i] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Denominator floor used by [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest [`relative_error`] over every scalar, with the name of the tensor
/// where it occurred.
pub fn max_relative_error<P: ParamSet>(a: &P, b: &P) -> Result<(f64, String)> {
    check_same_shapes(a, b)?;
    let mut worst = (0.0, String::new());
    for ((name, x), y) in a.named_tensors().into_iter().zip(b.tensors()) {
        for (&u, &v) in x.as_slice().iter().zip(y.as_slice()) {
            let e = relative_error(u, v);
            if e > worst.0 {
                worst = (e, name.clone());
            }
        }
    }
    Ok(worst)
}
