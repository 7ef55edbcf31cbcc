//! Dense linear algebra, softmax, Adam, Gumbel noise and a finite-difference
//! gradient oracle.
//!
//! Tensors are stored in 32-bit floats. Every routine is generic over
//! [`Real`] so that gradient checks can re-run the very same code in 64-bit.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Floating point scalar the networks can be instantiated with.
pub trait Real:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    fn from_f32(v: f32) -> Self {
        Self::from_f64(v as f64)
    }

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn relu(self) -> Self {
        if self > Self::ZERO {
            self
        } else {
            Self::ZERO
        }
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn exp(self) -> Self {
        libm::expf(self)
    }
    fn ln(self) -> Self {
        libm::logf(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrtf(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(
                Dimension,
                "{} values cannot fill a {}x{} matrix",
                data.len(),
                rows,
                cols
            );
        }
        Ok(Self { rows, cols, data })
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn random(rows: usize, cols: usize, scale: f64, rng: &mut crate::Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::from_f64(rng.gen_range(-scale..=scale)))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// `y = W x`, with `x.len() == cols`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `y = Wᵀ x`, with `x.len() == rows`.
    pub fn matvec_t(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![T::ZERO; self.cols];
        for (row, &xr) in self.data.chunks_exact(self.cols).zip(x) {
            if xr == T::ZERO {
                continue;
            }
            axpy(xr, row, &mut out);
        }
        out
    }

    /// `W += scale · a bᵀ`, with `a.len() == rows`, `b.len() == cols`.
    pub fn add_outer(&mut self, a: &[T], b: &[T], scale: T) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (row, &ar) in self.data.chunks_exact_mut(self.cols).zip(a) {
            let s = ar * scale;
            if s == T::ZERO {
                continue;
            }
            axpy(s, b, row);
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Inner product, accumulated in 8 independent lanes so the loop vectorises.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::ZERO; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] += xa[i] * xb[i];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// `y += alpha · x`
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn reduce_lanes(l: &[f32; 8]) -> f32 {
    ((l[0] + l[4]) + (l[1] + l[5])) + ((l[2] + l[6]) + (l[3] + l[7]))
}

/// Squared euclidean distance, accumulated in 8 independent lanes so the
/// loop vectorises.
pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    squared_l2_bounded(a, b, f32::INFINITY).expect("unbounded")
}

/// [`squared_l2`], abandoned with `None` as soon as a partial sum exceeds
/// `bound`. Partial sums use the same lanes and reduction order as the full
/// sum, and rounding is monotone, so `None` implies the distance is above
/// `bound`; a returned value is bit-identical to [`squared_l2`].
#[inline]
pub fn squared_l2_bounded(a: &[f32], b: &[f32], bound: f32) -> Option<f32> {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    let mut n = 0usize;
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            let d = xa[i] - xb[i];
            lanes[i] += d * d;
        }
        n += 1;
        if n % 2 == 0 && reduce_lanes(&lanes) > bound {
            return None;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    let s = reduce_lanes(&lanes) + tail;
    (s <= bound).then_some(s)
}

fn check_logits<T: Real>(logits: &[T]) -> Result<()> {
    if logits.is_empty() {
        bail!(Dimension, "softmax of an empty vector");
    }
    if logits.iter().any(|v| !v.is_finite()) {
        bail!(Numeric, "softmax input contains NaN or infinity");
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    check_logits(logits)?;
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(logits[0], T::max);
    let mut out: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total = out.iter().fold(T::ZERO, |a, &b| a + b);
    for v in &mut out {
        *v = *v / total;
    }
    out
}

pub fn log_softmax<T: Real>(logits: &[T]) -> Result<Vec<T>> {
    check_logits(logits)?;
    Ok(log_softmax_unchecked(logits))
}

pub(crate) fn log_softmax_unchecked<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(logits[0], T::max);
    let total = logits
        .iter()
        .fold(T::ZERO, |acc, &v| acc + (v - max).exp());
    let log_z = max + total.ln();
    logits.iter().map(|&v| v - log_z).collect()
}

/// Backprop through `p = softmax(z)`: given `dL/dp`, returns `dL/dz`.
pub fn softmax_backward<T: Real>(p: &[T], grad_p: &[T]) -> Vec<T> {
    let inner = dot(p, grad_p);
    p.iter()
        .zip(grad_p)
        .map(|(&pi, &gi)| pi * (gi - inner))
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Adam moments and hyper-parameters for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || state.v.len() != state.m.len() {
        bail!(
            Dimension,
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        );
    }
    if state.lr < 0.0 {
        bail!(Parameter, "adam learning rate must be >= 0, got {}", state.lr);
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - libm::pow(state.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(state.beta2, t as f64);
    for i in 0..params.len() {
        let g = grads[i].to_f64();
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let step = state.lr * m_hat / (libm::sqrt(v_hat) + state.eps);
        if step != 0.0 {
            params[i] = T::from_f64(params[i].to_f64() - step);
        }
    }
    Ok(())
}

/// Adam over a fixed list of parameter tensors sharing one step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(shapes: &[usize], lr: f64) -> Self {
        Self {
            states: shapes.iter().map(|&n| AdamState::new(n, lr)).collect(),
        }
    }

    pub fn step<T: Real>(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            bail!(
                Dimension,
                "adam tracks {} tensors, got {} params and {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            );
        }
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(p, g, s)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }
}

const GUMBEL_U_MIN: f64 = 1e-10;

/// A Gumbel(0, 1) draw kept together with the uniform it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelSample {
    pub u: f64,
    pub g: f64,
}

impl GumbelSample {
    /// `g = -ln(-ln u)` with `u` clamped to `[1e-10, 1 - 1e-10]`.
    pub fn from_uniform(u: f64) -> Self {
        let u = u.clamp(GUMBEL_U_MIN, 1.0 - GUMBEL_U_MIN);
        Self {
            u,
            g: -libm::log(-libm::log(u)),
        }
    }

    pub fn zero() -> Self {
        // u = exp(-1) gives g = 0
        Self {
            u: libm::exp(-1.0),
            g: 0.0,
        }
    }

    pub fn draw(rng: &mut crate::Rng) -> Self {
        Self::from_uniform(rng.gen::<f64>())
    }
}

/// `softmax((log_probs + g) / tau)`.
pub fn gumbel_softmax<T: Real>(log_probs: &[T], tau: f64, noise: &[GumbelSample]) -> Result<Vec<T>> {
    if !(tau > 0.0) {
        bail!(Parameter, "gumbel-softmax temperature must be > 0, got {tau}");
    }
    if noise.len() != log_probs.len() {
        bail!(
            Dimension,
            "{} log-probs but {} gumbel draws",
            log_probs.len(),
            noise.len()
        );
    }
    let tau = T::from_f64(tau);
    let z: Vec<T> = log_probs
        .iter()
        .zip(noise)
        .map(|(&lp, n)| (lp + T::from_f64(n.g)) / tau)
        .collect();
    softmax(&z)
}

/// Central-difference gradient of `loss` at `params`.
///
/// `loss` must be deterministic: any randomness it uses has to be frozen by
/// the caller, otherwise the estimate is meaningless.
pub fn finite_diff_grad<F>(mut loss: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        bail!(Parameter, "finite-difference step must be > 0, got {eps}");
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = loss(&p);
        p[i] = orig - eps;
        let down = loss(&p);
        p[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest per-coordinate relative error between two gradients.
///
/// Coordinates where both entries are below `floor` in magnitude are compared
/// against `floor` instead, so exact zeros on both sides count as agreement.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
