//! Dense matrix/vector arithmetic, elementwise nonlinearities, seeded
//! randomness, and a finite-difference gradient probe.
//!
//! Everything is 64-bit: the gradient checks used throughout the test
//! suites run at 1e-4 relative tolerance, which 32-bit floats cannot hold.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major 2-D array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from row-major data. Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Row `r` as a contiguous slice.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: format!("{}x{}", self.rows, self.cols),
                rhs: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += s * v` elementwise.
#[inline]
pub fn axpy(out: &mut [f64], s: f64, v: &[f64]) {
    debug_assert_eq!(out.len(), v.len());
    for (o, &x) in out.iter_mut().zip(v) {
        *o += s * x;
    }
}

/// Softmax with max-subtraction so large logits do not overflow.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of empty vector".into()));
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    Ok(out)
}

/// Fused log-softmax: `x - max - ln(sum(exp(x - max)))`.
///
/// Taking `ln(softmax(x))` directly underflows to `-inf` for confident
/// logits; the policy-gradient path needs the fused form.
pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("log_softmax of empty vector".into()));
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    Ok(v.iter().map(|&x| x - m - log_sum).collect())
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// Derivative of relu at the pre-activation; the kink at 0 is defined as 0.
pub fn relu_deriv(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect()
}

pub fn tanh(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.tanh()).collect()
}

pub fn tanh_deriv(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let t = x.tanh();
            1.0 - t * t
        })
        .collect()
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| sigmoid_scalar(x)).collect()
}

pub fn sigmoid_deriv(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let s = sigmoid_scalar(x);
            s * (1.0 - s)
        })
        .collect()
}

/// Central-difference gradient of a scalar function of a flat parameter
/// vector: `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per coordinate.
///
/// This is the independent oracle every analytic backward kernel is
/// checked against.
pub fn fd_gradient<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(eps > 0.0, "fd_gradient requires eps > 0");
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite function value at coordinate {i}: f+={plus}, f-={minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Deterministic counter-based random stream (SplitMix64 core).
///
/// Identical `(seed, stream_id)` pairs yield identical draw sequences on
/// every platform, and `derive` splits off statistically independent child
/// streams so parallel child trainings stay reproducible.
#[derive(Debug, Clone)]
pub struct RngStream {
    state: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream {
            state: mix64(seed ^ GOLDEN).wrapping_add(mix64(stream_id).wrapping_mul(GOLDEN)),
        }
    }

    /// Child stream labelled `label`; independent of draws taken so far.
    pub fn derive(&self, label: u64) -> RngStream {
        RngStream {
            state: mix64(self.state ^ mix64(label.wrapping_add(GOLDEN))),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = (1.0 - self.next_f64()).max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Samples an index from a probability vector.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.next_f64();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn matmul_identity() {
        let mut rng = RngStream::new(7, 0);
        let m = Tensor::from_vec(3, 3, (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let out = Tensor::eye(3).matmul(&m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(2, 1, vec![1.0, 1.0]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = RngStream::new(11, 3);
        let a = Tensor::from_vec(5, 7, (0..35).map(|_| rng.uniform(-2.0, 2.0)).collect());
        let b = Tensor::from_vec(7, 3, (0..21).map(|_| rng.uniform(-2.0, 2.0)).collect());
        let fast = a.matmul(&b).unwrap();
        // independent triple-loop oracle
        let mut naive = Tensor::zeros(5, 3);
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.get(i, k) * b.get(k, j);
                }
                naive.set(i, j, s);
            }
        }
        for (x, y) in fast.data().iter().zip(naive.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
    }

    #[test]
    fn matmul_associative_on_random_triples() {
        let mut rng = RngStream::new(42, 1);
        for _ in 0..20 {
            let a = Tensor::from_vec(4, 5, (0..20).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let b = Tensor::from_vec(5, 3, (0..15).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let c = Tensor::from_vec(3, 6, (0..18).map(|_| rng.uniform(-1.0, 1.0)).collect());
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!(rel_err(*x, *y) < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for &x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p[0] > 0.999_999);
        assert!(p[1] < 1e-6);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_is_probability_vector() {
        let mut rng = RngStream::new(5, 5);
        for _ in 0..50 {
            let v: Vec<f64> = (0..6).map(|_| rng.uniform(-8.0, 8.0)).collect();
            let p = softmax(&v).unwrap();
            assert!(p.iter().all(|&x| x > 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let v = [0.3, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 17.5).collect();
        let a = softmax(&v).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let v = [0.1, -0.4, 1.3];
        let ls = log_softmax(&v).unwrap();
        let s = softmax(&v).unwrap();
        for (l, p) in ls.iter().zip(&s) {
            assert!((l - p.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu_deriv(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(&[0.0])[0], 0.5);
    }

    #[test]
    fn tanh_deriv_matches_finite_difference() {
        let mut rng = RngStream::new(3, 9);
        let x: Vec<f64> = (0..8).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let analytic = tanh_deriv(&x);
        for (i, &xi) in x.iter().enumerate() {
            let g = fd_gradient(|v| v[0].tanh(), &[xi], 1e-6).unwrap()[0];
            assert!(
                (analytic[i] - g).abs() < 1e-7,
                "coord {i}: {} vs {}",
                analytic[i],
                g
            );
        }
    }

    #[test]
    fn fd_gradient_quadratic() {
        let g = fd_gradient(|v| v.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn fd_gradient_constant_is_zero() {
        let g = fd_gradient(|_| 3.5, &[0.1, -0.2, 0.7], 1e-5).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fd_gradient_rejects_non_finite() {
        assert!(fd_gradient(|v| (-v[0]).sqrt(), &[0.5], 1e-5).is_err());
    }

    #[test]
    fn rng_reproducible_across_runs() {
        let mut a = RngStream::new(123, 45);
        let mut b = RngStream::new(123, 45);
        let xs: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn rng_streams_differ() {
        let mut a = RngStream::new(123, 0);
        let mut b = RngStream::new(123, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn derived_streams_are_stable() {
        let root = RngStream::new(9, 0);
        let mut c1 = root.derive(4);
        let mut c2 = root.derive(4);
        assert_eq!(c1.next_u64(), c2.next_u64());
        let mut other = root.derive(5);
        assert_ne!(c1.next_u64(), other.next_u64());
    }

    #[test]
    fn categorical_respects_point_mass() {
        let mut rng = RngStream::new(1, 1);
        for _ in 0..100 {
            assert_eq!(rng.categorical(&[0.0, 1.0, 0.0]), 1);
        }
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut rng = RngStream::new(2, 2);
        for _ in 0..1000 {
            let x = rng.uniform(-0.08, 0.08);
            assert!((-0.08..0.08).contains(&x));
        }
    }
}
