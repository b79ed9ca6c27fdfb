//! Dense linear algebra, stable elementwise transforms, seeded randomness,
//! and the central-difference gradient oracle used to verify every analytic
//! gradient in this crate.
//!
//! Everything is double precision. Desk-scale dimensions only (hidden widths
//! below ~100, batches below ~1000), so plain loops beat any BLAS binding.

use rand::distr::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self (m×k) · other (k×n)`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} . {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
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

    /// `self^T (k×m) · other (k×n)`, without materializing the transpose.
    pub fn transposed_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Dimension(format!(
                "transposed_matmul {}x{} . {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self (m×k) · other^T (n×k)`.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "matmul_transposed {}x{} . {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension("add_scaled shape mismatch".into()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(self.row(i)) {
                *s += v;
            }
        }
        sums
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four independent accumulator lanes so the reduction vectorizes
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Numerically stable softmax via max subtraction. Entries are clamped to
/// the smallest positive normal so the output stays strictly positive even
/// when `exp` underflows; the perturbation is ~2e-308 per entry, far inside
/// every stated tolerance.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Dimension("softmax of empty vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v = (*v / sum).max(f64::MIN_POSITIVE);
    }
    Ok(out)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = softmax(logits.row(i))?;
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}

/// `log(sum_i exp(x_i))`, stabilized.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub const NORM_EPS: f64 = 1e-12;

/// Scale `v` to unit Euclidean norm. Near-zero vectors are rejected.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm2(v);
    if n <= NORM_EPS {
        return Err(Error::Degenerate(format!("l2_normalize of norm {n}")));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

/// Central finite differences of a scalar function over a matrix argument:
/// `(f(x + h e) - f(x - h e)) / 2h` per entry.
pub fn finite_diff_grad<F>(mut f: F, at: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    let mut point = at.clone();
    for idx in 0..at.data().len() {
        let orig = point.data()[idx];
        point.data_mut()[idx] = orig + h;
        let plus = f(&point)?;
        point.data_mut()[idx] = orig - h;
        let minus = f(&point)?;
        point.data_mut()[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad: f returned {plus} / {minus} at entry {idx}"
            )));
        }
        grad.data_mut()[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Default step for [`finite_diff_grad`].
pub const FD_STEP: f64 = 1e-5;

/// Relative error between an analytic and a numeric value, guarding tiny
/// denominators with an absolute floor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Max relative error over entries whose analytic magnitude exceeds `floor`.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        if a.abs() > floor {
            worst = worst.max(relative_error(a, n));
        }
    }
    worst
}

/// Seeded, forkable random stream. Identical seed and call sequence always
/// produce the identical value sequence, on every platform.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream position in 32-bit words consumed.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Derive an independent substream. Does not advance `self`, so forks
    /// taken at construction time are stable no matter how the parent is
    /// used afterwards.
    pub fn fork(&self, salt: u64) -> RngState {
        RngState::new(splitmix64(self.seed ^ splitmix64(salt)))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.rng.sample(Uniform::new(0, n).expect("nonempty range"))
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2_case() {
        let p = softmax(&[2.0_f64.ln(), 0.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.25).abs() < 1e-15);
        assert!((p[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        let mut rng = RngState::new(7);
        let logits: Vec<f64> = (0..6).map(|_| rng.normal() * 3.0).collect();
        // naive exponentiation oracle, no stabilization
        let exps: Vec<f64> = logits.iter().map(|&x| x.exp()).collect();
        let sum: f64 = exps.iter().sum();
        let stable = softmax(&logits).unwrap();
        for (s, e) in stable.iter().zip(&exps) {
            assert!((s - e / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_is_dimension_error() {
        assert!(matches!(softmax(&[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn l2_normalize_345_triangle() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert_eq!(v, vec![0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_rejects_near_zero() {
        assert!(matches!(l2_normalize(&[0.0, 1e-13]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn l2_normalize_random_has_unit_norm() {
        let mut rng = RngState::new(3);
        let v: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let n = l2_normalize(&v).unwrap();
        assert!((norm2(&n) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_of_squared_norm() {
        let at = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let grad = finite_diff_grad(|m| Ok(dot(m.data(), m.data())), &at, FD_STEP).unwrap();
        assert!((grad.get(0, 0) - 2.0).abs() < 1e-8);
        assert!((grad.get(0, 1) - 4.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let at = Matrix::zeros(2, 3);
        let grad = finite_diff_grad(|_| Ok(5.0), &at, FD_STEP).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_propagates_non_finite() {
        let at = Matrix::zeros(1, 1);
        let res = finite_diff_grad(|_| Ok(f64::NAN), &at, FD_STEP);
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn finite_diff_matches_quadratic_form_gradient() {
        // f(x) = x^T A x has gradient (A + A^T) x.
        let mut rng = RngState::new(11);
        let n = 4;
        let a = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.normal()).collect()).unwrap();
        let x = Matrix::from_vec(n, 1, (0..n).map(|_| rng.normal()).collect()).unwrap();
        let f = |m: &Matrix| {
            let ax = a.matmul(m)?;
            Ok(dot(m.data(), ax.data()))
        };
        let grad = finite_diff_grad(f, &x, FD_STEP).unwrap();
        for i in 0..n {
            let mut expect = 0.0;
            for j in 0..n {
                expect += (a.get(i, j) + a.get(j, i)) * x.get(j, 0);
            }
            assert!(relative_error(expect, grad.get(i, 0)) < 1e-6);
        }
    }

    #[test]
    fn rng_same_seed_same_stream() {
        let mut a = RngState::new(99);
        let mut b = RngState::new(99);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
            assert_eq!(a.index(17), b.index(17));
        }
    }

    #[test]
    fn rng_forks_are_independent_of_parent_position() {
        let parent = RngState::new(5);
        let mut early = parent.fork(1);
        let mut consumed = RngState::new(5);
        for _ in 0..10 {
            consumed.uniform();
        }
        let mut late = consumed.fork(1);
        for _ in 0..20 {
            assert_eq!(early.uniform().to_bits(), late.uniform().to_bits());
        }
    }

    #[test]
    fn matmul_small_known() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_variants_agree_with_matmul() {
        let mut rng = RngState::new(21);
        let a = Matrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let b = Matrix::from_vec(4, 5, (0..20).map(|_| rng.normal()).collect()).unwrap();
        let atb = a.transposed_matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut expect = 0.0;
                for r in 0..4 {
                    expect += a.get(r, i) * b.get(r, j);
                }
                assert!((atb.get(i, j) - expect).abs() < 1e-12);
            }
        }
        let c = Matrix::from_vec(5, 3, (0..15).map(|_| rng.normal()).collect()).unwrap();
        let act = a.matmul_transposed(&c).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                assert!((act.get(i, j) - dot(a.row(i), c.row(j))).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(xs in proptest::collection::vec(-500.0..500.0f64, 1..12), c in -100.0..100.0f64) {
            let shifted: Vec<f64> = xs.iter().map(|&x| x + c).collect();
            let p = softmax(&xs).unwrap();
            let q = softmax(&shifted).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!(*a > 0.0 && *a <= 1.0);
            }
        }

        #[test]
        fn l2_normalize_idempotent(xs in proptest::collection::vec(-10.0..10.0f64, 1..10)) {
            prop_assume!(norm2(&xs) > 1e-6);
            let once = l2_normalize(&xs).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
