//! Dense numerical substrate: row-major matrices, seeded RNG streams and the
//! Gaussian special functions used by moment matching.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise square, used to carry weights onto variances.
    pub fn squared(&self) -> Self {
        self.map(|x| x * x)
    }

    /// `self * diag(scale)`: multiplies column `c` by `scale[c]`.
    pub fn scale_columns(&self, scale: &[f64]) -> Result<Self> {
        if scale.len() != self.cols {
            return Err(Error::shape(format!(
                "column scale of length {} for {} columns",
                scale.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (x, s) in out.row_mut(r).iter_mut().zip(scale) {
                *x *= s;
            }
        }
        Ok(out)
    }

    /// `self · other`. Zero entries of `self` are skipped, which makes sparse
    /// bag-of-words feature matrices cheap.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), dst);
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, the shape used when `other` is a weight matrix stored
    /// as (out × in) and `self` holds one input vector per row.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        self.matmul(&other.transpose())
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(format!(
                "t_matmul ({}x{})ᵀ by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let src = other.row(r);
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, src, &mut out.data[k * other.cols..(k + 1) * other.cols]);
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias[c]` to every entry of column `c`.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape(format!(
                "bias of length {} for {} columns",
                bias.len(),
                self.cols
            )));
        }
        for r in 0..self.rows {
            for (x, b) in self.row_mut(r).iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, x) in sums.iter_mut().zip(self.row(r)) {
                *s += x;
            }
        }
        sums
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Seeded random stream. The same `(seed, stream_id)` pair always yields the
/// same sequence; distinct stream ids select independent ChaCha streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF Φ(x).
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density φ(x).
pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// One draw from N(mean, variance). Zero variance returns `mean` exactly.
pub fn sample_gaussian(rng: &mut RngStream, mean: f64, variance: f64) -> Result<f64> {
    if !(variance >= 0.0) {
        return Err(Error::arg(format!("negative variance {variance}")));
    }
    if variance == 0.0 {
        return Ok(mean);
    }
    Ok(mean + variance.sqrt() * rng.standard_normal())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rejects_wrong_length() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 3.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![4.0, 5.0], vec![6.0, 7.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[16.0, 19.0, 18.0, 21.0]);
        assert_eq!(a.matmul_t(&b).unwrap(), a.matmul(&b.transpose()).unwrap());
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
        assert!(a.matmul(&DenseMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..20 {
            let mut rand5 = || DenseMatrix::from_fn(5, 5, |_, _| rng.standard_normal());
            let (a, b, c) = (rand5(), rand5(), rand5());
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                assert!((l - r).abs() <= 1e-10 * l.abs().max(r.abs()).max(1.0));
            }
        }
    }

    #[test]
    fn cdf_reference_points() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert_abs_diff_eq!(std_normal_cdf(1.96), 0.97500, epsilon = 1e-5);
        assert!(std_normal_cdf(-8.0) < 1e-14);
        assert!(std_normal_cdf(-8.0) > 0.0);
        assert_eq!(std_normal_cdf(40.0), 1.0);
        assert_eq!(std_normal_cdf(-40.0), 0.0);
        for i in -80..80 {
            let x = i as f64 / 10.0;
            assert_abs_diff_eq!(std_normal_cdf(x) + std_normal_cdf(-x), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn pdf_reference_points() {
        assert_abs_diff_eq!(std_normal_pdf(0.0), 0.398_942_3, epsilon = 1e-7);
        assert_eq!(std_normal_pdf(3.0), std_normal_pdf(-3.0));
        assert!(std_normal_pdf(40.0) < 1e-300);
    }

    #[test]
    fn gaussian_zero_variance_and_errors() {
        let mut rng = RngStream::new(1, 2);
        assert_eq!(sample_gaussian(&mut rng, 5.0, 0.0).unwrap(), 5.0);
        assert!(sample_gaussian(&mut rng, 0.0, -1.0).is_err());
        assert!(sample_gaussian(&mut rng, 0.0, f64::NAN).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let draw = |seed, stream| {
            let mut r = RngStream::new(seed, stream);
            (0..8).map(|_| r.standard_normal()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3, 4), draw(3, 4));
        assert_ne!(draw(3, 4), draw(3, 5));
        assert_ne!(draw(3, 4), draw(4, 4));
    }

    #[test]
    fn gaussian_sample_moments() {
        let mut rng = RngStream::new(11, 0);
        let n = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let x = sample_gaussian(&mut rng, 0.0, 1.0).unwrap();
            sum += x;
            sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }
}
