//! Dense row-major matrices and the seeded random source.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Name of the generator backing [`SeededRng`], recorded in run reports.
pub const RNG_ALGORITHM: &str = "chacha8";

/// Batch-first dense matrix (`rows x cols`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// Single-row matrix.
    pub fn row_vector(values: Vec<T>) -> Result<Self> {
        let n = values.len();
        Self::from_vec(1, n, values)
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard product `self * rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = Self::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &rhs.data,
            n as isize,
            1,
            T::zero(),
            &mut out.data,
            n as isize,
            1,
        );
        Ok(out)
    }

    /// `selfᵀ * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::shape("t_matmul", self.shape(), rhs.shape()));
        }
        let (m, k, n) = (self.cols, self.rows, rhs.cols);
        let mut out = Self::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            1,
            self.cols as isize,
            &rhs.data,
            n as isize,
            1,
            T::zero(),
            &mut out.data,
            n as isize,
            1,
        );
        Ok(out)
    }

    /// `self * rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::shape("matmul_t", self.shape(), rhs.shape()));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.rows);
        let mut out = Self::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            &rhs.data,
            1,
            rhs.cols as isize,
            T::zero(),
            &mut out.data,
            n as isize,
            1,
        );
        Ok(out)
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

    pub fn elementwise(&self, rhs: &Self, op: ElementwiseOp) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("elementwise", self.shape(), rhs.shape()));
        }
        let f = match op {
            ElementwiseOp::Add => |a: T, b: T| a + b,
            ElementwiseOp::Sub => |a: T, b: T| a - b,
            ElementwiseOp::Mul => |a: T, b: T| a * b,
        };
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.elementwise(rhs, ElementwiseOp::Add)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.elementwise(rhs, ElementwiseOp::Sub)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.elementwise(rhs, ElementwiseOp::Mul)
    }

    pub fn add_assign(&mut self, rhs: &Self) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("add_assign", self.shape(), rhs.shape()));
        }
        self.data.iter_mut().zip(&rhs.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_broadcast(&mut self, bias: &[T]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape("add_row_broadcast", self.shape(), (1, bias.len())));
        }
        for row in self.data.chunks_exact_mut(self.cols) {
            row.iter_mut().zip(bias).for_each(|(a, &b)| *a += b);
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<T> {
        let mut sums = vec![T::zero(); self.cols];
        for row in self.data.chunks_exact(self.cols) {
            sums.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
        }
        sums
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("cannot gather zero rows".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec(indices.len(), self.cols, data)
    }

    /// Index of the largest entry per row; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Bitwise equality of shape and every entry.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.bits() == b.bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Seeded, platform-stable random source.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and a label.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<U>(&mut self, items: &mut [U]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// Matrix with i.i.d. entries drawn uniformly from `[lo, hi)`.
pub fn draw_uniform<T: Scalar>(
    rng: &mut SeededRng,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> Result<Matrix<T>> {
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(Error::InvalidArgument(format!(
            "uniform bounds require lo < hi, got [{lo}, {hi})"
        )));
    }
    let data = (0..rows * cols).map(|_| T::lit(rng.uniform(lo, hi))).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Matrix with i.i.d. `N(0, std^2)` entries.
pub fn draw_normal<T: Scalar>(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Result<Matrix<T>> {
    let data = (0..rows * cols).map(|_| T::lit(std * rng.normal())).collect();
    Matrix::from_vec(rows, cols, data)
}
