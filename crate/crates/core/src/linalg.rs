//! Dense linear algebra for the small fixed dimensions used by the model.
//!
//! Per-study objects (means, covariances and their derivatives) are 2×2 and
//! use [`Mat2`], which is `Copy` and evaluated in closed form. Parameter-space
//! objects (information matrices, `S`) are at most 8×8 and use
//! [`SmallMatrix`], backed by a fixed-capacity array and LU with partial
//! pivoting.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use thiserror::Error;

/// Largest supported row or column count for [`SmallMatrix`].
pub const MAX_DIM: usize = 8;

/// Determinants with magnitude below this are treated as singular.
pub const SINGULAR_DET: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is singular (determinant {det:e})")]
    Singular { det: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dimension {rows}x{cols} exceeds the {MAX_DIM}x{MAX_DIM} capacity")]
    TooLarge { rows: usize, cols: usize },
    #[error("matrix contains a non-finite entry")]
    NonFinite,
}

/// 2-vector.
pub type Vec2 = [f64; 2];

#[inline]
pub fn dot2(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn sub2(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

/// 2×2 matrix stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Mat2 {
    pub m: [[f64; 2]; 2],
}

impl Mat2 {
    pub const ZERO: Mat2 = Mat2 { m: [[0.0; 2]; 2] };
    pub const IDENTITY: Mat2 = Mat2 {
        m: [[1.0, 0.0], [0.0, 1.0]],
    };

    #[inline]
    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2 { m: [[a, b], [c, d]] }
    }

    #[inline]
    pub const fn diag(a: f64, d: f64) -> Self {
        Mat2::new(a, 0.0, 0.0, d)
    }

    #[inline]
    pub fn sym(a: f64, b: f64, d: f64) -> Self {
        Mat2::new(a, b, b, d)
    }

    #[inline]
    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    #[inline]
    pub fn trace(&self) -> f64 {
        self.m[0][0] + self.m[1][1]
    }

    pub fn inverse(&self) -> Result<Mat2, LinalgError> {
        let det = self.det();
        if !det.is_finite() || det.abs() <= SINGULAR_DET {
            return Err(LinalgError::Singular { det });
        }
        let [[a, b], [c, d]] = self.m;
        Ok(Mat2::new(d / det, -b / det, -c / det, a / det))
    }

    #[inline]
    pub fn transpose(&self) -> Mat2 {
        Mat2::new(self.m[0][0], self.m[1][0], self.m[0][1], self.m[1][1])
    }

    #[inline]
    pub fn scale(&self, s: f64) -> Mat2 {
        Mat2::new(
            self.m[0][0] * s,
            self.m[0][1] * s,
            self.m[1][0] * s,
            self.m[1][1] * s,
        )
    }

    #[inline]
    pub fn mul_vec(&self, v: Vec2) -> Vec2 {
        [
            self.m[0][0] * v[0] + self.m[0][1] * v[1],
            self.m[1][0] * v[0] + self.m[1][1] * v[1],
        ]
    }

    /// `aᵀ M b`.
    #[inline]
    pub fn bilinear(&self, a: Vec2, b: Vec2) -> f64 {
        dot2(a, self.mul_vec(b))
    }

    /// `trace(self · other)` without forming the product.
    #[inline]
    pub fn trace_mul(&self, other: &Mat2) -> f64 {
        self.m[0][0] * other.m[0][0]
            + self.m[0][1] * other.m[1][0]
            + self.m[1][0] * other.m[0][1]
            + self.m[1][1] * other.m[1][1]
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|x| x.is_finite())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (self.m[0][1] - self.m[1][0]).abs() <= tol
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    #[inline]
    fn add(self, o: Mat2) -> Mat2 {
        Mat2::new(
            self.m[0][0] + o.m[0][0],
            self.m[0][1] + o.m[0][1],
            self.m[1][0] + o.m[1][0],
            self.m[1][1] + o.m[1][1],
        )
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    #[inline]
    fn sub(self, o: Mat2) -> Mat2 {
        Mat2::new(
            self.m[0][0] - o.m[0][0],
            self.m[0][1] - o.m[0][1],
            self.m[1][0] - o.m[1][0],
            self.m[1][1] - o.m[1][1],
        )
    }
}

impl Neg for Mat2 {
    type Output = Mat2;
    #[inline]
    fn neg(self) -> Mat2 {
        self.scale(-1.0)
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    #[inline]
    fn mul(self, o: Mat2) -> Mat2 {
        let a = &self.m;
        let b = &o.m;
        Mat2::new(
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        )
    }
}

/// Trace of a left-to-right product of 2×2 factors.
pub fn trace_chain2(factors: &[&Mat2]) -> f64 {
    match factors.len() {
        0 => 2.0,
        1 => factors[0].trace(),
        n => {
            let head = factors[..n - 1]
                .iter()
                .fold(Mat2::IDENTITY, |acc, f| acc * **f);
            head.trace_mul(factors[n - 1])
        }
    }
}

/// Dense row-major matrix with at most [`MAX_DIM`] rows and columns.
#[derive(Clone, Copy, PartialEq)]
pub struct SmallMatrix {
    rows: usize,
    cols: usize,
    data: [f64; MAX_DIM * MAX_DIM],
}

impl SmallMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self, LinalgError> {
        if rows > MAX_DIM || cols > MAX_DIM {
            return Err(LinalgError::TooLarge { rows, cols });
        }
        Ok(SmallMatrix {
            rows,
            cols,
            data: [0.0; MAX_DIM * MAX_DIM],
        })
    }

    /// Square zero matrix. Panics if `n > MAX_DIM`.
    pub fn square(n: usize) -> Self {
        Self::zeros(n, n).expect("dimension within capacity")
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::square(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::square(d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    /// Builds from rows; all rows must share a length and entries must be finite.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.as_ref().len());
        let mut m = Self::zeros(r, c)?;
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != c {
                return Err(LinalgError::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            for (j, &x) in row.iter().enumerate() {
                if !x.is_finite() {
                    return Err(LinalgError::NonFinite);
                }
                m[(i, j)] = x;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * MAX_DIM..i * MAX_DIM + self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        (0..self.rows).all(|i| self.row(i).iter().all(|x| x.is_finite()))
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows).expect("same capacity");
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrize(&self) -> Self {
        debug_assert!(self.is_square());
        let mut s = *self;
        for i in 0..self.rows {
            for j in 0..i {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = avg;
                s[(j, i)] = avg;
            }
        }
        s
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = *self;
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] *= s;
            }
        }
        out
    }

    pub fn matmul(&self, other: &SmallMatrix) -> Result<SmallMatrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols)?;
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Copy with row and column `k` removed.
    pub fn without(&self, k: usize) -> SmallMatrix {
        debug_assert!(self.is_square() && k < self.rows);
        let n = self.rows - 1;
        let mut out = Self::square(n);
        for (oi, i) in (0..self.rows).filter(|&i| i != k).enumerate() {
            for (oj, j) in (0..self.cols).filter(|&j| j != k).enumerate() {
                out[(oi, oj)] = self[(i, j)];
            }
        }
        out
    }

    /// LU factorization with partial pivoting. Returns the packed factors,
    /// the row permutation and the permutation sign.
    fn lu(&self) -> Result<(SmallMatrix, [usize; MAX_DIM], f64), LinalgError> {
        if !self.is_square() {
            return Err(LinalgError::DimensionMismatch(format!(
                "LU of non-square {}x{} matrix",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let mut a = *self;
        let mut perm = [0usize; MAX_DIM];
        for (i, p) in perm.iter_mut().enumerate().take(n) {
            *p = i;
        }
        let mut sign = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| a[(x, col)].abs().total_cmp(&a[(y, col)].abs()))
                .expect("nonempty range");
            if a[(pivot, col)] == 0.0 {
                // exact zero column below the diagonal: determinant is zero
                return Ok((a, perm, 0.0));
            }
            if pivot != col {
                for j in 0..n {
                    let tmp = a[(col, j)];
                    a[(col, j)] = a[(pivot, j)];
                    a[(pivot, j)] = tmp;
                }
                perm.swap(col, pivot);
                sign = -sign;
            }
            let d = a[(col, col)];
            for r in col + 1..n {
                let factor = a[(r, col)] / d;
                a[(r, col)] = factor;
                for j in col + 1..n {
                    a[(r, j)] -= factor * a[(col, j)];
                }
            }
        }
        Ok((a, perm, sign))
    }

    pub fn det(&self) -> Result<f64, LinalgError> {
        let (lu, _, sign) = self.lu()?;
        if sign == 0.0 {
            return Ok(0.0);
        }
        Ok((0..self.rows).fold(sign, |acc, i| acc * lu[(i, i)]))
    }

    pub fn inverse(&self) -> Result<SmallMatrix, LinalgError> {
        let (lu, perm, sign) = self.lu()?;
        let n = self.rows;
        let det = if sign == 0.0 {
            0.0
        } else {
            (0..n).fold(sign, |acc, i| acc * lu[(i, i)])
        };
        if !det.is_finite() || det.abs() <= SINGULAR_DET {
            return Err(LinalgError::Singular { det });
        }
        let mut inv = Self::square(n);
        for c in 0..n {
            let mut x = [0.0; MAX_DIM];
            for i in 0..n {
                let mut s = if perm[i] == c { 1.0 } else { 0.0 };
                for k in 0..i {
                    s -= lu[(i, k)] * x[k];
                }
                x[i] = s;
            }
            for i in (0..n).rev() {
                let mut s = x[i];
                for k in i + 1..n {
                    s -= lu[(i, k)] * x[k];
                }
                x[i] = s / lu[(i, i)];
            }
            for i in 0..n {
                inv[(i, c)] = x[i];
            }
        }
        Ok(inv)
    }

    /// Solves `self · x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if b.len() != self.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "right-hand side of length {} for {}x{} system",
                b.len(),
                self.rows,
                self.cols
            )));
        }
        self.inverse()?.mul_vec(b)
    }
}

impl Index<(usize, usize)> for SmallMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * MAX_DIM + j]
    }
}

impl IndexMut<(usize, usize)> for SmallMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * MAX_DIM + j]
    }
}

impl fmt::Debug for SmallMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries((0..self.rows).map(|i| self.row(i)))
            .finish()
    }
}

/// Trace of the left-to-right product `a · b · …`. The last factor is never
/// materialized into the product.
pub fn trace_prod(factors: &[&SmallMatrix]) -> Result<f64, LinalgError> {
    let Some((last, init)) = factors.split_last() else {
        return Err(LinalgError::DimensionMismatch("empty product".into()));
    };
    let head = match init.split_first() {
        None => **last,
        Some((first, rest)) => {
            let mut acc = **first;
            for f in rest {
                acc = acc.matmul(f)?;
            }
            acc
        }
    };
    if init.is_empty() {
        if !head.is_square() {
            return Err(LinalgError::DimensionMismatch("trace of non-square".into()));
        }
        return Ok(head.diagonal().iter().sum());
    }
    if head.cols != last.rows || head.rows != last.cols {
        return Err(LinalgError::DimensionMismatch(format!(
            "chain ends {}x{} against {}x{}",
            head.rows, head.cols, last.rows, last.cols
        )));
    }
    let mut t = 0.0;
    for i in 0..head.rows {
        for k in 0..head.cols {
            t += head[(i, k)] * last[(k, i)];
        }
    }
    Ok(t)
}
