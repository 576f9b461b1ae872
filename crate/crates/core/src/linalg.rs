//! Dense row-major matrices sized for desk-scale networks (tens of nodes).

use std::ops::{Index, IndexMut};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(format!("matrix row {i}"), cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dim("matrix product", self.cols, other.rows));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    /// `self * x`
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| *a * *b).sum())
            .collect()
    }

    /// `selfᵀ * x`
    pub fn tr_mul_vec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (i, xi) in x.iter().enumerate() {
            if *xi == T::zero() {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += *a * *xi;
            }
        }
        out
    }

    /// Keeps the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, cols.len());
        for i in 0..self.rows {
            for (jj, j) in cols.iter().enumerate() {
                out[(i, jj)] = self[(i, *j)];
            }
        }
        out
    }

    pub fn max_abs_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn quadratic_form(&self, x: &[T]) -> T {
        crate::scalar::dot(x, &self.mul_vec(x))
    }

    /// Solves the square system `self * y = rhs` by Gaussian elimination
    /// with partial pivoting. Pivots below a relative threshold are treated
    /// as zero and the matching unknowns set to zero, so singular but
    /// consistent systems still return a solution. Inconsistent systems
    /// are rejected through the residual check.
    pub fn solve_consistent(&self, rhs: &[T]) -> Result<Vec<T>> {
        let n = self.rows;
        if self.cols != n {
            return Err(Error::dim("square solve", n, self.cols));
        }
        if rhs.len() != n {
            return Err(Error::dim("right-hand side", n, rhs.len()));
        }
        let scale = self
            .data
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs()))
            .max(T::min_positive_value());
        let tiny = scale * T::epsilon() * T::lit(1e3) * T::from_usize_lossy(n.max(1));
        let mut a = self.data.clone();
        let mut b = rhs.to_vec();
        let mut pivot_col = Vec::with_capacity(n);
        let mut row = 0;
        for col in 0..n {
            if row == n {
                break;
            }
            let (p, pv) = (row..n)
                .map(|r| (r, a[r * n + col].abs()))
                .fold((row, T::zero()), |best, c| if c.1 > best.1 { c } else { best });
            if pv <= tiny {
                continue;
            }
            if p != row {
                for j in 0..n {
                    a.swap(row * n + j, p * n + j);
                }
                b.swap(row, p);
            }
            let d = a[row * n + col];
            for r in row + 1..n {
                let f = a[r * n + col] / d;
                if f == T::zero() {
                    continue;
                }
                for j in col..n {
                    let v = a[row * n + j];
                    a[r * n + j] -= f * v;
                }
                let v = b[row];
                b[r] -= f * v;
            }
            pivot_col.push(col);
            row += 1;
        }
        let mut y = vec![T::zero(); n];
        for (r, &col) in pivot_col.iter().enumerate().rev() {
            let mut s = b[r];
            for j in col + 1..n {
                s -= a[r * n + j] * y[j];
            }
            y[col] = s / a[r * n + col];
        }
        let resid = self
            .mul_vec(&y)
            .iter()
            .zip(rhs)
            .fold(T::zero(), |m, (l, r)| m.max((*l - *r).abs()));
        let rhs_scale = rhs.iter().fold(T::one(), |m, v| m.max(v.abs()));
        if resid > T::epsilon().sqrt() * rhs_scale * scale.max(T::one()) {
            return Err(Error::Solver {
                message: "linear system is inconsistent".into(),
                iterates: vec![resid.as_f64()],
            });
        }
        Ok(y)
    }

    /// Minimum-norm solution of `self * x = rhs` for a consistent (possibly
    /// rank-deficient) system, via `x = selfᵀ y` with `self selfᵀ y = rhs`.
    pub fn min_norm_solve(&self, rhs: &[T]) -> Result<Vec<T>> {
        let gram = self.matmul(&self.transpose())?;
        let y = gram.solve_consistent(rhs)?;
        Ok(self.tr_mul_vec(&y))
    }
}

impl<T> AsRef<Matrix<T>> for Matrix<T> {
    fn as_ref(&self) -> &Matrix<T> {
        self
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_and_transpose() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(a.mul_vec(&[1.0, 1.0]), vec![3.0, 7.0, 11.0]);
        assert_eq!(a.tr_mul_vec(&[1.0, 0.0, 1.0]), vec![6.0, 8.0]);
        let ata = a.transpose().matmul(&a).unwrap();
        assert_eq!(ata, Matrix::from_rows(&[vec![35.0, 44.0], vec![44.0, 56.0]]).unwrap());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn solves_regular_and_singular_consistent_systems() {
        let a = Matrix::<f64>::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let y = a.solve_consistent(&[1.0, 2.0]).unwrap();
        let r = a.mul_vec(&y);
        assert!((r[0] - 1.0).abs() < 1e-14 && (r[1] - 2.0).abs() < 1e-14);

        // path-graph Laplacian: singular, rhs orthogonal to the kernel
        let l = Matrix::<f64>::from_rows(&[
            vec![1.0, -1.0, 0.0],
            vec![-1.0, 2.0, -1.0],
            vec![0.0, -1.0, 1.0],
        ])
        .unwrap();
        let y = l.solve_consistent(&[1.0, 0.0, -1.0]).unwrap();
        let r = l.mul_vec(&y);
        assert!((r[0] - 1.0).abs() < 1e-12 && r[1].abs() < 1e-12 && (r[2] + 1.0).abs() < 1e-12);
        assert!(l.solve_consistent(&[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn min_norm_solution_lies_in_row_space() {
        // triangle incidence: kernel spanned by the cycle (1, -1, 1)
        let a = Matrix::<f64>::from_rows(&[
            vec![-1.0, -1.0, 0.0],
            vec![1.0, 0.0, -1.0],
            vec![0.0, 1.0, 1.0],
        ])
        .unwrap();
        let x = a.min_norm_solve(&[1.0, -2.0, 1.0]).unwrap();
        let r = a.mul_vec(&x);
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] + 2.0).abs() < 1e-12);
        assert!((x[0] - x[1] + x[2]).abs() < 1e-12);
    }
}
