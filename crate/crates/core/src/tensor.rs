//! Dense row-major matrices in f64 and the handful of kernels the adapter
//! algebra needs: products, flattening, absolute cosine and magnitude
//! thresholds.

use crate::error::{HamError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(HamError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(HamError::Shape(format!(
                "expected {:?}, got {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[self, other]`: appends the columns of `other`.
    pub fn hconcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(HamError::Shape(format!(
                "hconcat needs equal row counts, got {} and {}",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// `[self; other]`: appends the rows of `other`.
    pub fn vconcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(HamError::Shape(format!(
                "vconcat needs equal column counts, got {} and {}",
                self.cols, other.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self · v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(HamError::Shape(format!(
                "matvec: {}x{} matrix against vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }
}

/// Standard product `lhs · rhs`.
pub fn matmul(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if lhs.cols != rhs.rows {
        return Err(HamError::Shape(format!(
            "matmul: {}x{} times {}x{}",
            lhs.rows, lhs.cols, rhs.rows, rhs.cols
        )));
    }
    let mut out = Matrix::zeros(lhs.rows, rhs.cols);
    for i in 0..lhs.rows {
        let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
        for (p, &a) in lhs.row(i).iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, &b) in out_row.iter_mut().zip(rhs.row(p)) {
                *o += a * b;
            }
        }
    }
    Ok(out)
}

/// `lhs · rhsᵀ` without materializing the transpose.
pub fn matmul_nt(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if lhs.cols != rhs.cols {
        return Err(HamError::Shape(format!(
            "matmul_nt: {}x{} times ({}x{})ᵀ",
            lhs.rows, lhs.cols, rhs.rows, rhs.cols
        )));
    }
    let mut out = Matrix::zeros(lhs.rows, rhs.rows);
    for i in 0..lhs.rows {
        let a = lhs.row(i);
        for j in 0..rhs.rows {
            out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
        }
    }
    Ok(out)
}

/// `lhsᵀ · rhs` without materializing the transpose.
pub fn matmul_tn(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if lhs.rows != rhs.rows {
        return Err(HamError::Shape(format!(
            "matmul_tn: ({}x{})ᵀ times {}x{}",
            lhs.rows, lhs.cols, rhs.rows, rhs.cols
        )));
    }
    let mut out = Matrix::zeros(lhs.cols, rhs.cols);
    for p in 0..lhs.rows {
        let b = rhs.row(p);
        for (i, &a) in lhs.row(p).iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (o, &bv) in out_row.iter_mut().zip(b) {
                *o += a * bv;
            }
        }
    }
    Ok(out)
}

/// Row-major flattening.
pub fn vectorize(m: &Matrix) -> Vec<f64> {
    m.data.clone()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `|<u, v>| / (|u| |v|)`, clamped into [0, 1] against rounding.
pub fn abs_cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(HamError::Shape(format!(
            "abs_cosine: lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(HamError::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(u, v).abs() / (nu * nv)).min(1.0))
}

fn check_keep_fraction(keep: f64) -> Result<()> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(HamError::Config(format!(
            "keep fraction must lie in (0, 1], got {keep}"
        )));
    }
    Ok(())
}

/// Number of entries kept out of `n` at keep fraction `keep`: `ceil(keep * n)`.
pub fn keep_count(n: usize, keep: f64) -> usize {
    // Guard against 0.6 * 10 = 6.000000000000001 rounding up to 7.
    let raw = keep * n as f64;
    let rounded = raw.round();
    let count = if (raw - rounded).abs() < 1e-9 {
        rounded
    } else {
        raw.ceil()
    };
    (count as usize).min(n)
}

/// Row-major indices of the `ceil(keep * n)` largest-magnitude entries.
/// Ties at the boundary go to the smaller index.
pub fn top_magnitude_indices(values: &[f64], keep: f64) -> Result<Vec<usize>> {
    check_keep_fraction(keep)?;
    let count = keep_count(values.len(), keep);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    });
    order.truncate(count);
    order.sort_unstable();
    Ok(order)
}

/// The magnitude of the smallest retained entry. Together with the index
/// tie-break this pins down exactly `ceil(keep * n)` survivors.
pub fn magnitude_threshold(m: &Matrix, keep: f64) -> Result<f64> {
    let kept = top_magnitude_indices(m.as_slice(), keep)?;
    Ok(kept
        .iter()
        .map(|&i| m.as_slice()[i].abs())
        .fold(f64::INFINITY, f64::min))
}

/// Boolean mask of retained entries, same layout as `m`.
pub fn magnitude_mask(m: &Matrix, keep: f64) -> Result<Vec<bool>> {
    let mut mask = vec![false; m.len()];
    for i in top_magnitude_indices(m.as_slice(), keep)? {
        mask[i] = true;
    }
    Ok(mask)
}

/// Zeroes everything outside the top-`keep` magnitude set.
pub fn prune_matrix(m: &Matrix, keep: f64) -> Result<Matrix> {
    let mask = magnitude_mask(m, keep)?;
    let data = m
        .as_slice()
        .iter()
        .zip(&mask)
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect();
    Ok(Matrix {
        rows: m.rows,
        cols: m.cols,
        data,
    })
}
