//! Minimal compressed-sparse-column storage used by the program and the solver.

use serde::{Deserialize, Serialize};

/// Column-compressed sparse matrix with sorted row indices and no duplicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub colptr: Vec<usize>,
    pub rowval: Vec<usize>,
    pub nzval: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            colptr: vec![0; ncols + 1],
            rowval: Vec::new(),
            nzval: Vec::new(),
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets. Duplicate entries are
    /// summed in input order; explicit zeros that result are kept out.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            counts[c] += 1;
        }
        let mut start = vec![0usize; ncols + 1];
        for c in 0..ncols {
            start[c + 1] = start[c] + counts[c];
        }
        let mut fill = start.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            rows[fill[c]] = r;
            vals[fill[c]] = v;
            fill[c] += 1;
        }

        let mut colptr = Vec::with_capacity(ncols + 1);
        let mut rowval = Vec::with_capacity(triplets.len());
        let mut nzval = Vec::with_capacity(triplets.len());
        colptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for c in 0..ncols {
            scratch.clear();
            scratch.extend((start[c]..start[c + 1]).map(|k| (rows[k], vals[k])));
            // stable sort keeps summation order deterministic
            scratch.sort_by_key(|&(r, _)| r);
            let mut k = 0;
            while k < scratch.len() {
                let r = scratch[k].0;
                let mut acc = 0.0;
                while k < scratch.len() && scratch[k].0 == r {
                    acc += scratch[k].1;
                    k += 1;
                }
                if acc != 0.0 {
                    rowval.push(r);
                    nzval.push(acc);
                }
            }
            colptr.push(rowval.len());
        }
        Self {
            nrows,
            ncols,
            colptr,
            rowval,
            nzval,
        }
    }

    pub fn nnz(&self) -> usize {
        self.nzval.len()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for c in 0..self.ncols {
            for k in self.colptr[c]..self.colptr[c + 1] {
                out.push((self.rowval[k], c, self.nzval[k]));
            }
        }
        out
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.colptr[c]..self.colptr[c + 1];
        match self.rowval[range.clone()].binary_search(&r) {
            Ok(k) => self.nzval[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        y.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.ncols {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for k in self.colptr[c]..self.colptr[c + 1] {
                y[self.rowval[k]] += self.nzval[k] * xc;
            }
        }
    }

    /// `y = Aᵀ x`
    pub fn tmul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for c in 0..self.ncols {
            let mut acc = 0.0;
            for k in self.colptr[c]..self.colptr[c + 1] {
                acc += self.nzval[k] * x[self.rowval[k]];
            }
            y[c] = acc;
        }
    }

    pub fn transpose(&self) -> CscMatrix {
        let t: Vec<(usize, usize, f64)> = self
            .triplets()
            .into_iter()
            .map(|(r, c, v)| (c, r, v))
            .collect();
        CscMatrix::from_triplets(self.ncols, self.nrows, &t)
    }

    pub fn col_inf_norms(&self) -> Vec<f64> {
        (0..self.ncols)
            .map(|c| {
                self.nzval[self.colptr[c]..self.colptr[c + 1]]
                    .iter()
                    .fold(0.0_f64, |m, v| m.max(v.abs()))
            })
            .collect()
    }

    pub fn row_inf_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0_f64; self.nrows];
        for (k, &r) in self.rowval.iter().enumerate() {
            out[r] = out[r].max(self.nzval[k].abs());
        }
        out
    }

    /// `A ← diag(left) A diag(right)`
    pub fn scale(&mut self, left: &[f64], right: &[f64]) {
        for c in 0..self.ncols {
            for k in self.colptr[c]..self.colptr[c + 1] {
                self.nzval[k] *= left[self.rowval[k]] * right[c];
            }
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        self.triplets()
            .into_iter()
            .all(|(r, c, v)| (self.get(c, r) - v).abs() <= tol * (1.0 + v.abs()))
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort_rows() {
        let m = CscMatrix::from_triplets(3, 2, &[(2, 0, 1.0), (0, 0, 2.0), (2, 0, 3.0), (1, 1, -1.0)]);
        assert_eq!(m.colptr, vec![0, 2, 3]);
        assert_eq!(m.rowval, vec![0, 2, 1]);
        assert_eq!(m.nzval, vec![2.0, 4.0, -1.0]);
        assert_eq!(m.get(2, 0), 4.0);
        assert_eq!(m.get(1, 0), 0.0);
    }

    #[test]
    fn products_match_dense() {
        let m = CscMatrix::from_triplets(2, 3, &[(0, 0, 1.0), (1, 2, 2.0), (0, 1, -3.0)]);
        let mut y = vec![0.0; 2];
        m.mul_vec(&[1.0, 2.0, 3.0], &mut y);
        assert_eq!(y, vec![-5.0, 6.0]);
        let mut z = vec![0.0; 3];
        m.tmul_vec(&[1.0, 1.0], &mut z);
        assert_eq!(z, vec![1.0, -3.0, 2.0]);
        assert_eq!(m.transpose().to_dense(), m.to_dense().transpose());
    }
}
