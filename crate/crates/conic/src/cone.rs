//! Cone blocks and their Euclidean projections.
//!
//! PSD blocks use the scaled upper-triangle vectorization: entries are taken
//! column by column from the upper triangle, and off-diagonal entries are
//! multiplied by √2 so that `svec(X)·svec(Y) = tr(XY)`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "size")]
pub enum Cone {
    /// `{0}ⁿ`: equality rows.
    Zero(usize),
    /// `ℝⁿ₊`
    Nonnegative(usize),
    /// `{(t, x) : ‖x‖₂ ≤ t}` of total dimension `n`.
    SecondOrder(usize),
    /// Symmetric PSD matrices of order `n`, stored as `n(n+1)/2` scaled entries.
    PsdTriangle(usize),
}

impl Cone {
    /// Number of constraint rows the block occupies.
    pub fn dim(&self) -> usize {
        match *self {
            Cone::Zero(n) | Cone::Nonnegative(n) | Cone::SecondOrder(n) => n,
            Cone::PsdTriangle(n) => triangle(n),
        }
    }

    /// Blocks whose scaling must be uniform across rows.
    pub fn is_symmetric_block(&self) -> bool {
        matches!(self, Cone::SecondOrder(_) | Cone::PsdTriangle(_))
    }

    /// Euclidean projection of `v` onto the cone, written in place.
    pub fn project(&self, v: &mut [f64]) {
        debug_assert_eq!(v.len(), self.dim());
        match *self {
            Cone::Zero(_) => v.iter_mut().for_each(|x| *x = 0.0),
            Cone::Nonnegative(_) => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Cone::SecondOrder(_) => project_soc(v),
            Cone::PsdTriangle(n) => project_psd(n, v),
        }
    }

    /// Euclidean projection onto the dual cone.
    pub fn project_dual(&self, v: &mut [f64]) {
        match *self {
            // the dual of {0} is the whole space
            Cone::Zero(_) => {}
            _ => self.project(v),
        }
    }

    /// Euclidean distance from `v` to the cone.
    pub fn distance(&self, v: &[f64]) -> f64 {
        let mut p = v.to_vec();
        self.project(&mut p);
        p.iter()
            .zip(v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn distance_dual(&self, v: &[f64]) -> f64 {
        let mut p = v.to_vec();
        self.project_dual(&mut p);
        p.iter()
            .zip(v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

pub fn triangle(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Inverse of [`triangle`], if `len` is a triangle number.
pub fn triangle_order(len: usize) -> Option<usize> {
    let n = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (triangle(n) == len).then_some(n)
}

/// Position of `(i, j)`, `i ≤ j`, in the upper-triangle column-major ordering.
pub fn triu_index(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

/// Scaled upper-triangle vectorization of a symmetric matrix.
pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = vec![0.0; triangle(n)];
    for j in 0..n {
        for i in 0..=j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[triu_index(i, j)] = if i == j { v } else { SQRT_2 * v };
        }
    }
    out
}

/// Inverse of [`svec`].
pub fn smat(n: usize, v: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let x = v[triu_index(i, j)];
            if i == j {
                m[(i, i)] = x;
            } else {
                m[(i, j)] = x / SQRT_2;
                m[(j, i)] = x / SQRT_2;
            }
        }
    }
    m
}

fn project_soc(v: &mut [f64]) {
    let t = v[0];
    let xnorm = v[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
    if xnorm <= t {
        return;
    }
    if xnorm <= -t {
        v.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let scale = 0.5 * (xnorm + t);
    v[0] = scale;
    let f = scale / xnorm;
    v[1..].iter_mut().for_each(|x| *x *= f);
}

fn project_psd(n: usize, v: &mut [f64]) {
    if n == 0 {
        return;
    }
    let m = smat(n, v);
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&clamped) * q.transpose();
    v.copy_from_slice(&svec(&r));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn soc_projection_closed_form() {
        let mut v = [0.0, 3.0, 4.0];
        Cone::SecondOrder(3).project(&mut v);
        assert!(close(&v, &[2.5, 1.5, 2.0]));

        let mut inside = [5.0, 3.0, 4.0];
        Cone::SecondOrder(3).project(&mut inside);
        assert!(close(&inside, &[5.0, 3.0, 4.0]));

        let mut polar = [-5.0, 3.0, 4.0];
        Cone::SecondOrder(3).project(&mut polar);
        assert!(close(&polar, &[0.0, 0.0, 0.0]));
    }

    #[test]
    fn psd_projection_clamps_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -2.0]);
        let mut v = svec(&m);
        Cone::PsdTriangle(2).project(&mut v);
        let p = smat(2, &v);
        assert!((p - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn nonnegative_projection_clamps() {
        let mut v = [-1.0, 2.0];
        Cone::Nonnegative(2).project(&mut v);
        assert_eq!(v, [0.0, 2.0]);
    }

    #[test]
    fn svec_preserves_inner_products() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let b = DMatrix::from_row_slice(3, 3, &[0.5, -1.0, 0.0, -1.0, 2.0, 1.5, 0.0, 1.5, -3.0]);
        let lhs: f64 = svec(&a).iter().zip(svec(&b)).map(|(x, y)| x * y).sum();
        assert!((lhs - (&a * &b).trace()).abs() < 1e-12);
        assert!((smat(3, &svec(&a)) - a).norm() < 1e-12);
    }

    #[test]
    fn triangle_helpers() {
        assert_eq!(triangle_order(10), Some(4));
        assert_eq!(triangle_order(7), None);
        assert_eq!(triu_index(0, 0), 0);
        assert_eq!(triu_index(1, 2), 4);
        assert_eq!(triu_index(2, 1), 4);
    }
}
