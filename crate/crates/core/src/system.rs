//! Uncertain linear systems, scalar parameter distributions and joint moments
//! of parameter products.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("moment order unavailable: parameter {param} has moments up to order {max}, order {order} requested")]
    MomentUnavailable { param: usize, order: usize, max: usize },
    #[error("parameter {param}: {reason}")]
    BadDistribution { param: usize, reason: String },
    #[error("{block}: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    Shape {
        block: String,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{block}: expected {expected} perturbation matrices, got {got}")]
    PerturbationCount {
        block: String,
        expected: usize,
        got: usize,
    },
    #[error("parameter index {index} out of range for {n_p} parameters")]
    ParameterIndex { index: usize, n_p: usize },
}

/// Law of a single zero-mean scalar parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParameterDistribution {
    Gaussian { std: f64 },
    Uniform { lo: f64, hi: f64 },
    /// `±value` with probability ½ each.
    TwoPoint { value: f64 },
    /// Raw moments `E[p^1], …, E[p^M]`.
    Explicit { moments: Vec<f64> },
}

impl ParameterDistribution {
    fn check(&self, param: usize) -> Result<(), SystemError> {
        let bad = |reason: &str| SystemError::BadDistribution {
            param,
            reason: reason.to_string(),
        };
        match self {
            Self::Gaussian { std } if !(std.is_finite() && *std >= 0.0) => {
                Err(bad("gaussian std must be finite and nonnegative"))
            }
            Self::Uniform { lo, hi } if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                Err(bad("uniform bounds must be finite with lo <= hi"))
            }
            Self::Uniform { lo, hi } if (lo + hi).abs() > 1e-12 * (1.0 + hi.abs()) => {
                Err(bad("uniform distribution must be zero-mean (lo = -hi)"))
            }
            Self::TwoPoint { value } if !value.is_finite() => Err(bad("two-point value must be finite")),
            Self::Explicit { moments } if moments.first().is_some_and(|m| *m != 0.0) => {
                Err(bad("explicit first moment must be zero"))
            }
            Self::Explicit { moments } if moments.iter().any(|m| !m.is_finite()) => {
                Err(bad("explicit moments must be finite"))
            }
            _ => Ok(()),
        }
    }

    /// Highest available moment order, if bounded.
    pub fn max_order(&self) -> Option<usize> {
        match self {
            Self::Explicit { moments } => Some(moments.len()),
            _ => None,
        }
    }

    /// Whether the oracles can draw samples from this law.
    pub fn is_samplable(&self) -> bool {
        !matches!(self, Self::Explicit { .. })
    }

    fn compute(&self, m: usize) -> Option<f64> {
        if m == 0 {
            return Some(1.0);
        }
        match *self {
            Self::Gaussian { std } => Some(if m % 2 == 1 {
                0.0
            } else {
                // (m−1)!! σ^m
                let mut df = 1.0;
                let mut k = m as i64 - 1;
                while k > 1 {
                    df *= k as f64;
                    k -= 2;
                }
                df * std.powi(m as i32)
            }),
            Self::Uniform { hi, .. } => Some(if m % 2 == 1 {
                0.0
            } else {
                hi.powi(m as i32) / (m as f64 + 1.0)
            }),
            Self::TwoPoint { value } => Some(if m % 2 == 1 { 0.0 } else { value.powi(m as i32) }),
            Self::Explicit { ref moments } => moments.get(m - 1).copied(),
        }
    }
}

/// Independent parameters with memoized raw moments.
#[derive(Clone, Debug)]
pub struct ParameterSet {
    dists: Vec<ParameterDistribution>,
    // table[j][m] = E[p_j^m]
    table: Vec<Vec<f64>>,
}

impl ParameterSet {
    /// Validates the laws and caches moments up to `max_order`.
    pub fn new(dists: Vec<ParameterDistribution>, max_order: usize) -> Result<Self, SystemError> {
        let mut table = Vec::with_capacity(dists.len());
        for (j, d) in dists.iter().enumerate() {
            d.check(j)?;
            let row = (0..=max_order)
                .map(|m| {
                    d.compute(m).ok_or(SystemError::MomentUnavailable {
                        param: j,
                        order: m,
                        max: d.max_order().unwrap_or(usize::MAX),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            table.push(row);
        }
        Ok(Self { dists, table })
    }

    pub fn len(&self) -> usize {
        self.dists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dists.is_empty()
    }

    pub fn distributions(&self) -> &[ParameterDistribution] {
        &self.dists
    }

    /// Largest order answered from the cache.
    pub fn cached_order(&self) -> usize {
        self.table.first().map_or(usize::MAX, |r| r.len() - 1)
    }

    /// `E[p_j^m]`.
    pub fn raw_moment(&self, j: usize, m: usize) -> Result<f64, SystemError> {
        let row = self.table.get(j).ok_or(SystemError::ParameterIndex {
            index: j,
            n_p: self.len(),
        })?;
        if let Some(v) = row.get(m) {
            return Ok(*v);
        }
        let d = &self.dists[j];
        d.compute(m).ok_or(SystemError::MomentUnavailable {
            param: j,
            order: m,
            max: d.max_order().unwrap_or(usize::MAX),
        })
    }

    /// `E[∏ p]` over the multi-index.
    pub fn joint_moment(&self, mi: &MultiIndex) -> Result<f64, SystemError> {
        let mut acc = 1.0;
        for (j, mult) in mi.multiplicities() {
            acc *= self.raw_moment(j, mult)?;
        }
        Ok(acc)
    }

    /// `E[∏a ∏b]`.
    pub fn joint_moment2(&self, a: &MultiIndex, b: &MultiIndex) -> Result<f64, SystemError> {
        self.joint_moment(&a.union(b))
    }

    /// `Cov(∏a, ∏b)`.
    pub fn param_cov(&self, a: &MultiIndex, b: &MultiIndex) -> Result<f64, SystemError> {
        Ok(self.joint_moment2(a, b)? - self.joint_moment(a)? * self.joint_moment(b)?)
    }
}

/// Canonical sorted multiset of parameter indices.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<usize>", into = "Vec<usize>")]
pub struct MultiIndex(Vec<usize>);

impl From<Vec<usize>> for MultiIndex {
    fn from(mut v: Vec<usize>) -> Self {
        v.sort_unstable();
        Self(v)
    }
}

impl From<MultiIndex> for Vec<usize> {
    fn from(m: MultiIndex) -> Self {
        m.0
    }
}

impl fmt::Debug for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|j| j.to_string()).collect();
        write!(f, "{{{}}}", parts.join(" "))
    }
}

impl MultiIndex {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn new(indices: impl Into<Vec<usize>>) -> Self {
        Self::from(indices.into())
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    /// The index with `j` added once more.
    pub fn with(&self, j: usize) -> Self {
        let pos = self.0.partition_point(|&x| x <= j);
        let mut v = self.0.clone();
        v.insert(pos, j);
        Self(v)
    }

    pub fn union(&self, other: &MultiIndex) -> Self {
        let mut v = Vec::with_capacity(self.0.len() + other.0.len());
        let (mut i, mut k) = (0, 0);
        while i < self.0.len() && k < other.0.len() {
            if self.0[i] <= other.0[k] {
                v.push(self.0[i]);
                i += 1;
            } else {
                v.push(other.0[k]);
                k += 1;
            }
        }
        v.extend_from_slice(&self.0[i..]);
        v.extend_from_slice(&other.0[k..]);
        Self(v)
    }

    /// `(parameter, multiplicity)` pairs in increasing parameter order.
    pub fn multiplicities(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut i = 0;
        std::iter::from_fn(move || {
            if i >= self.0.len() {
                return None;
            }
            let j = self.0[i];
            let start = i;
            while i < self.0.len() && self.0[i] == j {
                i += 1;
            }
            Some((j, i - start))
        })
    }
}

/// All multi-indices of exactly `order` over `n_p` parameters, in sorted order.
pub fn indices_of_order(n_p: usize, order: usize) -> Vec<MultiIndex> {
    if order == 0 {
        return vec![MultiIndex::empty()];
    }
    if n_p == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut cur = vec![0usize; order];
    loop {
        out.push(MultiIndex(cur.clone()));
        // next nondecreasing sequence
        let mut pos = order;
        while pos > 0 && cur[pos - 1] == n_p - 1 {
            pos -= 1;
        }
        if pos == 0 {
            break;
        }
        let v = cur[pos - 1] + 1;
        for c in cur[pos - 1..].iter_mut() {
            *c = v;
        }
    }
    out
}

/// All multi-indices with order `0..=max_order`, by order then lexicographically.
pub fn indices_up_to(n_p: usize, max_order: usize) -> Vec<MultiIndex> {
    (0..=max_order).flat_map(|l| indices_of_order(n_p, l)).collect()
}

/// `C(n_p + ℓ − 1, ℓ)`, the number of multi-indices of order ℓ.
pub fn count_of_order(n_p: usize, order: usize) -> usize {
    if order == 0 {
        return 1;
    }
    if n_p == 0 {
        return 0;
    }
    let (n, k) = (n_p + order - 1, order.min(n_p - 1));
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// `x⁺ = (Ā + Σ Ãⱼpⱼ)x + (B̄ + Σ B̃ⱼpⱼ)u + (D̄ + Σ D̃ⱼpⱼ)w`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertainSystem {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub d_bar: DMatrix<f64>,
    pub a_tilde: Vec<DMatrix<f64>>,
    pub b_tilde: Vec<DMatrix<f64>>,
    pub d_tilde: Vec<DMatrix<f64>>,
}

/// One term `(A, B, D)` of the dynamics paired with its parameter factor.
#[derive(Clone, Copy, Debug)]
pub struct Term<'a> {
    /// `None` for the nominal term, `Some(j)` for the `pⱼ` term.
    pub param: Option<usize>,
    pub a: &'a DMatrix<f64>,
    pub b: &'a DMatrix<f64>,
    pub d: &'a DMatrix<f64>,
}

impl UncertainSystem {
    pub fn new(
        a_bar: DMatrix<f64>,
        b_bar: DMatrix<f64>,
        d_bar: DMatrix<f64>,
        a_tilde: Vec<DMatrix<f64>>,
        b_tilde: Vec<DMatrix<f64>>,
        d_tilde: Vec<DMatrix<f64>>,
    ) -> Result<Self, SystemError> {
        let sys = Self {
            a_bar,
            b_bar,
            d_bar,
            a_tilde,
            b_tilde,
            d_tilde,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// System without parameters (`n_p = 0`).
    pub fn nominal(a: DMatrix<f64>, b: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self, SystemError> {
        Self::new(a, b, d, vec![], vec![], vec![])
    }

    pub fn n_x(&self) -> usize {
        self.a_bar.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b_bar.ncols()
    }
    pub fn n_w(&self) -> usize {
        self.d_bar.ncols()
    }
    pub fn n_p(&self) -> usize {
        self.a_tilde.len()
    }

    pub fn validate(&self) -> Result<(), SystemError> {
        let n_x = self.a_bar.nrows();
        let shape = |block: &str, m: &DMatrix<f64>, r: usize, c: usize| {
            if m.nrows() != r || m.ncols() != c {
                Err(SystemError::Shape {
                    block: block.to_string(),
                    expected_rows: r,
                    expected_cols: c,
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
            } else {
                Ok(())
            }
        };
        shape("a_bar", &self.a_bar, n_x, n_x)?;
        shape("b_bar", &self.b_bar, n_x, self.b_bar.ncols())?;
        shape("d_bar", &self.d_bar, n_x, self.d_bar.ncols())?;
        let n_p = self.a_tilde.len();
        for (name, list) in [("b_tilde", &self.b_tilde), ("d_tilde", &self.d_tilde)] {
            if list.len() != n_p {
                return Err(SystemError::PerturbationCount {
                    block: name.to_string(),
                    expected: n_p,
                    got: list.len(),
                });
            }
        }
        for j in 0..n_p {
            shape(&format!("a_tilde[{j}]"), &self.a_tilde[j], n_x, n_x)?;
            shape(&format!("b_tilde[{j}]"), &self.b_tilde[j], n_x, self.n_u())?;
            shape(&format!("d_tilde[{j}]"), &self.d_tilde[j], n_x, self.n_w())?;
        }
        Ok(())
    }

    /// The nominal term followed by one term per parameter.
    pub fn terms(&self) -> impl Iterator<Item = Term<'_>> + '_ {
        std::iter::once(Term {
            param: None,
            a: &self.a_bar,
            b: &self.b_bar,
            d: &self.d_bar,
        })
        .chain((0..self.n_p()).map(move |j| Term {
            param: Some(j),
            a: &self.a_tilde[j],
            b: &self.b_tilde[j],
            d: &self.d_tilde[j],
        }))
    }

    /// Realized `(A, B, D)` for a parameter draw.
    pub fn realize(&self, p: &[f64]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut a = self.a_bar.clone();
        let mut b = self.b_bar.clone();
        let mut d = self.d_bar.clone();
        for (j, pj) in p.iter().enumerate() {
            a += &self.a_tilde[j] * *pj;
            b += &self.b_tilde[j] * *pj;
            d += &self.d_tilde[j] * *pj;
        }
        (a, b, d)
    }

    /// True when every perturbation matrix is exactly zero.
    pub fn is_nominal(&self) -> bool {
        self.a_tilde
            .iter()
            .chain(&self.b_tilde)
            .chain(&self.d_tilde)
            .all(|m| m.iter().all(|v| *v == 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(d: ParameterDistribution) -> ParameterSet {
        ParameterSet::new(vec![d], 8).unwrap()
    }

    #[test]
    fn raw_moments_of_standard_laws() {
        let g = set(ParameterDistribution::Gaussian { std: 1.0 });
        assert_eq!(g.raw_moment(0, 4).unwrap(), 3.0);
        assert_eq!(g.raw_moment(0, 6).unwrap(), 15.0);
        let u = set(ParameterDistribution::Uniform { lo: -1.0, hi: 1.0 });
        assert!((u.raw_moment(0, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let t = set(ParameterDistribution::TwoPoint { value: 1.0 });
        assert_eq!(t.raw_moment(0, 6).unwrap(), 1.0);
        assert_eq!(t.raw_moment(0, 3).unwrap(), 0.0);
        assert_eq!(t.raw_moment(0, 0).unwrap(), 1.0);
        // beyond the cache still answers for closed-form laws
        assert_eq!(g.raw_moment(0, 10).unwrap(), 945.0);
    }

    #[test]
    fn explicit_table_is_bounded() {
        let e = ParameterSet::new(
            vec![ParameterDistribution::Explicit {
                moments: vec![0.0, 2.0, 0.0, 12.0],
            }],
            4,
        )
        .unwrap();
        assert_eq!(e.raw_moment(0, 4).unwrap(), 12.0);
        assert!(matches!(
            e.raw_moment(0, 5),
            Err(SystemError::MomentUnavailable { order: 5, max: 4, .. })
        ));
        assert!(ParameterSet::new(
            vec![ParameterDistribution::Explicit { moments: vec![0.0, 1.0] }],
            4
        )
        .is_err());
    }

    #[test]
    fn rejects_shifted_uniform() {
        let err = ParameterSet::new(vec![ParameterDistribution::Uniform { lo: 0.0, hi: 1.0 }], 2);
        assert!(matches!(err, Err(SystemError::BadDistribution { .. })));
    }

    #[test]
    fn joint_moments_and_covariances() {
        let g = ParameterSet::new(
            vec![
                ParameterDistribution::Gaussian { std: 0.5 },
                ParameterDistribution::Gaussian { std: 1.0 },
            ],
            6,
        )
        .unwrap();
        assert_eq!(g.joint_moment(&MultiIndex::empty()).unwrap(), 1.0);
        assert_eq!(g.joint_moment(&MultiIndex::new([0, 0])).unwrap(), 0.25);
        assert_eq!(g.joint_moment(&MultiIndex::new([0, 1])).unwrap(), 0.0);
        assert_eq!(g.joint_moment(&MultiIndex::new([1, 0, 1, 0])).unwrap(), 0.25);

        let t = set(ParameterDistribution::TwoPoint { value: 1.0 });
        let p = MultiIndex::new([0]);
        assert_eq!(t.param_cov(&p, &p).unwrap(), 1.0);
        assert_eq!(t.param_cov(&p, &MultiIndex::empty()).unwrap(), 0.0);
        let g1 = set(ParameterDistribution::Gaussian { std: 1.0 });
        assert_eq!(g1.param_cov(&p, &MultiIndex::new([0, 0])).unwrap(), 0.0);
        assert!(g.joint_moment(&MultiIndex::new([3])).is_err());
    }

    #[test]
    fn multi_index_algebra() {
        let a = MultiIndex::new([2, 0]);
        assert_eq!(a.indices(), &[0, 2]);
        assert_eq!(a.with(1).indices(), &[0, 1, 2]);
        assert_eq!(a.union(&MultiIndex::new([0, 3])).indices(), &[0, 0, 2, 3]);
        let m: Vec<_> = MultiIndex::new([1, 0, 1]).multiplicities().collect();
        assert_eq!(m, vec![(0, 1), (1, 2)]);
        assert_eq!(format!("{}", MultiIndex::new([1, 0])), "{0 1}");
    }

    #[test]
    fn catalog_counts_match_binomials() {
        for n_p in 0..4 {
            for l in 0..6 {
                let idx = indices_of_order(n_p, l);
                assert_eq!(idx.len(), count_of_order(n_p, l), "n_p={n_p} l={l}");
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
                assert!(idx.iter().all(|m| m.order() == l));
            }
        }
        assert_eq!(indices_up_to(1, 3).len(), 4);
    }

    #[test]
    fn system_shape_checks() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::zeros(2, 1);
        let d = DMatrix::zeros(2, 0);
        assert!(UncertainSystem::nominal(a.clone(), b.clone(), d.clone()).is_ok());
        let err = UncertainSystem::new(
            a.clone(),
            b.clone(),
            d.clone(),
            vec![a.clone()],
            vec![DMatrix::zeros(2, 2)],
            vec![d.clone()],
        )
        .unwrap_err();
        assert!(matches!(err, SystemError::Shape { .. }));
        let err = UncertainSystem::new(a.clone(), b, d, vec![a], vec![], vec![]).unwrap_err();
        assert!(matches!(err, SystemError::PerturbationCount { .. }));
    }
}
