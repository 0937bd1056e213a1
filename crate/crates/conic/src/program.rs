use serde::Serialize;
use thiserror::Error;

use crate::cone::{triangle_order, Cone};
use crate::sparse::{dot, CscMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum ProgramError {
    #[error("objective: P is {rows}x{cols}, expected {n}x{n}")]
    ObjectiveShape { rows: usize, cols: usize, n: usize },
    #[error("objective: linear term has length {got}, expected {n}")]
    LinearTermLength { got: usize, n: usize },
    #[error("objective: P is not symmetric")]
    NotSymmetric,
    #[error("constraints: A is {rows}x{cols} but b has {b_len} rows and the program has {n} variables")]
    ConstraintShape {
        rows: usize,
        cols: usize,
        b_len: usize,
        n: usize,
    },
    #[error("cones cover {cone_rows} rows but A has {rows}")]
    ConeRows { cone_rows: usize, rows: usize },
    #[error("second-order cone must have dimension >= 1")]
    EmptySecondOrder,
    #[error("PSD block of {0} rows is not a triangle number")]
    BadPsdDimension(usize),
}

/// `min ½xᵀPx + qᵀx + c  s.t.  Ax + s = b,  s ∈ K₁ × … × Kₚ`.
///
/// `P` is stored as a full symmetric matrix. Cone blocks are laid out in row
/// order, so block `i` covers rows `Σ_{k<i} dim(K_k) ..`.
#[derive(Clone, Debug, Serialize)]
pub struct ConicProgram {
    pub p: CscMatrix,
    pub q: Vec<f64>,
    pub constant: f64,
    pub a: CscMatrix,
    pub b: Vec<f64>,
    pub cones: Vec<Cone>,
}

impl ConicProgram {
    pub fn new(
        p: CscMatrix,
        q: Vec<f64>,
        constant: f64,
        a: CscMatrix,
        b: Vec<f64>,
        cones: Vec<Cone>,
    ) -> Result<Self, ProgramError> {
        let prog = Self {
            p,
            q,
            constant,
            a,
            b,
            cones,
        };
        prog.validate()?;
        Ok(prog)
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        let n = self.q.len();
        if self.p.nrows != n || self.p.ncols != n {
            return Err(ProgramError::ObjectiveShape {
                rows: self.p.nrows,
                cols: self.p.ncols,
                n,
            });
        }
        if !self.p.is_symmetric(1e-12) {
            return Err(ProgramError::NotSymmetric);
        }
        if self.a.ncols != n || self.a.nrows != self.b.len() {
            return Err(ProgramError::ConstraintShape {
                rows: self.a.nrows,
                cols: self.a.ncols,
                b_len: self.b.len(),
                n,
            });
        }
        for cone in &self.cones {
            match *cone {
                Cone::SecondOrder(0) => return Err(ProgramError::EmptySecondOrder),
                Cone::PsdTriangle(k) if triangle_order(cone.dim()) != Some(k) => {
                    return Err(ProgramError::BadPsdDimension(cone.dim()))
                }
                _ => {}
            }
        }
        let cone_rows: usize = self.cones.iter().map(Cone::dim).sum();
        if cone_rows != self.a.nrows {
            return Err(ProgramError::ConeRows {
                cone_rows,
                rows: self.a.nrows,
            });
        }
        Ok(())
    }

    /// Row ranges of the cone blocks.
    pub fn cone_ranges(&self) -> Vec<(Cone, std::ops::Range<usize>)> {
        let mut start = 0;
        self.cones
            .iter()
            .map(|&c| {
                let r = start..start + c.dim();
                start = r.end;
                (c, r)
            })
            .collect()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut px = vec![0.0; x.len()];
        self.p.mul_vec(x, &mut px);
        0.5 * dot(x, &px) + dot(&self.q, x) + self.constant
    }

    /// Largest violation of `b − Ax ∈ K` over all blocks.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.num_rows()];
        self.a.mul_vec(x, &mut ax);
        let slack: Vec<f64> = self.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        self.cone_ranges()
            .into_iter()
            .map(|(cone, r)| match cone {
                Cone::Zero(_) => slack[r].iter().fold(0.0_f64, |m, v| m.max(v.abs())),
                _ => cone.distance(&slack[r]),
            })
            .fold(0.0, f64::max)
    }

    /// Serializes the program as a JSON debug dump.
    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Dump<'a> {
            num_vars: usize,
            num_rows: usize,
            objective: Objective<'a>,
            cones: &'a [Cone],
            a: Vec<(usize, usize, f64)>,
            b: &'a [f64],
        }
        #[derive(Serialize)]
        struct Objective<'a> {
            p: Vec<(usize, usize, f64)>,
            q: &'a [f64],
            constant: f64,
        }
        serde_json::to_value(Dump {
            num_vars: self.num_vars(),
            num_rows: self.num_rows(),
            objective: Objective {
                p: self.p.triplets(),
                q: &self.q,
                constant: self.constant,
            },
            cones: &self.cones,
            a: self.a.triplets(),
            b: &self.b,
        })
        .expect("program dump is plain data")
    }
}

/// Incremental assembly of a [`ConicProgram`], one cone block at a time.
#[derive(Debug, Default)]
pub struct ProgramBuilder {
    n: usize,
    p: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    constant: f64,
    a: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    cones: Vec<Cone>,
}

/// A sparse constraint row `Σ coeff·x[idx]` with right-hand side `rhs`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl Row {
    pub fn new(coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { coeffs, rhs }
    }
}

impl ProgramBuilder {
    pub fn new(num_vars: usize) -> Self {
        Self {
            n: num_vars,
            q: vec![0.0; num_vars],
            ..Default::default()
        }
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    /// Adds `v` to both `P[i,j]` and `P[j,i]` (once on the diagonal).
    pub fn add_quadratic(&mut self, i: usize, j: usize, v: f64) {
        if v == 0.0 {
            return;
        }
        self.p.push((i, j, v));
        if i != j {
            self.p.push((j, i, v));
        }
    }

    pub fn add_linear(&mut self, i: usize, v: f64) {
        self.q[i] += v;
    }

    pub fn add_constant(&mut self, v: f64) {
        self.constant += v;
    }

    /// Appends a block of rows `Ax + s = b` with `s` in `cone`.
    pub fn push_block(&mut self, cone: Cone, rows: Vec<Row>) {
        assert_eq!(cone.dim(), rows.len(), "cone dimension must match row count");
        if rows.is_empty() {
            return;
        }
        // merge with a trailing block of the same separable kind
        match (self.cones.last_mut(), cone) {
            (Some(Cone::Zero(k)), Cone::Zero(m)) => *k += m,
            (Some(Cone::Nonnegative(k)), Cone::Nonnegative(m)) => *k += m,
            _ => self.cones.push(cone),
        }
        for row in rows {
            let r = self.b.len();
            for (c, v) in row.coeffs {
                if v != 0.0 {
                    self.a.push((r, c, v));
                }
            }
            self.b.push(row.rhs);
        }
    }

    pub fn build(self) -> Result<ConicProgram, ProgramError> {
        let m = self.b.len();
        ConicProgram::new(
            CscMatrix::from_triplets(self.n, self.n, &self.p),
            self.q,
            self.constant,
            CscMatrix::from_triplets(m, self.n, &self.a),
            self.b,
            self.cones,
        )
    }
}
