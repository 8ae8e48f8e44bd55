//! Conic program representation and interior-point solver.
//!
//! Problems are linear programs over variables with optional bounds, plus
//! rotated second-order cones `2 u v >= w^2` capturing quadratic loss
//! epigraphs. The receding-horizon builders produce one variable block per
//! cluster coupled only through a few demand rows and shared averages, and
//! declare that layout via [`BlockStructure`]; the solver then factors the
//! KKT system blockwise with a dense border (arrow structure) instead of one
//! big dense matrix. A problem without block structure runs through the same
//! path as a single block.
//!
//! Rows may reference [`SharedExpr`] entries: named homogeneous linear
//! expressions (cluster averages, in practice) that appear in many rows.
//! Semantically a shared reference is plain expansion; the solver
//! materializes each expression as one internal variable plus one defining
//! equality so the expansion never densifies the per-block rows.

mod linalg;
mod solver;

pub use solver::{solve, SolverOptions};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("variable index {0} out of range ({1} vars)")]
    VarOutOfRange(usize, usize),
    #[error("shared expression index {0} out of range ({1} exprs)")]
    SharedOutOfRange(usize, usize),
    #[error("shared expressions must reference variables only")]
    SharedInShared,
    #[error("variable {0} has empty bound interval [{1}, {2}]")]
    EmptyBounds(usize, f64, f64),
    #[error("block {0} is not a valid variable range")]
    BadBlock(usize),
    #[error("blocks overlap at variable {0}")]
    OverlappingBlocks(usize),
}

/// Linear expression `sum(coef * x[var]) + sum(coef * expr[idx]) + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub shared_terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            ..Self::default()
        }
    }

    pub fn term(mut self, var: usize, coef: f64) -> Self {
        self.terms.push((var, coef));
        self
    }

    pub fn shared(mut self, expr: usize, coef: f64) -> Self {
        self.shared_terms.push((expr, coef));
        self
    }

    /// Evaluates against a full variable assignment, expanding shared terms.
    pub fn eval(&self, x: &[f64], shared: &[SharedExpr]) -> f64 {
        let mut acc = self.constant;
        for &(v, c) in &self.terms {
            acc += c * x[v];
        }
        for &(e, c) in &self.shared_terms {
            acc += c * shared[e].eval(x);
        }
        acc
    }
}

/// Homogeneous linear expression over variables, shared between rows.
#[derive(Debug, Clone, Default)]
pub struct SharedExpr {
    pub terms: Vec<(usize, f64)>,
}

impl SharedExpr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * x[v]).sum()
    }
}

/// Rotated cone `u >= 0, v >= 0, 2 u v >= w^2` over three expressions.
#[derive(Debug, Clone)]
pub struct RotatedCone {
    pub u: LinExpr,
    pub v: LinExpr,
    pub w: LinExpr,
}

/// Optional two-sided variable bounds, handled natively by the solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct VarBound {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// Contiguous variable ranges that interact only through border rows and
/// shared expressions. Variables outside every range are border variables.
#[derive(Debug, Clone, Default)]
pub struct BlockStructure {
    pub var_blocks: Vec<std::ops::Range<usize>>,
}

/// A conic program in minimization form.
#[derive(Debug, Clone, Default)]
pub struct ConicProblem {
    pub num_vars: usize,
    pub minimize: LinExpr,
    /// Each expression equals zero.
    pub eq_rows: Vec<LinExpr>,
    /// Each expression is nonnegative.
    pub nonneg_rows: Vec<LinExpr>,
    pub cones: Vec<RotatedCone>,
    /// Sparse map from variable to bound; unlisted variables are free.
    pub bounds: Vec<(usize, VarBound)>,
    pub shared_exprs: Vec<SharedExpr>,
    pub blocks: Option<BlockStructure>,
}

impl ConicProblem {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            ..Self::default()
        }
    }

    fn check_expr(&self, e: &LinExpr) -> Result<(), ProblemError> {
        for &(v, _) in &e.terms {
            if v >= self.num_vars {
                return Err(ProblemError::VarOutOfRange(v, self.num_vars));
            }
        }
        for &(s, _) in &e.shared_terms {
            if s >= self.shared_exprs.len() {
                return Err(ProblemError::SharedOutOfRange(s, self.shared_exprs.len()));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        self.check_expr(&self.minimize)?;
        for e in self
            .eq_rows
            .iter()
            .chain(&self.nonneg_rows)
            .chain(self.cones.iter().flat_map(|c| [&c.u, &c.v, &c.w]))
        {
            self.check_expr(e)?;
        }
        for expr in &self.shared_exprs {
            for &(v, _) in &expr.terms {
                if v >= self.num_vars {
                    return Err(ProblemError::VarOutOfRange(v, self.num_vars));
                }
            }
        }
        for &(v, b) in &self.bounds {
            if v >= self.num_vars {
                return Err(ProblemError::VarOutOfRange(v, self.num_vars));
            }
            if let (Some(l), Some(u)) = (b.lower, b.upper) {
                if l > u {
                    return Err(ProblemError::EmptyBounds(v, l, u));
                }
            }
        }
        if let Some(blocks) = &self.blocks {
            let mut owner = vec![false; self.num_vars];
            for (i, r) in blocks.var_blocks.iter().enumerate() {
                if r.start >= r.end || r.end > self.num_vars {
                    return Err(ProblemError::BadBlock(i));
                }
                for v in r.clone() {
                    if owner[v] {
                        return Err(ProblemError::OverlappingBlocks(v));
                    }
                    owner[v] = true;
                }
            }
        }
        Ok(())
    }

    /// Bound sides carried by the problem (a two-sided bound counts twice).
    pub fn num_bound_sides(&self) -> usize {
        self.bounds
            .iter()
            .map(|(_, b)| b.lower.is_some() as usize + b.upper.is_some() as usize)
            .sum()
    }

    /// Checks a point against every constraint at tolerance `tol`, returning
    /// the worst violation found. Intended for tests and oracles.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for e in &self.eq_rows {
            worst = worst.max(e.eval(x, &self.shared_exprs).abs());
        }
        for e in &self.nonneg_rows {
            worst = worst.max(-e.eval(x, &self.shared_exprs));
        }
        for c in &self.cones {
            let u = c.u.eval(x, &self.shared_exprs);
            let v = c.v.eval(x, &self.shared_exprs);
            let w = c.w.eval(x, &self.shared_exprs);
            worst = worst.max(-u).max(-v).max(w * w - 2.0 * u * v);
        }
        for &(v, b) in &self.bounds {
            if let Some(l) = b.lower {
                worst = worst.max(l - x[v]);
            }
            if let Some(u) = b.upper {
                worst = worst.max(x[v] - u);
            }
        }
        worst
    }
}

/// Solver outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    MaxIter,
    NumericalFailure,
}

/// Solution report; `x` covers the caller's variables only, in original
/// units. When `status` is not [`Status::Optimal`] the point is the last
/// iterate and may be loose.
#[derive(Debug, Clone)]
pub struct Solution {
    pub status: Status,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub mu: f64,
    pub res_primal: f64,
    pub res_dual: f64,
    pub rel_gap: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_catches_bad_indices_and_bounds() {
        let mut p = ConicProblem::new(2);
        p.eq_rows.push(LinExpr::default().term(5, 1.0));
        assert!(matches!(p.validate(), Err(ProblemError::VarOutOfRange(5, 2))));

        let mut p = ConicProblem::new(2);
        p.bounds.push((
            1,
            VarBound {
                lower: Some(2.0),
                upper: Some(1.0),
            },
        ));
        assert!(matches!(p.validate(), Err(ProblemError::EmptyBounds(1, _, _))));

        let mut p = ConicProblem::new(4);
        p.blocks = Some(BlockStructure {
            var_blocks: vec![0..3, 2..4],
        });
        assert!(matches!(p.validate(), Err(ProblemError::OverlappingBlocks(2))));
    }

    #[test]
    fn expressions_evaluate_with_shared_expansion() {
        let shared = vec![SharedExpr {
            terms: vec![(0, 0.5), (1, 0.5)],
        }];
        let e = LinExpr::constant(1.0).term(0, 2.0).shared(0, -1.0);
        let x = [3.0, 5.0];
        // 1 + 2*3 - mean(3, 5) = 3.
        assert_eq!(e.eval(&x, &shared), 3.0);
    }

    #[test]
    fn violation_checker_sees_cone_violations() {
        let mut p = ConicProblem::new(3);
        p.cones.push(RotatedCone {
            u: LinExpr::default().term(0, 1.0),
            v: LinExpr::default().term(1, 1.0),
            w: LinExpr::default().term(2, 1.0),
        });
        assert!(p.max_violation(&[1.0, 1.0, 1.0]) <= 0.0);
        // 2uv = 2 < w^2 = 9.
        assert!(p.max_violation(&[1.0, 1.0, 3.0]) >= 7.0 - 1e-12);
    }
}
