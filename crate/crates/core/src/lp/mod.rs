//! Linear programming.
//!
//! Every optimization in the pipeline that is not trajectory optimization is
//! a linear program: zonotope membership, the funnel synthesis program and
//! the per-tick tracking programs. Small dense problems go through an
//! in-house two-phase simplex ([`lp_solve`]); the funnel synthesis program
//! has tens of thousands of variables and goes through a sparse
//! interior-point backend ([`solve_with`] with [`Backend::InteriorPoint`]).

mod interior;
mod matrix;
mod simplex;

pub use matrix::RowMatrix;

use thiserror::Error;

/// Default primal feasibility tolerance.
pub const DEFAULT_TOL_FEAS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("invalid LP: {0}")]
    InvalidProblem(String),
    #[error("LP solver failed to classify the problem: {0}")]
    NumericalFailure(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// `minimize cost·z  s.t.  ineq_lhs z <= ineq_rhs,  eq_lhs z = eq_rhs,  lo <= z <= hi`.
///
/// Infinite bounds mean the variable is unbounded on that side.
#[derive(Clone, Debug, PartialEq)]
pub struct LpProblem {
    pub cost: Vec<f64>,
    pub ineq_lhs: RowMatrix,
    pub ineq_rhs: Vec<f64>,
    pub eq_lhs: RowMatrix,
    pub eq_rhs: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Meaningful only when `status == Optimal`.
    pub point: Vec<f64>,
    pub objective: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Backend {
    /// Dense two-phase simplex; exact vertex solutions, best below a few
    /// hundred variables.
    #[default]
    Simplex,
    /// Sparse homogeneous interior point (Clarabel).
    InteriorPoint,
}

impl LpProblem {
    /// A problem with `nvars` free variables, zero cost and no rows.
    pub fn new(nvars: usize) -> Self {
        Self {
            cost: vec![0.0; nvars],
            ineq_lhs: RowMatrix::new(nvars),
            ineq_rhs: Vec::new(),
            eq_lhs: RowMatrix::new(nvars),
            eq_rhs: Vec::new(),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); nvars],
        }
    }

    pub fn nvars(&self) -> usize {
        self.cost.len()
    }

    /// Adds `Σ coef·z <= rhs`.
    pub fn add_le(&mut self, entries: &[(usize, f64)], rhs: f64) {
        self.ineq_lhs.push_row(entries);
        self.ineq_rhs.push(rhs);
    }

    /// Adds `Σ coef·z >= rhs`.
    pub fn add_ge(&mut self, entries: &[(usize, f64)], rhs: f64) {
        let neg: Vec<_> = entries.iter().map(|&(c, v)| (c, -v)).collect();
        self.add_le(&neg, -rhs);
    }

    /// Adds `Σ coef·z = rhs`.
    pub fn add_eq(&mut self, entries: &[(usize, f64)], rhs: f64) {
        self.eq_lhs.push_row(entries);
        self.eq_rhs.push(rhs);
    }

    pub fn set_bounds(&mut self, var: usize, lo: f64, hi: f64) {
        self.bounds[var] = (lo, hi);
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.nvars();
        let bad = |msg: String| Err(LpError::InvalidProblem(msg));
        if self.ineq_lhs.ncols() != n || self.eq_lhs.ncols() != n {
            return bad(format!(
                "constraint column counts ({}, {}) differ from variable count {n}",
                self.ineq_lhs.ncols(),
                self.eq_lhs.ncols()
            ));
        }
        if self.ineq_lhs.nrows() != self.ineq_rhs.len() {
            return bad("inequality row count does not match rhs length".into());
        }
        if self.eq_lhs.nrows() != self.eq_rhs.len() {
            return bad("equality row count does not match rhs length".into());
        }
        if self.bounds.len() != n {
            return bad("bounds length does not match variable count".into());
        }
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            if lo.is_nan()
                || hi.is_nan()
                || lo > hi
                || lo == f64::INFINITY
                || hi == f64::NEG_INFINITY
            {
                return bad(format!("variable {j} has invalid bounds [{lo}, {hi}]"));
            }
        }
        let finite = self
            .cost
            .iter()
            .chain(&self.ineq_rhs)
            .chain(&self.eq_rhs)
            .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite cost or right-hand side".into());
        }
        Ok(())
    }

    /// Largest constraint violation of `z`, each row measured relative to
    /// `max(1, |rhs|, Σ|a_j z_j|)`.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.ineq_lhs.nrows() {
            let lhs = self.ineq_lhs.row_dot(k, z);
            let scale = 1f64
                .max(self.ineq_rhs[k].abs())
                .max(self.ineq_lhs.row_abs_dot(k, z));
            worst = worst.max((lhs - self.ineq_rhs[k]).max(0.0) / scale);
        }
        for k in 0..self.eq_lhs.nrows() {
            let lhs = self.eq_lhs.row_dot(k, z);
            let scale = 1f64
                .max(self.eq_rhs[k].abs())
                .max(self.eq_lhs.row_abs_dot(k, z));
            worst = worst.max((lhs - self.eq_rhs[k]).abs() / scale);
        }
        for (j, &(lo, hi)) in self.bounds.iter().enumerate() {
            let scale = 1f64.max(z[j].abs());
            worst = worst
                .max((lo - z[j]).max(0.0) / scale)
                .max((z[j] - hi).max(0.0) / scale);
        }
        worst
    }

    pub fn objective_at(&self, z: &[f64]) -> f64 {
        self.cost.iter().zip(z).map(|(c, v)| c * v).sum()
    }
}

/// Solves `problem` with the dense simplex backend.
pub fn lp_solve(problem: &LpProblem, tol_feas: f64) -> Result<LpSolution, LpError> {
    solve_with(problem, tol_feas, Backend::Simplex)
}

pub fn solve_with(
    problem: &LpProblem,
    tol_feas: f64,
    backend: Backend,
) -> Result<LpSolution, LpError> {
    problem.validate()?;
    let sol = match backend {
        Backend::Simplex => simplex::solve(problem, tol_feas)?,
        Backend::InteriorPoint => interior::solve(problem, tol_feas)?,
    };
    if sol.status == LpStatus::Optimal {
        let viol = problem.max_violation(&sol.point);
        if viol > tol_feas.max(1e-12) * 10.0 {
            return Err(LpError::NumericalFailure(format!(
                "reported optimum violates constraints by {viol:.3e}"
            )));
        }
    }
    Ok(sol)
}

/// True iff the constraint set of `problem` is nonempty (the cost is ignored).
pub fn lp_feasible(problem: &LpProblem, tol_feas: f64) -> Result<bool, LpError> {
    let mut zero_cost = problem.clone();
    zero_cost.cost.iter_mut().for_each(|c| *c = 0.0);
    Ok(lp_solve(&zero_cost, tol_feas)?.status == LpStatus::Optimal)
}
