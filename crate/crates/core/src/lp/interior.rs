//! Sparse interior-point backend (Clarabel) for the large synthesis LP.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus,
    SupportedConeT, ZeroConeT,
};

use super::{LpError, LpProblem, LpSolution, LpStatus};

pub(super) fn solve(p: &LpProblem, tol_feas: f64) -> Result<LpSolution, LpError> {
    let n = p.nvars();
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut b = Vec::new();
    let mut m = 0;

    let mut push = |entries: &mut dyn Iterator<Item = (usize, f64)>, rhs: f64, b: &mut Vec<f64>| {
        for (c, v) in entries {
            rows.push(m);
            cols.push(c);
            vals.push(v);
        }
        b.push(rhs);
        m += 1;
    };
    for k in 0..p.eq_lhs.nrows() {
        push(&mut p.eq_lhs.row(k), p.eq_rhs[k], &mut b);
    }
    let n_eq = b.len();
    for k in 0..p.ineq_lhs.nrows() {
        push(&mut p.ineq_lhs.row(k), p.ineq_rhs[k], &mut b);
    }
    for (j, &(lo, hi)) in p.bounds.iter().enumerate() {
        if lo.is_finite() {
            push(&mut std::iter::once((j, -1.0)), -lo, &mut b);
        }
        if hi.is_finite() {
            push(&mut std::iter::once((j, 1.0)), hi, &mut b);
        }
    }
    let m_total = b.len();

    let a = CscMatrix::new_from_triplets(m_total, n, rows, cols, vals);
    let q = p.cost.clone();
    let pmat = CscMatrix::<f64>::zeros((n, n));
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if n_eq > 0 {
        cones.push(ZeroConeT(n_eq));
    }
    if m_total > n_eq {
        cones.push(NonnegativeConeT(m_total - n_eq));
    }
    let tol = tol_feas.clamp(1e-12, 1e-6);
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(500)
        .max_threads(1)
        .tol_feas(tol)
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .build()
        .map_err(|e| LpError::InvalidProblem(format!("solver settings: {e:?}")))?;
    let mut solver = DefaultSolver::new(&pmat, &q, &a, &b, &cones, settings)
        .map_err(|e| LpError::InvalidProblem(format!("solver setup: {e:?}")))?;
    solver.solve();

    match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            let point = solver.solution.x.clone();
            let objective = p.objective_at(&point);
            Ok(LpSolution {
                status: LpStatus::Optimal,
                point,
                objective,
            })
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Ok(LpSolution {
            status: LpStatus::Infeasible,
            point: Vec::new(),
            objective: f64::NAN,
        }),
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => Ok(LpSolution {
            status: LpStatus::Unbounded,
            point: Vec::new(),
            objective: f64::NEG_INFINITY,
        }),
        other => Err(LpError::NumericalFailure(format!(
            "interior point terminated with {other:?}"
        ))),
    }
}
