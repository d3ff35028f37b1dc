//! Brute-force reference implementations shared by the test targets.

use contactfunnel::dynamics::*;
use contactfunnel::lp::LpProblem;
use contactfunnel::pwa::{fd_jacobians, linearize_mode, HPolytope};
use contactfunnel::trajopt::NominalTrajectory;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random LP in `n` variables, all boxed in [-b, b], with `rows` random `<=` rows
/// whose rhs keeps the origin strictly feasible.
pub fn random_boxed_lp(rng: &mut ChaCha8Rng, n: usize, rows: usize) -> LpProblem {
    let mut p = LpProblem::new(n);
    for j in 0..n {
        p.cost[j] = rng.gen_range(-1.0..1.0);
        let b = rng.gen_range(0.5..3.0);
        p.set_bounds(j, -b, b);
    }
    for _ in 0..rows {
        let row: Vec<(usize, f64)> = (0..n).map(|j| (j, rng.gen_range(-1.0..1.0))).collect();
        p.add_le(&row, rng.gen_range(0.1..2.0));
    }
    p
}

/// All constraints as `a·z <= b` half-spaces, bounds included.
pub fn halfspaces(p: &LpProblem) -> Vec<(Vec<f64>, f64)> {
    let n = p.nvars();
    let mut hs: Vec<(Vec<f64>, f64)> = p
        .ineq_lhs
        .to_dense()
        .into_iter()
        .zip(p.ineq_rhs.iter().copied())
        .collect();
    for (j, &(lo, hi)) in p.bounds.iter().enumerate() {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        hs.push((e.clone(), hi));
        e[j] = -1.0;
        hs.push((e, -lo));
    }
    hs
}

pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for last in (k - 1)..n {
        for mut head in combinations(last, k - 1) {
            head.push(last);
            out.push(head);
        }
    }
    out
}

/// Minimum of the cost over every basic feasible point.
pub fn vertex_enumeration_min(p: &LpProblem) -> Option<f64> {
    let n = p.nvars();
    let hs = halfspaces(p);
    let mut best: Option<f64> = None;
    for idx in combinations(hs.len(), n) {
        let a = DMatrix::from_fn(n, n, |r, c| hs[idx[r]].0[c]);
        let b = DVector::from_fn(n, |r, _| hs[idx[r]].1);
        let lu = a.lu();
        if lu.determinant().abs() < 1e-10 {
            continue;
        }
        let z = lu.solve(&b).unwrap();
        let feasible = hs.iter().all(|(row, rhs)| {
            row.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>() <= rhs + 1e-9
        });
        if feasible {
            let obj: f64 = p.cost.iter().zip(z.iter()).map(|(c, v)| c * v).sum();
            best = Some(best.map_or(obj, |b: f64| b.min(obj)));
        }
    }
    best
}

/// Containment by enumerating every vertex of the zonotope.
pub fn vertex_oracle(center: &[f64], g: &DMatrix<f64>, poly: &HPolytope) -> (bool, f64) {
    let k = g.ncols();
    let mut worst = f64::NEG_INFINITY;
    for mask in 0..(1u32 << k) {
        let v: Vec<f64> = (0..g.nrows())
            .map(|r| {
                center[r]
                    + (0..k)
                        .map(|c| {
                            if mask >> c & 1 == 1 {
                                g[(r, c)]
                            } else {
                                -g[(r, c)]
                            }
                        })
                        .sum::<f64>()
            })
            .collect();
        worst = worst.max(poly.max_violation(&v));
    }
    (worst <= 0.0, worst)
}

/// Ratio of successive central-difference Jacobian changes when the step is
/// halved from 4e-3 to 1e-3; ~4 for a second-order scheme.
pub fn richardson_ratio(t: &NominalTrajectory, i: usize) -> f64 {
    let (x, u) = (t.state(i), t.control(i));
    let jac = |h: f64| fd_jacobians(&x, &u, &t.mode, &t.params, h).unwrap();
    let (a1, b1) = jac(4e-3);
    let (a2, b2) = jac(2e-3);
    let (a3, b3) = jac(1e-3);
    let d12 = (a1 - a2).abs().max().max((b1 - b2).abs().max());
    let d23 = (a2 - a3).abs().max().max((b2 - b3).abs().max());
    d12 / d23
}

/// Log-log slope of the one-step linearization error against the
/// perturbation size over `deltas`, along a random direction.
pub fn prediction_error_slope(
    t: &NominalTrajectory,
    i: usize,
    mode: &ContactMode,
    deltas: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    // per-channel perturbation scale
    let sx_scale = [1e-2, 1e-2, 1.0, 1e-1, 1e-1, 1.0, 1.0, 1e-3];
    let d = linearize_mode(t, i, mode, &t.params).unwrap();
    let dx = StateVec::from_fn(|k, _| rng.gen_range(-1.0..1.0) * sx_scale[k]);
    let du = InputVec::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    let (mut lx, mut le) = (Vec::new(), Vec::new());
    for &delta in deltas {
        let x = t.state(i) + dx * delta;
        let u = t.control(i) + du * delta;
        let truth = discrete_dynamics(&x, &u, mode, &t.params).unwrap();
        let err = (d.predict(&x, &u) - truth).norm();
        lx.push(delta.ln());
        le.push(err.ln());
    }
    super::slope(&lx, &le)
}
