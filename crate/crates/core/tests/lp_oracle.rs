//! LP solver checked against brute-force vertex enumeration, weak duality
//! bounds and a hand-derived half-space description of 2-D zonotopes.

mod common;

use common::oracles::{random_boxed_lp, vertex_enumeration_min};
use contactfunnel::lp::{lp_feasible, lp_solve, solve_with, Backend, LpProblem, LpStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn simplex_matches_vertex_enumeration_on_random_lps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..200 {
        let n = if trial % 2 == 0 { 3 } else { 4 };
        let p = random_boxed_lp(&mut rng, n, 6);
        let sol = lp_solve(&p, 1e-9).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal, "trial {trial}");
        let oracle = vertex_enumeration_min(&p).expect("origin is feasible");
        assert!(
            (sol.objective - oracle).abs() <= 1e-8,
            "trial {trial}: simplex {} vs enumeration {oracle}",
            sol.objective
        );
    }
}

#[test]
fn interior_point_agrees_with_enumeration_loosely() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..50 {
        let p = random_boxed_lp(&mut rng, 3, 6);
        let sol = solve_with(&p, 1e-9, Backend::InteriorPoint).unwrap();
        let oracle = vertex_enumeration_min(&p).unwrap();
        assert!(
            (sol.objective - oracle).abs() <= 1e-6,
            "trial {trial}: {} vs {oracle}",
            sol.objective
        );
    }
}

#[test]
fn equality_constrained_lps_match_enumeration() {
    // one equality row pinned through a feasible point, enumerated as two half-spaces
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..60 {
        let mut p = random_boxed_lp(&mut rng, 3, 4);
        let row: Vec<(usize, f64)> = (0..3).map(|j| (j, rng.gen_range(-1.0..1.0))).collect();
        let rhs = rng.gen_range(-0.05..0.05);
        p.add_eq(&row, rhs);
        let sol = lp_solve(&p, 1e-9).unwrap();
        let mut relaxed = p.clone();
        relaxed.eq_lhs = contactfunnel::lp::RowMatrix::new(3);
        relaxed.eq_rhs.clear();
        relaxed.add_le(&row, rhs);
        relaxed.add_ge(&row, rhs);
        match vertex_enumeration_min(&relaxed) {
            Some(oracle) => {
                assert_eq!(sol.status, LpStatus::Optimal, "trial {trial}");
                assert!(
                    (sol.objective - oracle).abs() <= 1e-8,
                    "trial {trial}: {} vs {oracle}",
                    sol.objective
                );
            }
            None => assert_eq!(sol.status, LpStatus::Infeasible, "trial {trial}"),
        }
    }
}

/// For `min c·z, Az <= b, lo <= z <= hi` and any `y >= 0`,
/// `min_{lo<=z<=hi} (c + Aᵀy)·z − y·b` is a lower bound on the optimum.
fn lagrangian_bound(p: &LpProblem, y: &[f64]) -> f64 {
    let a = p.ineq_lhs.to_dense();
    let mut g = p.cost.clone();
    for (k, row) in a.iter().enumerate() {
        for j in 0..g.len() {
            g[j] += y[k] * row[j];
        }
    }
    let mut val = -y.iter().zip(&p.ineq_rhs).map(|(a, b)| a * b).sum::<f64>();
    for (j, &(lo, hi)) in p.bounds.iter().enumerate() {
        val += if g[j] >= 0.0 { g[j] * lo } else { g[j] * hi };
    }
    val
}

#[test]
fn weak_duality_bounds_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let p = random_boxed_lp(&mut rng, 4, 6);
        let sol = lp_solve(&p, 1e-9).unwrap();
        for _ in 0..20 {
            let y: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..2.0)).collect();
            assert!(lagrangian_bound(&p, &y) <= sol.objective + 1e-9);
        }
        assert!(lagrangian_bound(&p, &[0.0; 6]) <= sol.objective + 1e-9);
    }
}

#[test]
fn solves_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let p = random_boxed_lp(&mut rng, 4, 6);
        let a = lp_solve(&p, 1e-9).unwrap();
        let b = lp_solve(&p, 1e-9).unwrap();
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert!(a
            .point
            .iter()
            .zip(&b.point)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn zonotope_membership_matches_halfspace_description() {
    // Z = c + [g1 g2] [-1,1]^2 is a parallelogram with facet normals
    // perpendicular to each generator: |perp(g1)·(x−c)| <= |perp(g1)·g2| and
    // |perp(g2)·(x−c)| <= |perp(g2)·g1|.
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut agree = 0;
    for _ in 0..300 {
        let c: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let g1: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let g2: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if (g1[0] * g2[1] - g1[1] * g2[0]).abs() < 0.05 {
            continue;
        }
        let x: [f64; 2] = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let d = [x[0] - c[0], x[1] - c[1]];
        let perp = |g: [f64; 2]| [-g[1], g[0]];
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        let s1 = dot(perp(g1), d).abs() / dot(perp(g1), g2).abs();
        let s2 = dot(perp(g2), d).abs() / dot(perp(g2), g1).abs();
        if (s1 - 1.0).abs() < 1e-6 || (s2 - 1.0).abs() < 1e-6 {
            continue;
        }
        let h_member = s1 <= 1.0 && s2 <= 1.0;

        let mut p = LpProblem::new(2);
        p.set_bounds(0, -1.0, 1.0);
        p.set_bounds(1, -1.0, 1.0);
        p.add_eq(&[(0, g1[0]), (1, g2[0])], d[0]);
        p.add_eq(&[(0, g1[1]), (1, g2[1])], d[1]);
        assert_eq!(
            lp_feasible(&p, 1e-9).unwrap(),
            h_member,
            "c={c:?} g1={g1:?} g2={g2:?} x={x:?}"
        );
        agree += 1;
    }
    assert!(agree > 200);
}
