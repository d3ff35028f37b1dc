mod common;

use common::oracles::vertex_oracle;
use common::{flip, flip_funnel, flip_pwa};
use contactfunnel::dynamics::*;
use contactfunnel::funnel::*;
use contactfunnel::lp::{lp_solve, LpProblem, LpStatus};
use contactfunnel::pwa::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn containment_matches_vertex_enumeration(
        entries in prop::collection::vec(-1.0f64..1.0, 6),
        k in 1usize..=3,
        center in prop::collection::vec(-0.5f64..0.5, 2),
        normals in prop::collection::vec(-1.0f64..1.0, 10),
        offsets in prop::collection::vec(0.2f64..2.0, 5),
    ) {
        let g = DMatrix::from_fn(2, k, |r, c| entries[r * 3 + c]);
        let mut poly = HPolytope::new(2);
        for (n, h) in normals.chunks(2).zip(&offsets) {
            poly.push(n.to_vec(), *h);
        }
        let (inside, margin) = vertex_oracle(&center, &g, &poly);
        prop_assume!(margin.abs() > 1e-9);
        prop_assert_eq!(zonotope_in_hpolytope(&center, &g, &poly, 0.0), inside);
        prop_assert!((containment_violation(&center, &g, &poly) - margin).abs() <= 1e-12);
    }
}

#[test]
fn rotated_generators_match_vertices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let square = HPolytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]);
    for _ in 0..200 {
        let (a, s1, s2) = (
            rng.gen_range(0.0..std::f64::consts::PI),
            rng.gen_range(0.0..0.9),
            rng.gen_range(0.0..0.9),
        );
        let g = DMatrix::from_row_slice(
            2,
            2,
            &[a.cos() * s1, -a.sin() * s2, a.sin() * s1, a.cos() * s2],
        );
        let (inside, margin) = vertex_oracle(&[0.0, 0.0], &g, &square);
        if margin.abs() > 1e-12 {
            assert_eq!(zonotope_in_hpolytope(&[0.0, 0.0], &g, &square, 0.0), inside);
        }
    }
}

/// Two steps of `x⁺ = x + u` around the origin with the goal `[−1, 1]^n`.
fn identity_chain() -> (PwaTable, contactfunnel::trajopt::NominalTrajectory) {
    let n = 2;
    let mut traj = flip().clone();
    traj.n = n;
    traj.states = vec![[0.0; NX]; n + 1];
    traj.controls = vec![[0.0; NU]; n];
    let modes = enumerate_modes(TOGGLABLE_CONTACTS);
    let mut eye = [[0.0; NX]; NX];
    (0..NX).for_each(|k| eye[k][k] = 1.0);
    let cells = (0..n)
        .flat_map(|i| {
            modes.iter().map(move |m| PwaCell {
                dynamics: AffineDynamics {
                    step: i,
                    mode_id: m.id,
                    dt: 0.01,
                    a: eye,
                    b: eye,
                    c: [0.0; NX],
                },
                constraints: HPolytope::new(NX + NU),
            })
        })
        .collect();
    let table = PwaTable {
        n,
        dt: 0.01,
        modes,
        cells,
        config_hash: "toy".into(),
    };
    (table, traj)
}

#[test]
fn identity_chain_keeps_the_unit_cube() {
    let (table, traj) = identity_chain();
    let goal = HPolytope::from_box(&[-1.0; NX], &[1.0; NX]);
    let opts = FunnelOptions {
        trust: [1.0; NX],
        input_scale: [1.0; NU],
        ..Default::default()
    };
    let policy = synthesize(&table, &traj, &goal, &HPolytope::new(NX), &opts).unwrap();
    for i in 0..=2 {
        let err = (policy.generator(i) - nalgebra::SMatrix::<f64, NX, NX>::identity())
            .abs()
            .max();
        assert!(err <= 1e-6, "step {i}: {err}");
    }
    for i in 0..2 {
        assert!(policy.gain(i).abs().max() <= 1e-6);
    }
    assert!(policy.recursion_residual(&table) <= 1e-12);
    assert!(policy.validate().is_ok());
}

#[test]
fn flip_funnel_is_sound() {
    let policy = flip_funnel();
    assert!(policy.recursion_residual(flip_pwa()) <= 1e-8);
    for i in 0..=policy.n {
        assert!(policy.min_singular_value(i) >= SIGMA_MIN, "step {i}");
    }
    let g = DMatrix::from_fn(NX, NX, |r, c| policy.g[policy.n][r][c]);
    assert!(zonotope_in_hpolytope(
        &policy.centers[policy.n],
        &g,
        &policy.goal,
        MEMBERSHIP_TOL
    ));
    assert!(policy.validate().is_ok());
}

#[test]
fn control_sets_stay_in_input_limits() {
    let policy = flip_funnel();
    for i in 0..policy.n {
        let inputs = flip_pwa().cell(i, 1).constraints.trailing(NX);
        let theta = DMatrix::from_fn(NU, NX, |r, c| policy.theta[i][r][c]);
        assert!(
            zonotope_in_hpolytope(&policy.controls[i], &theta, &inputs, MEMBERSHIP_TOL),
            "step {i}"
        );
        let gaps = flip_pwa().cell(i, 1).constraints.leading(NX);
        let g = DMatrix::from_fn(NX, NX, |r, c| policy.g[i][r][c]);
        assert!(
            zonotope_in_hpolytope(&policy.centers[i], &g, &gaps, MEMBERSHIP_TOL),
            "step {i}"
        );
    }
}

#[test]
fn linearized_image_lands_with_the_same_coordinates() {
    let policy = flip_funnel();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let i = rng.gen_range(0..policy.n);
        let p = StateVec::from_fn(|_, _| rng.gen_range(-1.0..=1.0));
        let d = flip_pwa().nominal(i);
        let image = d.predict(&policy.point(i, &p), &policy.law(i, &p));
        let err = (image - policy.point(i + 1, &p)).abs().max();
        assert!(err <= 1e-8, "step {i}: {err}");
    }
}

#[test]
fn membership_examples() {
    let policy = flip_funnel();
    let i = 40;
    let p0 = membership(policy, i, &policy.center(i)).unwrap().unwrap();
    assert!(p0.amax() <= 1e-12);
    let ones = StateVec::repeat(1.0);
    let p1 = membership(policy, i, &policy.point(i, &ones))
        .unwrap()
        .unwrap();
    assert!((p1 - ones).amax() <= 1e-9);
    let mut out = StateVec::repeat(0.3);
    out[3] = 1.5;
    assert!(membership(policy, i, &policy.point(i, &out))
        .unwrap()
        .is_none());
}

/// Membership as LP feasibility: `G p = x − x̄`, `−1 <= p <= 1`.
fn lp_member(policy: &FunnelPolicy, i: usize, x: &StateVec, a: f64) -> bool {
    let mut lp = LpProblem::new(NX);
    let rhs = x - policy.center(i);
    for r in 0..NX {
        let row: Vec<(usize, f64)> = (0..NX).map(|c| (c, policy.g[i][r][c])).collect();
        lp.add_eq(&row, rhs[r]);
    }
    for c in 0..NX {
        lp.set_bounds(c, -a * (1.0 + 1e-7), a * (1.0 + 1e-7));
    }
    lp_solve(&lp, 1e-9).unwrap().status == LpStatus::Optimal
}

#[test]
fn membership_agrees_with_lp_feasibility() {
    let policy = flip_funnel();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let i = rng.gen_range(0..=policy.n);
        let p = StateVec::from_fn(|_, _| rng.gen_range(-1.6..1.6));
        if (p.amax() - 1.0).abs() < 1e-6 {
            continue;
        }
        let x = policy.point(i, &p);
        assert_eq!(
            membership(policy, i, &x).unwrap().is_some(),
            lp_member(policy, i, &x, 1.0)
        );
    }
}

#[test]
fn synthesis_reports_the_violated_family() {
    let t = flip();
    let mut far_goal = goal_polytope(&t.limits);
    far_goal.rhs.iter_mut().for_each(|h| *h -= 1.0);
    match synthesize(
        flip_pwa(),
        t,
        &far_goal,
        &default_state_bounds(0.08),
        &FunnelOptions::default(),
    ) {
        Err(FunnelError::SynthesisInfeasible { family, step }) => {
            assert_eq!(family, "goal");
            assert_eq!(step, t.n);
        }
        other => panic!("expected infeasibility, got {:?}", other.map(|p| p.n)),
    }
    match synthesize(
        flip_pwa(),
        t,
        &goal_polytope(&t.limits),
        &default_state_bounds(1e-6),
        &FunnelOptions::default(),
    ) {
        Err(FunnelError::SynthesisInfeasible { family, step }) => {
            assert_eq!(family, "state bounds");
            assert_eq!(step, 0);
        }
        other => panic!("expected infeasibility, got {:?}", other.map(|p| p.n)),
    }
}

fn flip_schedule() -> &'static ShrinkSchedule {
    static S: std::sync::OnceLock<ShrinkSchedule> = std::sync::OnceLock::new();
    S.get_or_init(|| verify_prop1(flip_funnel(), &flip().params, 4096, 0).unwrap())
}

#[test]
fn schedule_is_monotone_and_certifies() {
    let s = flip_schedule();
    assert_eq!(s.a.len(), flip_funnel().n + 1);
    assert_eq!(*s.a.last().unwrap(), 1.0);
    assert!(s.a.windows(2).all(|w| w[0] <= w[1]));
    assert!(s.a[0] >= 1e-3, "a_0 = {}", s.a[0]);
    assert!(s.validate().is_ok());
}

#[test]
fn accepted_samples_recheck_by_lp() {
    let policy = flip_funnel();
    let params = &flip().params;
    let s = flip_schedule();
    for i in [0, 25, 50, 75, policy.n - 1] {
        for u in certification_samples(i, 64, s.seed) {
            let p = u * s.a[i];
            let x = policy.point(i, &p);
            let next = plant_step(
                &PlantState::from_vector(&x),
                &ControlInput::from_vector(&policy.law(i, &p)),
                params,
            );
            assert!(
                lp_member(policy, i + 1, &next.to_vector(), s.a[i + 1]),
                "step {i}"
            );
        }
    }
}

#[test]
fn linear_plant_needs_no_shrinking() {
    let policy = flip_funnel();
    let opts = VerifyOptions {
        samples: 512,
        ..Default::default()
    };
    let s = verify_with(policy, &opts, |i, x, u| flip_pwa().nominal(i).predict(x, u)).unwrap();
    assert!(s.a.iter().all(|a| *a == 1.0));
    assert!(s.failures.iter().all(|f| *f == 0));
}

#[test]
fn doubling_samples_is_stable() {
    let policy = flip_funnel();
    let base = flip_schedule();
    let doubled = verify_prop1(policy, &flip().params, 8192, 0).unwrap();
    let tol = VerifyOptions::default().bisection_tol;
    for (i, (a, b)) in base.a.iter().zip(&doubled.a).enumerate() {
        assert!(*b <= a + tol, "step {i}: {a} -> {b}");
    }
}

#[test]
fn verification_is_deterministic() {
    let again = verify_prop1(flip_funnel(), &flip().params, 4096, 0).unwrap();
    assert_eq!(*flip_schedule(), again);
}

#[test]
fn offset_plant_fails_certification() {
    let policy = flip_funnel();
    let opts = VerifyOptions {
        samples: 64,
        ..Default::default()
    };
    let kick = policy.generator(policy.n) * StateVec::repeat(3.0);
    match verify_with(policy, &opts, |i, x, u| {
        flip_pwa().nominal(i).predict(x, u) + kick
    }) {
        Err(FunnelError::CertificationFailed { step, sample, .. }) => {
            assert_eq!(step, policy.n - 1);
            assert_eq!(sample.len(), NX);
        }
        other => panic!("expected a certification failure, got {other:?}"),
    }
}

#[test]
fn policy_round_trips_and_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("funnel.json");
    let mut policy = flip_funnel().clone();
    policy.schedule = Some(flip_schedule().clone());
    save_policy(&policy, &path).unwrap();
    assert_eq!(load_policy(&path).unwrap(), policy);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"G\"") && text.contains("\"theta\"") && text.contains("\"schedule\""));

    let mut singular = policy.clone();
    singular.g[10][3] = singular.g[10][2];
    save_policy(&singular, &path).unwrap();
    assert!(matches!(
        load_policy(&path),
        Err(FunnelError::RankDeficient { step: 10, .. })
    ));

    let mut decreasing = policy.clone();
    decreasing.schedule.as_mut().unwrap().a[5] = 2.0;
    save_policy(&decreasing, &path).unwrap();
    assert!(matches!(load_policy(&path), Err(FunnelError::Invalid(_))));
}
