mod common;

use common::flip;
use contactfunnel::dynamics::*;
use contactfunnel::trajopt::*;
use proptest::prelude::*;

/// Decision vector holding a given state/control sequence, gaps from the geometry.
fn pack(
    nlp: &Nlp,
    states: &[PlantState],
    controls: &[ControlInput],
    params: &PlantParams,
) -> Vec<f64> {
    let l = nlp.layout;
    let mut z = vec![0.0; nlp.n_vars()];
    for (t, s) in states.iter().enumerate() {
        let v = s.to_vector();
        for k in 0..NX {
            z[l.state(t, k)] = v[k];
        }
        let g = contact_geometry(s, params).unwrap();
        z[l.gap(t, 0)] = g.ground.gap;
        z[l.gap(t, 1)] = g.right.gap;
    }
    for (t, u) in controls.iter().enumerate() {
        let v = u.to_vector();
        for k in 0..NU {
            z[l.control(t, k)] = v[k];
        }
    }
    z
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_simulation_has_zero_defects(
        phid in -1.0f64..1.0,
        wd in -1e-3f64..1e-3,
        squeeze in 0.0f64..0.5,
        slip in -0.2f64..0.2,
    ) {
        // body at rest on the table; the ground carries gravity plus the left squeeze
        let params = PlantParams::default();
        let n = 5;
        let spec = TrajOptSpec { horizon: n, goal_theta: 0.0, ..Default::default() };
        let nlp = transcribe(&spec, &params).unwrap();
        let mut states = vec![resting_state(&params, 0.0, 85f64.to_radians(), 2e-4)];
        let mut controls = Vec::new();
        for _ in 0..n {
            let u = ControlInput {
                fn_ground: params.mass * params.gravity + squeeze,
                ft_ground: 0.0,
                f1: squeeze,
                f1t: slip * squeeze,
                f2: 0.0,
                f2t: 0.0,
                phid,
                wd,
            };
            let (next, diag) = plant_step_with_diagnostic(states.last().unwrap(), &u, &params);
            prop_assert!(!diag.clamped());
            prop_assert!((diag.applied - u.to_vector()).abs().max() == 0.0);
            states.push(next);
            controls.push(u);
        }
        let z = pack(&nlp, &states, &controls, &params);
        let c = nlp.eq(&z);
        let worst = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(worst <= 1e-12, "residual {worst}");
    }
}

#[test]
fn flip_plan_reaches_goal() {
    let t = flip();
    let last = t.state(t.n);
    let tol = 2f64.to_radians();
    assert!((last[sx::THETA] - 90f64.to_radians()).abs() <= tol);
    assert!((last[sx::PHI] - 90f64.to_radians()).abs() <= tol);
    assert!(t.diagnostics.max_defect <= 1e-6);
    assert!(t.diagnostics.max_complementarity <= 1e-4);
    assert_eq!(t.states.len(), 101);
    assert_eq!(t.controls.len(), 100);
    assert!(validate_trajectory(t).is_ok());
}

#[test]
fn reported_objective_matches_resum() {
    let t = flip();
    let resum: f64 = t.states.iter().map(|s| (s[6] - s[2]).abs()).sum();
    assert!((t.diagnostics.objective - resum).abs() <= 1e-12 * resum.max(1.0));
}

#[test]
fn merit_history_non_increasing() {
    let t = flip();
    assert!(!t.diagnostics.merit_history.is_empty());
    for w in t.diagnostics.merit_history.windows(2) {
        assert!(w[1] <= w[0], "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn resimulation_matches_plan() {
    let t = flip();
    let p = &t.params;
    for i in 0..t.n {
        let s = PlantState::from_vector(&t.state(i));
        let u = ControlInput::from_vector(&t.control(i));
        let next = plant_step(&s, &u, p).to_vector();
        let err = (next - t.state(i + 1)).abs().max();
        assert!(err <= t.limits.tol_dyn, "step {i}: {err}");
    }
}

#[test]
fn friction_cones_hold_everywhere() {
    let t = flip();
    let p = &t.params;
    for u in &t.controls {
        assert!(u[su::FN] >= 0.0 && u[su::F1] >= 0.0 && u[su::F2] >= 0.0);
        assert!(u[su::FT].abs() <= p.mu_ground * u[su::FN]);
        assert!(u[su::F1T].abs() <= p.mu_finger * u[su::F1]);
        assert!(u[su::F2T].abs() <= p.mu_finger * u[su::F2]);
    }
}

#[test]
fn goal_at_initial_equilibrium_gives_zero_motion() {
    let params = PlantParams::default();
    let init = resting_state(&params, 0.0, 0.0, 5e-5);
    let spec = TrajOptSpec {
        horizon: 10,
        initial_state: init,
        goal_theta: 0.0,
        goal_phi: 0.0,
        phi_min: -0.5,
        phi_max: 0.5,
        ..Default::default()
    };
    let t = plan(&spec, &params, "zero").unwrap();
    assert!(t.objective() <= 1e-9, "{}", t.objective());
    let x0 = t.state(0);
    for i in 0..=t.n {
        assert!((t.state(i) - x0).abs().max() <= 1e-6, "step {i} moved");
    }
    // deterministic
    let again = plan(&spec, &params, "zero").unwrap();
    assert_eq!(t, again);
}

#[test]
fn save_load_round_trip_is_bit_identical() {
    let t = flip();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.json");
    save_trajectory(t, &path).unwrap();
    let back = load_trajectory(&path).unwrap();
    assert_eq!(*t, back);
    for (a, b) in t.states.iter().flatten().zip(back.states.iter().flatten()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn mismatched_horizon_rejected() {
    let mut t = flip().clone();
    t.n = 99;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.json");
    save_trajectory(&t, &path).unwrap();
    assert!(matches!(
        load_trajectory(&path),
        Err(TrajOptError::InvariantViolation { .. })
    ));
}

#[test]
fn injected_defect_names_the_step() {
    let mut t = flip().clone();
    t.states[37][sx::X] += 1e-4;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.json");
    save_trajectory(&t, &path).unwrap();
    match load_trajectory(&path) {
        Err(TrajOptError::InvariantViolation { step, what }) => {
            assert_eq!(step, 36, "{what}");
            assert!(what.contains("defect"));
        }
        other => panic!("expected an invariant violation, got {other:?}"),
    }
}

#[test]
fn garbage_file_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.json");
    std::fs::write(&path, "{\"n\": 3").unwrap();
    assert!(matches!(
        load_trajectory(&path),
        Err(TrajOptError::ParseError(_))
    ));
}

#[test]
fn outer_iteration_cap_reports_best_iterate() {
    let spec = TrajOptSpec {
        max_outer: 1,
        max_inner: 5,
        ..Default::default()
    };
    match plan(&spec, &PlantParams::default(), "cap") {
        Err(TrajOptError::IterationLimit(rep)) => {
            assert_eq!(rep.outer_iterations, 1);
            assert_eq!(rep.best.states.len(), 101);
        }
        other => panic!("expected an iteration limit, got {:?}", other.map(|t| t.n)),
    }
}
