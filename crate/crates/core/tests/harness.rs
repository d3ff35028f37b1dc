mod common;

use contactfunnel::controller::{goal_reached, Branch, ControllerConfig};
use contactfunnel::harness::{
    export_report, export_trace, read_trace_csv, run_batch, run_open_loop, run_trial,
    standard_conditions, write_trace_csv, Condition, DisturbanceSpec, HarnessConfig, HarnessError,
    Outcome, SimTrace, TRACE_HEADER,
};

fn trial(d: Option<&DisturbanceSpec>, seed: u64) -> SimTrace {
    let t = common::flip();
    run_trial(
        t,
        common::flip_funnel(),
        common::flip_pwa(),
        &t.params,
        &ControllerConfig::default(),
        &HarnessConfig::default(),
        d,
        seed,
    )
    .unwrap()
}

#[test]
fn undisturbed_trial_terminates_early_with_progressing_index() {
    let tr = trial(None, 0);
    let n = common::flip().n;
    let Outcome::Success { step } = tr.outcome else {
        panic!("expected success, got {:?}", tr.outcome);
    };
    assert!(step < n, "terminated at {step}, horizon {n}");
    let idx: Vec<usize> = tr.ticks.iter().skip(5).map(|r| r.closest_index).collect();
    assert!(
        idx.windows(2).all(|w| w[0] <= w[1]),
        "closest index regressed: {idx:?}"
    );
    assert!(goal_reached(
        tr.final_state().unwrap(),
        &ControllerConfig::default()
    ));
}

#[test]
fn rotation_of_fifteen_degrees_is_recovered() {
    let d = DisturbanceSpec::rotation(15.0, 30);
    for seed in 0..3 {
        let tr = trial(Some(&d), seed);
        assert!(tr.outcome.is_success(), "seed {seed}: {:?}", tr.outcome);
        assert!(tr.ticks.iter().any(|r| r.disturbed));
    }
}

#[test]
fn gripper_opening_switches_mode_and_back() {
    let d = DisturbanceSpec::gripper_open(0.02, 7);
    let tr = trial(Some(&d), 0);
    assert!(tr.outcome.is_success(), "{:?}", tr.outcome);
    assert_eq!(tr.ticks[6].mode_id, 1);
    assert!(tr.ticks[7].disturbed);
    assert_eq!(tr.ticks[7].mode_id, 2);
    let back = tr.ticks[8..].iter().position(|r| r.mode_id == 1);
    assert!(back.is_some(), "right contact never re-established");
}

#[test]
fn trials_are_reproducible() {
    let d = DisturbanceSpec::rotation(30.0, 30);
    let a = trial(Some(&d), 5);
    let b = trial(Some(&d), 5);
    assert!(a.same_run(&b));
    let c = trial(Some(&d), 6);
    assert!(!a.same_run(&c));
}

#[test]
fn successful_traces_end_in_the_goal() {
    let cfg = ControllerConfig::default();
    for (k, cond) in standard_conditions(1).iter().enumerate() {
        let tr = trial(cond.disturbance.as_ref(), k as u64);
        if let Outcome::Success { step } = tr.outcome {
            let last = tr.ticks.last().unwrap();
            assert_eq!(last.tick, step);
            assert_eq!(last.branch, Branch::GoalReached);
            assert!(goal_reached(&last.state, &cfg));
        }
    }
}

#[test]
fn open_loop_fails_where_closed_loop_recovers() {
    let t = common::flip();
    let d = DisturbanceSpec::held_rotation(30.0, 30, t.n);
    let cfg = ControllerConfig::default();
    let hc = HarnessConfig::default();
    for seed in 0..3 {
        let open = run_open_loop(t, &t.params, &cfg, &hc, Some(&d), seed).unwrap();
        assert!(
            !open.outcome.is_success(),
            "seed {seed}: open loop reached the goal"
        );
        let closed = trial(Some(&d), seed);
        assert!(
            closed.outcome.is_success(),
            "seed {seed}: {:?}",
            closed.outcome
        );
    }
    // without disturbance the replay itself is sound
    let open = run_open_loop(t, &t.params, &cfg, &hc, None, 0).unwrap();
    assert!(open.outcome.is_success());
}

#[test]
fn batch_rejects_zero_trials() {
    let t = common::flip();
    let conds = vec![Condition {
        name: "none".into(),
        disturbance: None,
        trials: 0,
    }];
    let err = run_batch(
        t,
        common::flip_funnel(),
        common::flip_pwa(),
        &t.params,
        &ControllerConfig::default(),
        &HarnessConfig::default(),
        &conds,
        &[0, 1],
    )
    .unwrap_err();
    assert!(matches!(err, HarnessError::Invalid(_)));
}

#[test]
fn seed_permutation_permutes_rows_only() {
    let t = common::flip();
    let mut conds = standard_conditions(4);
    conds.truncate(3);
    let run = |seeds: &[u64]| {
        run_batch(
            t,
            common::flip_funnel(),
            common::flip_pwa(),
            &t.params,
            &ControllerConfig::default(),
            &HarnessConfig::default(),
            &conds,
            seeds,
        )
        .unwrap()
        .0
    };
    let a = run(&[10, 11, 12, 13]);
    let b = run(&[13, 11, 10, 12]);
    for (ca, cb) in a.conditions.iter().zip(&b.conditions) {
        assert_eq!(ca.successes, cb.successes);
        assert_eq!(ca.success_rate, cb.success_rate);
        let mut ra = ca.runs.clone();
        let mut rb = cb.runs.clone();
        ra.sort_by_key(|r| r.seed);
        rb.sort_by_key(|r| r.seed);
        assert_eq!(ra, rb);
    }
    assert_eq!(b.conditions[0].runs[0].seed, 13);
    assert!(a.total_successes() <= a.total_trials());
}

#[test]
fn provenance_mismatch_is_refused() {
    let t = common::flip();
    let mut policy = common::flip_funnel().clone();
    policy.config_hash = "other".into();
    let err = run_trial(
        t,
        &policy,
        common::flip_pwa(),
        &t.params,
        &ControllerConfig::default(),
        &HarnessConfig::default(),
        None,
        0,
    )
    .unwrap_err();
    assert!(matches!(err, HarnessError::ConfigMismatch(_)));
}

#[test]
fn trace_csv_round_trips_and_blanks_lp_column() {
    let d = DisturbanceSpec::rotation(15.0, 30);
    let tr = trial(Some(&d), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    export_trace(&tr, &path).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), TRACE_HEADER.join(","));
    assert_eq!(
        TRACE_HEADER.join(","),
        "tick,t,x,y,theta,xd,yd,thetad,phi,w,branch,closest_i,mode_j,lp_obj,disturbed"
    );

    let rows = read_trace_csv(&path).unwrap();
    assert_eq!(rows.len(), tr.ticks.len());
    let mut solved = 0;
    for (row, rec) in rows.iter().zip(&tr.ticks) {
        assert_eq!(row.tick, rec.tick);
        assert_eq!(row.t, rec.t);
        assert_eq!(row.state, rec.state.to_vector());
        assert_eq!(row.branch, rec.branch.name());
        assert_eq!(row.closest_index, rec.closest_index);
        assert_eq!(row.mode_id, rec.mode_id);
        assert_eq!(row.lp_objective, rec.lp_objective);
        assert_eq!(row.disturbed, rec.disturbed);
        let blank = matches!(rec.branch, Branch::FunnelLaw { .. } | Branch::GoalReached);
        assert_eq!(row.lp_objective.is_none(), blank, "tick {}", rec.tick);
        solved += usize::from(!blank);
    }
    assert!(solved > 0, "no LP ticks in a disturbed trial");

    let mut again = Vec::new();
    write_trace_csv(&tr, &mut again).unwrap();
    assert_eq!(again, text.as_bytes());
}

#[test]
fn report_is_written_as_csv_and_json() {
    let t = common::flip();
    let conds = vec![Condition {
        name: "none".into(),
        disturbance: None,
        trials: 2,
    }];
    let (report, _) = run_batch(
        t,
        common::flip_funnel(),
        common::flip_pwa(),
        &t.params,
        &ControllerConfig::default(),
        &HarnessConfig::default(),
        &conds,
        &[0, 1],
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    export_report(&report, &path).unwrap();
    let csv = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "condition,trials,successes,success_rate"
    );
    assert_eq!(csv.lines().nth(1).unwrap(), "none,2,2,1");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json")).unwrap())
            .unwrap();
    assert_eq!(json["config_hash"], t.config_hash.as_str());
    assert!(json["latency"]["samples"].as_u64().unwrap() > 0);
}

#[test]
fn invalid_disturbances_are_rejected() {
    let mut d = DisturbanceSpec::rotation(0.0, 30);
    assert!(d.validate(100).is_err());
    d.magnitude = 15.0;
    d.trigger = 98;
    assert!(d.validate(100).is_err());
}
