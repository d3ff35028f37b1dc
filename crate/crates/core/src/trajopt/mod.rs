//! Direct-transcription trajectory optimization for the flip task.

mod al;
mod io;
mod transcription;

pub use al::{solve as solve_al, AlOptions, AlReport, ConstrainedProblem, Triplets};
pub use io::{load_trajectory, save_trajectory, write_trajectory_csv};
pub use transcription::{transcribe, Layout, Nlp};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    contact_geometry, continuous_dynamics, discrete_dynamics, su, sx, ContactMode, ControlInput,
    InputVec, PlantParams, PlantState, StateVec, NU, NX, TOGGLABLE_CONTACTS,
};

#[derive(Debug, Error)]
pub enum TrajOptError {
    #[error("invalid trajectory spec: {0}")]
    SpecInvalid(String),
    #[error("solver stalled: {0}")]
    Infeasible(Box<ConvergenceReport>),
    #[error("solver hit the iteration limit: {0}")]
    IterationLimit(Box<ConvergenceReport>),
    #[error("could not parse trajectory: {0}")]
    ParseError(String),
    #[error("trajectory invariant violated at step {step}: {what}")]
    InvariantViolation { step: usize, what: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Best iterate and residual breakdown of a failed solve.
#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub best: NominalTrajectory,
    pub max_defect: f64,
    pub max_complementarity: f64,
    pub max_cone_violation: f64,
    pub goal_error_deg: f64,
    pub outer_iterations: usize,
}

impl std::fmt::Display for ConvergenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "defect {:.3e}, complementarity {:.3e}, cone {:.3e}, goal error {:.3} deg after {} outer iterations",
            self.max_defect, self.max_complementarity, self.max_cone_violation, self.goal_error_deg, self.outer_iterations
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajOptSpec {
    pub horizon: usize,
    pub dt: f64,
    pub initial_state: PlantState,
    /// Goal orientation of the body and the finger, radians.
    pub goal_theta: f64,
    pub goal_phi: f64,
    /// Thickening of the goal, radians.
    pub tol_goal: f64,
    /// The planner aims inside `goal_margin * tol_goal` so the end point is
    /// interior to the thickened goal.
    pub goal_margin: f64,
    pub eps_comp: f64,
    pub tol_dyn: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub max_thetad: f64,
    pub max_lin_vel: f64,
    pub max_normal_force: f64,
    pub max_phid: f64,
    pub max_wd: f64,
    /// Bounds on the planned ground and right-finger gaps.
    pub gap_min: f64,
    pub gap_max: f64,
    /// Weight of the control smoothness regularizer.
    pub reg_weight: f64,
    /// Width of the pseudo-Huber smoothing of |phi - theta|, radians.
    pub smoothing: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for TrajOptSpec {
    fn default() -> Self {
        let params = PlantParams::default();
        let gap = 5e-5;
        let mut init = crate::dynamics::resting_state(&params, 0.0, 85f64.to_radians(), gap);
        init.y = params.radius + gap - params.com_offset();
        Self {
            horizon: 100,
            dt: 0.01,
            initial_state: init,
            goal_theta: 90f64.to_radians(),
            goal_phi: 90f64.to_radians(),
            tol_goal: 2f64.to_radians(),
            goal_margin: 0.5,
            eps_comp: 1e-4,
            tol_dyn: 1e-6,
            phi_min: 75f64.to_radians(),
            phi_max: 100f64.to_radians(),
            max_thetad: 2.5,
            max_lin_vel: 0.5,
            max_normal_force: 5.0,
            max_phid: 3.0,
            max_wd: 0.2,
            gap_min: 1e-5,
            gap_max: 5e-4,
            reg_weight: 1e-3,
            smoothing: 1e-3,
            max_outer: 40,
            max_inner: 100,
        }
    }
}

impl TrajOptSpec {
    pub fn validate(&self, params: &PlantParams) -> Result<(), TrajOptError> {
        let bad = |m: String| Err(TrajOptError::SpecInvalid(m));
        if self.horizon < 1 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.eps_comp > 0.0) {
            return bad("eps_comp must be positive".into());
        }
        if !(self.tol_goal > 0.0) {
            return bad("tol_goal must be positive".into());
        }
        if !(self.goal_margin > 0.0 && self.goal_margin <= 1.0) {
            return bad("goal_margin must lie in (0, 1]".into());
        }
        if (self.dt - params.dt).abs() > 1e-15 {
            return bad(format!(
                "trajopt dt {} differs from plant dt {}",
                self.dt, params.dt
            ));
        }
        if !self.initial_state.is_finite() {
            return bad("initial state is not finite".into());
        }
        let pairs = [
            ("phi", self.phi_min, self.phi_max),
            ("gap", self.gap_min, self.gap_max),
            ("normal force", 0.0, self.max_normal_force),
        ];
        for (name, lo, hi) in pairs {
            if !(lo <= hi) {
                return bad(format!("{name} bounds inconsistent: [{lo}, {hi}]"));
            }
        }
        for (name, v) in [
            ("max_thetad", self.max_thetad),
            ("max_lin_vel", self.max_lin_vel),
            ("max_phid", self.max_phid),
            ("max_wd", self.max_wd),
            ("tol_dyn", self.tol_dyn),
            ("smoothing", self.smoothing),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.reg_weight < 0.0 {
            return bad("reg_weight must be nonnegative".into());
        }
        let phi0 = self.initial_state.phi;
        if phi0 < self.phi_min || phi0 > self.phi_max {
            return bad(format!(
                "initial phi {phi0} outside [{}, {}]",
                self.phi_min, self.phi_max
            ));
        }
        let plan_tol = self.tol_goal * self.goal_margin;
        if self.goal_phi - plan_tol > self.phi_max || self.goal_phi + plan_tol < self.phi_min {
            return bad("goal phi unreachable within phi bounds".into());
        }
        Ok(())
    }

    /// Goal half-width the planner aims for.
    pub fn planning_tol(&self) -> f64 {
        self.tol_goal * self.goal_margin
    }
}

/// Limits a trajectory must respect; stored with the trajectory so a loaded
/// file can be validated without the originating config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryLimits {
    pub goal_theta: f64,
    pub goal_phi: f64,
    pub tol_goal: f64,
    pub tol_dyn: f64,
    pub eps_comp: f64,
    pub max_normal_force: f64,
    pub max_phid: f64,
    pub max_wd: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryDiagnostics {
    pub max_defect: f64,
    pub max_complementarity: f64,
    pub objective: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Accepted outer-step merit values, non-increasing.
    pub merit_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NominalTrajectory {
    pub n: usize,
    pub dt: f64,
    pub states: Vec<[f64; NX]>,
    pub controls: Vec<[f64; NU]>,
    pub mode: ContactMode,
    pub params: PlantParams,
    pub limits: TrajectoryLimits,
    pub diagnostics: TrajectoryDiagnostics,
    pub config_hash: String,
}

impl NominalTrajectory {
    pub fn state(&self, i: usize) -> StateVec {
        StateVec::from(self.states[i])
    }

    pub fn control(&self, i: usize) -> InputVec {
        InputVec::from(self.controls[i])
    }

    /// Σ_t |phi_t − theta_t| over all states.
    pub fn objective(&self) -> f64 {
        self.states
            .iter()
            .map(|s| (s[sx::PHI] - s[sx::THETA]).abs())
            .sum()
    }
}

/// Result of the independent constraint audit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditReport {
    pub max_defect: f64,
    pub worst_defect_step: usize,
    pub max_complementarity: f64,
    pub worst_complementarity_step: usize,
    pub max_cone_violation: f64,
    pub worst_cone_step: usize,
    pub min_gap: f64,
    pub goal_error: f64,
}

/// Re-checks every transcription constraint directly from the plant model.
pub fn audit(traj: &NominalTrajectory) -> AuditReport {
    let p = &traj.params;
    let mut rep = AuditReport {
        min_gap: f64::INFINITY,
        ..Default::default()
    };
    for t in 0..traj.n {
        let x = traj.state(t);
        let u = traj.control(t);
        let defect = match discrete_dynamics(&x, &u, &traj.mode, p) {
            Ok(next) => (traj.state(t + 1) - next).abs().max(),
            Err(_) => f64::INFINITY,
        };
        if defect > rep.max_defect || defect.is_nan() {
            rep.max_defect = if defect.is_nan() {
                f64::INFINITY
            } else {
                defect
            };
            rep.worst_defect_step = t;
        }
        let cone = [
            (u[su::FT].abs() - p.mu_ground * u[su::FN]).max(-u[su::FN]),
            (u[su::F1T].abs() - p.mu_finger * u[su::F1]).max(-u[su::F1]),
            (u[su::F2T].abs() - p.mu_finger * u[su::F2]).max(-u[su::F2]),
        ]
        .into_iter()
        .fold(0.0f64, f64::max);
        if cone > rep.max_cone_violation {
            rep.max_cone_violation = cone;
            rep.worst_cone_step = t;
        }
        if let Ok(g) = contact_geometry(&PlantState::from_vector(&x), p) {
            let comp = (g.ground.gap * u[su::FN]).max(g.right.gap * u[su::F2]);
            if comp > rep.max_complementarity {
                rep.max_complementarity = comp;
                rep.worst_complementarity_step = t;
            }
            rep.min_gap = rep.min_gap.min(g.ground.gap).min(g.right.gap);
        }
    }
    let last = traj.state(traj.n);
    rep.goal_error = (last[sx::THETA] - traj.limits.goal_theta)
        .abs()
        .max((last[sx::PHI] - traj.limits.goal_phi).abs());
    rep
}

/// Checks every `NominalTrajectory` invariant, naming the first failing step.
pub fn validate_trajectory(traj: &NominalTrajectory) -> Result<(), TrajOptError> {
    let viol = |step: usize, what: String| Err(TrajOptError::InvariantViolation { step, what });
    if traj.n < 1 {
        return viol(0, "horizon must be at least 1".into());
    }
    if traj.states.len() != traj.n + 1 {
        return viol(
            traj.states.len().min(traj.n),
            format!(
                "expected {} states, found {}",
                traj.n + 1,
                traj.states.len()
            ),
        );
    }
    if traj.controls.len() != traj.n {
        return viol(
            traj.controls.len().min(traj.n),
            format!(
                "expected {} controls, found {}",
                traj.n,
                traj.controls.len()
            ),
        );
    }
    if (traj.dt - traj.params.dt).abs() > 1e-15 {
        return viol(
            0,
            format!("dt {} differs from plant dt {}", traj.dt, traj.params.dt),
        );
    }
    if traj.mode != ContactMode::nominal(TOGGLABLE_CONTACTS) {
        return viol(0, "trajectory must be planned in the nominal mode".into());
    }
    for (t, s) in traj.states.iter().enumerate() {
        if s.iter().any(|v| !v.is_finite()) {
            return viol(t, "non-finite state".into());
        }
    }
    for (t, u) in traj.controls.iter().enumerate() {
        if u.iter().any(|v| !v.is_finite()) {
            return viol(t, "non-finite control".into());
        }
    }
    let rep = audit(traj);
    let tol = 1e-9;
    if rep.max_cone_violation > tol {
        return viol(
            rep.worst_cone_step,
            format!("friction cone violated by {:.3e}", rep.max_cone_violation),
        );
    }
    if rep.max_defect > traj.limits.tol_dyn {
        return viol(
            rep.worst_defect_step,
            format!(
                "dynamics defect {:.3e} exceeds {:.1e}",
                rep.max_defect, traj.limits.tol_dyn
            ),
        );
    }
    if rep.max_complementarity > traj.limits.eps_comp {
        return viol(
            rep.worst_complementarity_step,
            format!(
                "complementarity residual {:.3e} exceeds {:.1e}",
                rep.max_complementarity, traj.limits.eps_comp
            ),
        );
    }
    if rep.goal_error > traj.limits.tol_goal {
        return viol(
            traj.n,
            format!(
                "final state {:.4} deg from goal",
                rep.goal_error.to_degrees()
            ),
        );
    }
    Ok(())
}

/// Linear interpolation of the orientation and finger angle, with the body
/// rolling on the table and a static normal force.
pub fn warm_start(spec: &TrajOptSpec, params: &PlantParams) -> Vec<f64> {
    let layout = Layout::new(spec.horizon);
    let mut z = vec![0.0; layout.len()];
    let n = spec.horizon;
    let x0 = spec.initial_state;
    let d = params.com_offset();
    let r = params.radius;
    // circle centre of the initial pose
    let cx0 = x0.x - d * x0.theta.sin();
    let cy0 = x0.y + d * x0.theta.cos();
    let mut poses = Vec::with_capacity(n + 1);
    for t in 0..=n {
        let s = t as f64 / n as f64;
        let th = x0.theta + s * (spec.goal_theta - x0.theta);
        let phi = x0.phi + s * (spec.goal_phi - x0.phi);
        let cx = cx0 - r * (th - x0.theta);
        poses.push([cx + d * th.sin(), cy0 - d * th.cos(), th, phi]);
    }
    for t in 0..=n {
        let prev = if t == 0 { poses[0] } else { poses[t - 1] };
        let v = |k: usize| {
            if t == 0 {
                0.0
            } else {
                (poses[t][k] - prev[k]) / spec.dt
            }
        };
        let st = [
            poses[t][0],
            poses[t][1],
            poses[t][2],
            v(0),
            v(1),
            v(2),
            poses[t][3],
            x0.w,
        ];
        for k in 0..NX {
            z[layout.state(t, k)] = st[k];
        }
        let sv = StateVec::from(st);
        let g = contact_geometry(&PlantState::from_vector(&sv), params).expect("finite warm start");
        z[layout.gap(t, 0)] = g.ground.gap;
        z[layout.gap(t, 1)] = g.right.gap;
    }
    for k in 0..NX {
        z[layout.state(0, k)] = x0.to_vector()[k];
    }
    for t in 0..n {
        z[layout.control(t, su::FN)] = params.mass * params.gravity;
        z[layout.control(t, su::PHID)] = (poses[t + 1][3] - poses[t][3]) / spec.dt;
    }
    // make the guess dynamically consistent before handing it to the solver
    let mode = ContactMode::nominal(TOGGLABLE_CONTACTS);
    let mut states: Vec<StateVec> = (0..=n)
        .map(|t| StateVec::from_fn(|k, _| z[layout.state(t, k)]))
        .collect();
    let mut controls: Vec<InputVec> = (0..n)
        .map(|t| InputVec::from_fn(|k, _| z[layout.control(t, k)]))
        .collect();
    close_dynamics(&mut states, &mut controls, &mode, params);
    for t in 0..=n {
        for k in 0..NX {
            z[layout.state(t, k)] = states[t][k];
        }
        if let Ok(g) = contact_geometry(&PlantState::from_vector(&states[t]), params) {
            z[layout.gap(t, 0)] = g.ground.gap;
            z[layout.gap(t, 1)] = g.right.gap;
        }
    }
    for t in 0..n {
        for k in 0..NU {
            z[layout.control(t, k)] = controls[t][k];
        }
    }
    z
}

/// Makes the dynamics hold to rounding error without moving the planned
/// poses: velocities are re-derived from consecutive poses, gripper rates
/// from consecutive gripper states, and the contact forces receive the
/// minimum-norm correction that produces the re-derived accelerations.
pub fn close_dynamics(
    states: &mut [StateVec],
    controls: &mut [InputVec],
    mode: &ContactMode,
    params: &PlantParams,
) {
    let dt = params.dt;
    let n = controls.len();
    for t in 0..n {
        let x = states[t];
        for k in 0..3 {
            states[t + 1][3 + k] = (states[t + 1][k] - x[k]) / dt;
        }
        let target = states[t + 1];
        let s = PlantState::from_vector(&x);
        let mut u = controls[t];
        u[su::PHID] = (target[sx::PHI] - x[sx::PHI]) / dt;
        u[su::WD] = (target[sx::W] - x[sx::W]) / dt;
        // accelerations are affine in the forces; recover the map column by column
        let accel = |u: &InputVec| {
            let f = continuous_dynamics(&s, &ControlInput::from_vector(u), mode, params)
                .expect("finite state");
            nalgebra::Vector3::new(f[3], f[4], f[5])
        };
        let base = accel(&u);
        let want = nalgebra::Vector3::new(
            (target[3] - x[3]) / dt,
            (target[4] - x[4]) / dt,
            (target[5] - x[5]) / dt,
        );
        let force_idx: Vec<usize> = if mode.right_active() {
            (0..6).collect()
        } else {
            (0..4).collect()
        };
        let mut jac = nalgebra::DMatrix::zeros(3, force_idx.len());
        for (c, &k) in force_idx.iter().enumerate() {
            let mut e = u;
            e[k] += 1.0;
            let col = accel(&e) - base;
            jac.set_column(c, &col);
        }
        let resid = want - base;
        let jjt = &jac * jac.transpose();
        if let Some(y) = jjt
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(resid.as_slice()))
        {
            let du = jac.transpose() * y;
            for (c, &k) in force_idx.iter().enumerate() {
                u[k] += du[c];
            }
        }
        controls[t] = u;
        // land exactly on the semi-implicit map
        let next = discrete_dynamics(&x, &u, mode, params).expect("finite state");
        states[t + 1] = next;
    }
}

/// Plans the nominal trajectory.
pub fn plan(
    spec: &TrajOptSpec,
    params: &PlantParams,
    config_hash: &str,
) -> Result<NominalTrajectory, TrajOptError> {
    let nlp = transcribe(spec, params)?;
    let init = warm_start(spec, params);
    solve_nlp(&nlp, &init, &AlOptions::for_spec(spec), config_hash)
}

/// Solves the transcribed program and returns an audited trajectory.
pub fn solve_nlp(
    nlp: &Nlp,
    init: &[f64],
    opts: &AlOptions,
    config_hash: &str,
) -> Result<NominalTrajectory, TrajOptError> {
    let report = al::solve(nlp, init, opts);
    let spec = &nlp.spec;
    let params = &nlp.params;
    let layout = &nlp.layout;
    let n = spec.horizon;
    let mode = ContactMode::nominal(TOGGLABLE_CONTACTS);

    let mut states: Vec<StateVec> = (0..=n)
        .map(|t| StateVec::from_fn(|k, _| report.z[layout.state(t, k)]))
        .collect();
    let mut controls: Vec<InputVec> = (0..n)
        .map(|t| InputVec::from_fn(|k, _| report.z[layout.control(t, k)]))
        .collect();
    close_dynamics(&mut states, &mut controls, &mode, params);

    let limits = TrajectoryLimits {
        goal_theta: spec.goal_theta,
        goal_phi: spec.goal_phi,
        tol_goal: spec.tol_goal,
        tol_dyn: spec.tol_dyn,
        eps_comp: spec.eps_comp,
        max_normal_force: spec.max_normal_force,
        max_phid: spec.max_phid,
        max_wd: spec.max_wd,
    };
    let mut traj = NominalTrajectory {
        n,
        dt: spec.dt,
        states: states.iter().map(|s| (*s).into()).collect(),
        controls: controls.iter().map(|u| (*u).into()).collect(),
        mode,
        params: params.clone(),
        limits,
        diagnostics: TrajectoryDiagnostics {
            outer_iterations: report.outer_iterations,
            inner_iterations: report.inner_iterations,
            merit_history: report.merit_history.clone(),
            ..Default::default()
        },
        config_hash: config_hash.to_string(),
    };
    let rep = audit(&traj);
    traj.diagnostics.max_defect = rep.max_defect;
    traj.diagnostics.max_complementarity = rep.max_complementarity;
    traj.diagnostics.objective = traj.objective();

    match validate_trajectory(&traj) {
        Ok(()) => Ok(traj),
        Err(err) => {
            let conv = ConvergenceReport {
                max_defect: rep.max_defect,
                max_complementarity: rep.max_complementarity,
                max_cone_violation: rep.max_cone_violation,
                goal_error_deg: rep.goal_error.to_degrees(),
                outer_iterations: report.outer_iterations,
                best: traj,
            };
            if !report.converged && report.outer_iterations >= opts.max_outer {
                Err(TrajOptError::IterationLimit(Box::new(conv)))
            } else {
                let _ = err;
                Err(TrajOptError::Infeasible(Box::new(conv)))
            }
        }
    }
}
