//! Closed-loop simulation with disturbance injection, batch experiments and
//! trace/report export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{decide, goal_reached, Branch, ControllerConfig, Strategy};
use crate::dynamics::{
    contact_geometry, detect_mode, plant_step, ControlInput, PlantParams, PlantState, StateVec,
};
use crate::funnel::FunnelPolicy;
use crate::pwa::PwaTable;
use crate::trajopt::NominalTrajectory;

/// Fixed column order of the per-tick trace CSV.
pub const TRACE_HEADER: [&str; 15] = [
    "tick",
    "t",
    "x",
    "y",
    "theta",
    "xd",
    "yd",
    "thetad",
    "phi",
    "w",
    "branch",
    "closest_i",
    "mode_j",
    "lp_obj",
    "disturbed",
];

/// Fixed column order of the per-condition report CSV.
pub const REPORT_HEADER: [&str; 4] = ["condition", "trials", "successes", "success_rate"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config hash mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {message}")]
    Parse { what: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DisturbanceKind {
    /// The body is rolled clockwise (decreasing θ) by `magnitude` degrees
    /// over `ramp` ticks, then held for `hold` ticks.
    ForcedRotation,
    /// The finger separation jumps by `magnitude` metres at the trigger.
    GripperOpen,
}

/// A disturbance template; a trial seed realizes the jittered values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    pub kind: DisturbanceKind,
    /// Degrees for a rotation, metres for a gripper opening.
    pub magnitude: f64,
    pub trigger: usize,
    #[serde(default = "default_ramp")]
    pub ramp: usize,
    #[serde(default = "default_hold")]
    pub hold: usize,
    /// Relative uniform jitter of the magnitude.
    #[serde(default)]
    pub magnitude_jitter: f64,
    /// Uniform jitter of the trigger, ticks either side.
    #[serde(default)]
    pub trigger_jitter: usize,
}

fn default_ramp() -> usize {
    5
}

fn default_hold() -> usize {
    20
}

impl DisturbanceSpec {
    pub fn rotation(degrees: f64, trigger: usize) -> Self {
        Self {
            kind: DisturbanceKind::ForcedRotation,
            magnitude: degrees,
            trigger,
            ramp: default_ramp(),
            hold: default_hold(),
            magnitude_jitter: 0.1,
            trigger_jitter: 5,
        }
    }

    /// A rotation held until the nominal command sequence of `horizon`
    /// steps has run out.
    pub fn held_rotation(degrees: f64, trigger: usize, horizon: usize) -> Self {
        let mut d = Self::rotation(degrees, trigger);
        d.hold = horizon.saturating_sub(trigger + d.ramp);
        d
    }

    pub fn gripper_open(delta_w: f64, trigger: usize) -> Self {
        Self {
            kind: DisturbanceKind::GripperOpen,
            magnitude: delta_w,
            trigger,
            ramp: 0,
            hold: 0,
            magnitude_jitter: 0.0,
            trigger_jitter: 0,
        }
    }

    pub fn validate(&self, horizon: usize) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        if !(self.magnitude > 0.0 && self.magnitude.is_finite()) {
            return bad(format!(
                "disturbance magnitude {} must be positive",
                self.magnitude
            ));
        }
        if !(0.0..1.0).contains(&self.magnitude_jitter) {
            return bad("magnitude jitter must lie in [0, 1)".into());
        }
        if self.trigger + self.trigger_jitter >= horizon || self.trigger < self.trigger_jitter {
            return bad(format!(
                "trigger {}±{} outside horizon {horizon}",
                self.trigger, self.trigger_jitter
            ));
        }
        if self.kind == DisturbanceKind::ForcedRotation && self.ramp == 0 {
            return bad("rotation ramp must be at least one tick".into());
        }
        Ok(())
    }

    /// Concrete disturbance of one trial.
    pub fn realize(&self, rng: &mut ChaCha8Rng) -> Disturbance {
        let scale = if self.magnitude_jitter > 0.0 {
            1.0 + rng.gen_range(-self.magnitude_jitter..=self.magnitude_jitter)
        } else {
            1.0
        };
        let shift = if self.trigger_jitter > 0 {
            rng.gen_range(0..=2 * self.trigger_jitter)
        } else {
            self.trigger_jitter
        };
        Disturbance {
            kind: self.kind,
            magnitude: self.magnitude * scale,
            trigger: self.trigger + shift - self.trigger_jitter,
            ramp: self.ramp,
            hold: self.hold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub kind: DisturbanceKind,
    pub magnitude: f64,
    pub trigger: usize,
    pub ramp: usize,
    pub hold: usize,
}

impl Disturbance {
    /// Ticks during which the disturbance overrides the state.
    pub fn active(&self, tick: usize) -> bool {
        match self.kind {
            DisturbanceKind::ForcedRotation => {
                tick >= self.trigger && tick < self.trigger + self.ramp + self.hold
            }
            DisturbanceKind::GripperOpen => tick == self.trigger,
        }
    }

    /// Clockwise rotation in radians imposed at `tick`.
    fn rotation_at(&self, tick: usize) -> f64 {
        let k = (tick + 1).saturating_sub(self.trigger).min(self.ramp);
        self.magnitude.to_radians() * k as f64 / self.ramp as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Defaults to `3 N` when absent.
    pub max_steps: Option<usize>,
    /// Uniform initial perturbation half-widths of θ, φ (radians) and w
    /// (metres); the body stays seated on the table.
    pub initial_noise: [f64; 3],
    /// Divergence when `‖x‖∞` exceeds this multiple of the nominal envelope.
    pub divergence_factor: f64,
    /// Divergence when `y` drops below this, metres.
    pub min_height: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            max_steps: None,
            initial_noise: [0.2f64.to_radians(), 0.2f64.to_radians(), 2e-4],
            divergence_factor: 10.0,
            min_height: -1e-3,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.max_steps == Some(0) {
            return Err(HarnessError::Invalid("max_steps must be positive".into()));
        }
        if self
            .initial_noise
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(HarnessError::Invalid(
                "initial noise must be non-negative".into(),
            ));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(HarnessError::Invalid(
                "divergence factor must exceed 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    Success { step: usize },
    Timeout,
    Diverged { step: usize },
}

impl Outcome {
    pub fn is_success(&self) -> bool {
        matches!(self, Outcome::Success { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub t: f64,
    /// State at which the decision was taken, after any disturbance.
    pub state: PlantState,
    pub branch: Branch,
    pub closest_index: usize,
    pub mode_id: usize,
    pub lp_objective: Option<f64>,
    pub disturbed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub seed: u64,
    pub strategy: Option<Strategy>,
    pub disturbance: Option<Disturbance>,
    pub ticks: Vec<TickRecord>,
    pub outcome: Outcome,
    /// Why a diverged trial stopped.
    pub note: Option<String>,
    pub config_hash: String,
    /// Wall time of each decision, seconds; excluded from [`SimTrace::same_run`].
    pub decide_seconds: Vec<f64>,
}

impl SimTrace {
    /// Equality of everything except wall-clock timings.
    pub fn same_run(&self, other: &SimTrace) -> bool {
        self.seed == other.seed
            && self.strategy == other.strategy
            && self.disturbance == other.disturbance
            && self.ticks == other.ticks
            && self.outcome == other.outcome
            && self.note == other.note
            && self.config_hash == other.config_hash
    }

    pub fn final_state(&self) -> Option<&PlantState> {
        self.ticks.last().map(|t| &t.state)
    }
}

/// Fails unless trajectory, table and policy come from the same config.
pub fn check_provenance(
    traj: &NominalTrajectory,
    pwa: &PwaTable,
    policy: &FunnelPolicy,
) -> Result<(), HarnessError> {
    let h = &traj.config_hash;
    if &pwa.config_hash != h || &policy.config_hash != h {
        return Err(HarnessError::ConfigMismatch(format!(
            "trajectory {h}, table {}, policy {}",
            pwa.config_hash, policy.config_hash
        )));
    }
    if pwa.n != traj.n || policy.n != traj.n {
        return Err(HarnessError::ConfigMismatch(format!(
            "horizons differ: trajectory {}, table {}, policy {}",
            traj.n, pwa.n, policy.n
        )));
    }
    Ok(())
}

/// Moves the body vertically so its table gap equals `gap`.
fn seat(state: &mut PlantState, params: &PlantParams, gap: f64) {
    if let Ok(g) = contact_geometry(state, params) {
        state.y += gap - g.ground.gap;
    }
}

/// Opens the gripper until the right fingertip no longer penetrates.
fn clear_finger(state: &mut PlantState, params: &PlantParams) {
    for _ in 0..4 {
        match contact_geometry(state, params) {
            Ok(g) if g.right.gap < 0.0 => state.w -= g.right.gap,
            _ => break,
        }
    }
}

/// Pose of `anchor` rolled without slip on its arc by `dtheta`.
fn rolled(anchor: &PlantState, dtheta: f64, params: &PlantParams) -> (f64, f64, f64) {
    let d = params.com_offset();
    let up = |th: f64| (-th.sin() * d, th.cos() * d);
    let (ox, oy) = up(anchor.theta);
    let (cx, cy) = (anchor.x + ox - params.radius * dtheta, anchor.y + oy);
    let th = anchor.theta + dtheta;
    let (nx, ny) = up(th);
    (cx - nx, cy - ny, th)
}

fn initial_state(
    traj: &NominalTrajectory,
    params: &PlantParams,
    cfg: &HarnessConfig,
    rng: &mut ChaCha8Rng,
) -> PlantState {
    let x0 = PlantState::from_vector(&traj.state(0));
    let gap = contact_geometry(&x0, params)
        .map(|g| g.ground.gap)
        .unwrap_or(0.0);
    let mut draw = |h: f64| if h > 0.0 { rng.gen_range(-h..=h) } else { 0.0 };
    let (dth, dphi, dw) = (
        draw(cfg.initial_noise[0]),
        draw(cfg.initial_noise[1]),
        draw(cfg.initial_noise[2]),
    );
    let (x, y, theta) = rolled(&x0, dth, params);
    let mut s = PlantState {
        x,
        y,
        theta,
        phi: x0.phi + dphi,
        w: x0.w + dw,
        ..x0
    };
    seat(&mut s, params, gap);
    clear_finger(&mut s, params);
    s
}

struct Injector {
    dist: Disturbance,
    anchor: Option<PlantState>,
    gap: f64,
}

impl Injector {
    /// Applies the disturbance scheduled for `tick`; returns whether it acted.
    fn apply(&mut self, tick: usize, state: &mut PlantState, params: &PlantParams) -> bool {
        if !self.dist.active(tick) {
            return false;
        }
        match self.dist.kind {
            DisturbanceKind::GripperOpen => state.w += self.dist.magnitude,
            DisturbanceKind::ForcedRotation => {
                let anchor = *self.anchor.get_or_insert_with(|| {
                    self.gap = contact_geometry(state, params)
                        .map(|g| g.ground.gap.max(0.0))
                        .unwrap_or(0.0);
                    *state
                });
                let now = self.dist.rotation_at(tick);
                let before = if tick > self.dist.trigger {
                    self.dist.rotation_at(tick - 1)
                } else {
                    0.0
                };
                let (x, y, theta) = rolled(&anchor, -now, params);
                let (px, py, pth) = rolled(&anchor, -before, params);
                let dt = params.dt;
                *state = PlantState {
                    x,
                    y,
                    theta,
                    xd: (x - px) / dt,
                    yd: (y - py) / dt,
                    thetad: (theta - pth) / dt,
                    ..*state
                };
                seat(state, params, self.gap);
                clear_finger(state, params);
            }
        }
        true
    }
}

fn envelope(traj: &NominalTrajectory) -> f64 {
    traj.states
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// What drives the plant in a trial.
enum Driver<'a> {
    Closed {
        policy: &'a FunnelPolicy,
        pwa: &'a PwaTable,
    },
    OpenLoop,
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    traj: &NominalTrajectory,
    driver: Driver,
    params: &PlantParams,
    ctrl: &ControllerConfig,
    cfg: &HarnessConfig,
    disturbance: Option<&DisturbanceSpec>,
    seed: u64,
    config_hash: &str,
) -> Result<SimTrace, HarnessError> {
    cfg.validate()?;
    ctrl.validate()
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let n = traj.n;
    if let Some(d) = disturbance {
        d.validate(n)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = initial_state(traj, params, cfg, &mut rng);
    let dist = disturbance.map(|d| d.realize(&mut rng));
    let mut injector = dist.clone().map(|dist| Injector {
        dist,
        anchor: None,
        gap: 0.0,
    });
    let limit = cfg.divergence_factor * envelope(traj);
    let max_steps = match driver {
        Driver::Closed { .. } => cfg.max_steps.unwrap_or(3 * n),
        Driver::OpenLoop => n,
    };
    let strategy = match driver {
        Driver::Closed { .. } => Some(ctrl.strategy),
        Driver::OpenLoop => None,
    };

    let mut ticks = Vec::new();
    let mut timing = Vec::new();
    let mut note = None;
    let mut outcome = Outcome::Timeout;
    for tick in 0..=max_steps {
        let disturbed = injector
            .as_mut()
            .map(|inj| inj.apply(tick, &mut state, params))
            .unwrap_or(false);
        let xv = state.to_vector();
        if !state.is_finite() || xv.amax() > limit || state.y < cfg.min_height {
            outcome = Outcome::Diverged { step: tick };
            note = Some(format!("state left the envelope at tick {tick}"));
            break;
        }
        let t = tick as f64 * params.dt;
        let in_window = injector
            .as_ref()
            .map(|inj| inj.dist.active(tick))
            .unwrap_or(false);
        if !in_window && goal_reached(&state, ctrl) {
            let closest = crate::controller::closest_index(&xv, &traj.states, &ctrl.weights);
            ticks.push(TickRecord {
                tick,
                t,
                state,
                branch: Branch::GoalReached,
                closest_index: closest,
                mode_id: detect_mode(&state, params).id,
                lp_objective: None,
                disturbed,
            });
            outcome = Outcome::Success { step: tick };
            break;
        }
        if tick == max_steps {
            break;
        }
        let (u, record) = match driver {
            Driver::Closed { policy, pwa } => {
                let start = Instant::now();
                let decision = decide(&state, policy, pwa, params, ctrl);
                timing.push(start.elapsed().as_secs_f64());
                let decision = match decision {
                    Ok(d) => d,
                    Err(e) => {
                        outcome = Outcome::Diverged { step: tick };
                        note = Some(format!("controller failed at tick {tick}: {e}"));
                        break;
                    }
                };
                let record = TickRecord {
                    tick,
                    t,
                    state,
                    branch: decision.branch,
                    closest_index: decision.closest_index,
                    mode_id: decision.mode_id,
                    lp_objective: decision.lp_objective,
                    disturbed,
                };
                (decision.u, record)
            }
            Driver::OpenLoop => {
                let record = TickRecord {
                    tick,
                    t,
                    state,
                    branch: Branch::OpenLoop { i: tick },
                    closest_index: crate::controller::closest_index(
                        &xv,
                        &traj.states,
                        &ctrl.weights,
                    ),
                    mode_id: detect_mode(&state, params).id,
                    lp_objective: None,
                    disturbed,
                };
                (ControlInput::from_vector(&traj.control(tick)), record)
            }
        };
        ticks.push(record);
        state = plant_step(&state, &u, params);
    }
    if matches!(driver, Driver::OpenLoop) && matches!(outcome, Outcome::Timeout) {
        ticks.push(TickRecord {
            tick: max_steps,
            t: max_steps as f64 * params.dt,
            state,
            branch: Branch::OpenLoop { i: max_steps },
            closest_index: crate::controller::closest_index(
                &state.to_vector(),
                &traj.states,
                &ctrl.weights,
            ),
            mode_id: detect_mode(&state, params).id,
            lp_objective: None,
            disturbed: false,
        });
    }
    Ok(SimTrace {
        seed,
        strategy,
        disturbance: dist,
        ticks,
        outcome,
        note,
        config_hash: config_hash.to_string(),
        decide_seconds: timing,
    })
}

/// One closed-loop trial: inject, decide, step; stops at the goal,
/// `max_steps` or divergence.
#[allow(clippy::too_many_arguments)]
pub fn run_trial(
    traj: &NominalTrajectory,
    policy: &FunnelPolicy,
    pwa: &PwaTable,
    params: &PlantParams,
    ctrl: &ControllerConfig,
    cfg: &HarnessConfig,
    disturbance: Option<&DisturbanceSpec>,
    seed: u64,
) -> Result<SimTrace, HarnessError> {
    check_provenance(traj, pwa, policy)?;
    simulate(
        traj,
        Driver::Closed { policy, pwa },
        params,
        ctrl,
        cfg,
        disturbance,
        seed,
        &traj.config_hash,
    )
}

/// Replays `ū_0..ū_{N−1}` under the same disturbance and initial noise.
pub fn run_open_loop(
    traj: &NominalTrajectory,
    params: &PlantParams,
    ctrl: &ControllerConfig,
    cfg: &HarnessConfig,
    disturbance: Option<&DisturbanceSpec>,
    seed: u64,
) -> Result<SimTrace, HarnessError> {
    simulate(
        traj,
        Driver::OpenLoop,
        params,
        ctrl,
        cfg,
        disturbance,
        seed,
        &traj.config_hash,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub name: String,
    pub disturbance: Option<DisturbanceSpec>,
    pub trials: usize,
}

/// The four recovery conditions: rotations of about 15° and 30°, and a
/// 2 cm gripper opening at ticks 7 and 14.
pub fn standard_conditions(trials: usize) -> Vec<Condition> {
    vec![
        Condition {
            name: "rot15".into(),
            disturbance: Some(DisturbanceSpec::rotation(15.0, 30)),
            trials,
        },
        Condition {
            name: "rot30".into(),
            disturbance: Some(DisturbanceSpec::rotation(30.0, 30)),
            trials,
        },
        Condition {
            name: "open7".into(),
            disturbance: Some(DisturbanceSpec::gripper_open(0.02, 7)),
            trials,
        },
        Condition {
            name: "open14".into(),
            disturbance: Some(DisturbanceSpec::gripper_open(0.02, 14)),
            trials,
        },
    ]
}

/// Stress condition reported separately: a 4 cm opening.
pub fn stress_condition(trials: usize) -> Condition {
    Condition {
        name: "open7_4cm".into(),
        disturbance: Some(DisturbanceSpec::gripper_open(0.04, 7)),
        trials,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub seed: u64,
    pub outcome: Outcome,
    pub ticks: usize,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub runs: Vec<TrialSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples: usize,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn from_samples(mut xs: Vec<f64>) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        xs.sort_by(f64::total_cmp);
        let q = |p: f64| xs[((p * (xs.len() - 1) as f64).round() as usize).min(xs.len() - 1)];
        Self {
            samples: xs.len(),
            p50: q(0.5),
            p95: q(0.95),
            p99: q(0.99),
            max: xs[xs.len() - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub strategy: Strategy,
    pub conditions: Vec<ConditionReport>,
    /// Decision latency over every closed-loop tick, seconds.
    pub latency: LatencyStats,
    pub config_hash: String,
}

impl ExperimentReport {
    pub fn total_trials(&self) -> usize {
        self.conditions.iter().map(|c| c.trials).sum()
    }

    pub fn total_successes(&self) -> usize {
        self.conditions.iter().map(|c| c.successes).sum()
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.name == name)
    }

    /// `name successes/trials` per condition.
    pub fn summary_lines(&self) -> Vec<String> {
        self.conditions
            .iter()
            .map(|c| format!("{} {}/{}", c.name, c.successes, c.trials))
            .collect()
    }
}

/// Runs every condition's trials in parallel; trial `k` uses `seeds[k]`.
#[allow(clippy::too_many_arguments)]
pub fn run_batch(
    traj: &NominalTrajectory,
    policy: &FunnelPolicy,
    pwa: &PwaTable,
    params: &PlantParams,
    ctrl: &ControllerConfig,
    cfg: &HarnessConfig,
    conditions: &[Condition],
    seeds: &[u64],
) -> Result<(ExperimentReport, Vec<Vec<SimTrace>>), HarnessError> {
    check_provenance(traj, pwa, policy)?;
    if conditions.is_empty() {
        return Err(HarnessError::Invalid("no conditions".into()));
    }
    for c in conditions {
        if c.trials == 0 {
            return Err(HarnessError::Invalid(format!(
                "condition {} requests zero trials",
                c.name
            )));
        }
        if c.trials > seeds.len() {
            return Err(HarnessError::Invalid(format!(
                "condition {} needs {} seeds, {} given",
                c.name,
                c.trials,
                seeds.len()
            )));
        }
        if let Some(d) = &c.disturbance {
            d.validate(traj.n)?;
        }
    }
    let mut distinct = seeds.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != seeds.len() {
        return Err(HarnessError::Invalid("seeds must be distinct".into()));
    }
    let jobs: Vec<(usize, u64)> = conditions
        .iter()
        .enumerate()
        .flat_map(|(c, cond)| seeds[..cond.trials].iter().map(move |s| (c, *s)))
        .collect();
    let traces = jobs
        .par_iter()
        .map(|&(c, seed)| {
            run_trial(
                traj,
                policy,
                pwa,
                params,
                ctrl,
                cfg,
                conditions[c].disturbance.as_ref(),
                seed,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut grouped: Vec<Vec<SimTrace>> = conditions.iter().map(|_| Vec::new()).collect();
    for ((c, _), trace) in jobs.iter().zip(traces) {
        grouped[*c].push(trace);
    }
    let reports = conditions
        .iter()
        .zip(&grouped)
        .map(|(cond, traces)| {
            let successes = traces.iter().filter(|t| t.outcome.is_success()).count();
            ConditionReport {
                name: cond.name.clone(),
                trials: cond.trials,
                successes,
                success_rate: successes as f64 / cond.trials as f64,
                runs: traces
                    .iter()
                    .map(|t| TrialSummary {
                        seed: t.seed,
                        outcome: t.outcome,
                        ticks: t.ticks.len(),
                        note: t.note.clone(),
                    })
                    .collect(),
            }
        })
        .collect();
    let latency = LatencyStats::from_samples(
        grouped
            .iter()
            .flatten()
            .flat_map(|t| t.decide_seconds.iter().copied())
            .collect(),
    );
    Ok((
        ExperimentReport {
            strategy: ctrl.strategy,
            conditions: reports,
            latency,
            config_hash: traj.config_hash.clone(),
        },
        grouped,
    ))
}

fn branch_fields(b: &Branch) -> &'static str {
    b.name()
}

/// Trace rows as CSV with [`TRACE_HEADER`]; `lp_obj` is blank when no LP was solved.
pub fn write_trace_csv<W: Write>(trace: &SimTrace, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for r in &trace.ticks {
        let s = r.state;
        let mut row: Vec<String> = vec![r.tick.to_string(), r.t.to_string()];
        row.extend(
            [s.x, s.y, s.theta, s.xd, s.yd, s.thetad, s.phi, s.w]
                .iter()
                .map(|v| v.to_string()),
        );
        row.push(branch_fields(&r.branch).to_string());
        row.push(r.closest_index.to_string());
        row.push(r.mode_id.to_string());
        row.push(r.lp_objective.map(|v| v.to_string()).unwrap_or_default());
        row.push(u8::from(r.disturbed).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_trace(trace: &SimTrace, path: &Path) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_trace_csv(trace, BufWriter::new(file)).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => HarnessError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => HarnessError::Parse {
            what: path.display().to_string(),
            message: format!("{other:?}"),
        },
    }
}

/// One parsed trace CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub tick: usize,
    pub t: f64,
    pub state: StateVec,
    pub branch: String,
    pub closest_index: usize,
    pub mode_id: usize,
    pub lp_objective: Option<f64>,
    pub disturbed: bool,
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>, HarnessError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(HarnessError::Parse {
            what: path.display().to_string(),
            message: "unexpected header".into(),
        });
    }
    let parse_err = |line: usize, m: String| HarnessError::Parse {
        what: format!("{}:{line}", path.display()),
        message: m,
    };
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = k + 2;
        let f = |c: usize| {
            rec[c]
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("column {}: {e}", TRACE_HEADER[c])))
        };
        let u = |c: usize| {
            rec[c]
                .parse::<usize>()
                .map_err(|e| parse_err(line, format!("column {}: {e}", TRACE_HEADER[c])))
        };
        let mut state = StateVec::zeros();
        for k in 0..8 {
            state[k] = f(2 + k)?;
        }
        rows.push(TraceRow {
            tick: u(0)?,
            t: f(1)?,
            state,
            branch: rec[10].to_string(),
            closest_index: u(11)?,
            mode_id: u(12)?,
            lp_objective: if rec[13].is_empty() {
                None
            } else {
                Some(f(13)?)
            },
            disturbed: &rec[14] == "1",
        });
    }
    Ok(rows)
}

/// Per-condition CSV with [`REPORT_HEADER`].
pub fn write_report_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for c in &report.conditions {
        w.write_record([
            c.name.clone(),
            c.trials.to_string(),
            c.successes.to_string(),
            c.success_rate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `path` as CSV and the full report next to it as JSON.
pub fn export_report(report: &ExperimentReport, path: &Path) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_report_csv(report, BufWriter::new(file)).map_err(|e| csv_err(path, e))?;
    let json_path = path.with_extension("json");
    let text = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Parse {
        what: "report".into(),
        message: e.to_string(),
    })?;
    std::fs::write(&json_path, text).map_err(io_err(&json_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rolling_keeps_the_arc_on_the_table() {
        let p = PlantParams::default();
        let s = crate::dynamics::resting_state(&p, 0.0, 85f64.to_radians(), 0.0);
        for dth in [-0.5, -0.1, 0.2, 0.7] {
            let (x, y, theta) = rolled(&s, dth, &p);
            let r = PlantState { x, y, theta, ..s };
            let g = contact_geometry(&r, &p).unwrap();
            assert!(g.ground.gap.abs() < 1e-12);
            // the circle centre advances by −r Δθ
            assert!((g.circle_center.x + p.radius * dth).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_ramps_then_holds() {
        let d = Disturbance {
            kind: DisturbanceKind::ForcedRotation,
            magnitude: 30.0,
            trigger: 10,
            ramp: 5,
            hold: 20,
        };
        assert!(!d.active(9) && d.active(10) && d.active(34) && !d.active(35));
        assert!((d.rotation_at(10) - 6f64.to_radians()).abs() < 1e-15);
        assert!((d.rotation_at(14) - 30f64.to_radians()).abs() < 1e-15);
        assert_eq!(d.rotation_at(30), d.rotation_at(14));
    }

    #[test]
    fn latency_percentiles() {
        let s = LatencyStats::from_samples((1..=100).map(f64::from).collect());
        assert_eq!(s.samples, 100);
        assert_eq!(s.max, 100.0);
        assert_eq!(s.p50, 51.0);
        assert_eq!(s.p99, 99.0);
    }
}
