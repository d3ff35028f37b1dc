//! Online stabilizing controller.
//!
//! Each tick either applies the funnel law of the latest polytope containing
//! the state, or looks up the closest nominal state, detects the contact
//! mode and solves a small tracking LP through that cell's affine dynamics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    detect_mode, su, sx, ControlInput, InputVec, PlantParams, PlantState, StateVec, NU, NX,
};
use crate::funnel::{coordinates, membership, FunnelError, FunnelPolicy, MEMBERSHIP_TOL};
use crate::lp::{lp_solve, LpError, LpProblem, LpStatus, DEFAULT_TOL_FEAS};
use crate::pwa::PwaTable;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
    #[error("state is not finite")]
    NonFiniteState,
    #[error("policy and PWA table disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Funnel(#[from] FunnelError),
    #[error(transparent)]
    Lp(#[from] LpError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Track the next polytope `Y_v`.
    FunnelTrack,
    /// Track the next nominal point `x̄_v`.
    PointTrack,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputBounds {
    pub lo: [f64; NU],
    pub hi: [f64; NU],
}

impl Default for InputBounds {
    fn default() -> Self {
        Self {
            lo: [0.0, -2.5, 0.0, -2.5, 0.0, -2.5, -3.0, -0.2],
            hi: [5.0, 2.5, 5.0, 2.5, 5.0, 2.5, 3.0, 0.2],
        }
    }
}

impl InputBounds {
    pub fn clamp(&self, u: &InputVec) -> InputVec {
        InputVec::from_fn(|k, _| u[k].clamp(self.lo[k], self.hi[k]))
    }

    pub fn contains(&self, u: &InputVec, tol: f64) -> bool {
        (0..NU).all(|k| u[k] >= self.lo[k] - tol && u[k] <= self.hi[k] + tol)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub strategy: Strategy,
    /// Diagonal of the nearest-state metric.
    pub weights: [f64; NX],
    /// Cost of the per-channel residual bounds `γ`.
    pub alpha: [f64; NX],
    pub input_bounds: InputBounds,
    /// Largest finger separation `c` of the execution goal, metres.
    pub max_width: f64,
    /// Alignment tolerance `|φ − θ|` of the execution goal, radians.
    pub tol_goal: f64,
    /// Weight of `Σ|u − ū_i|` in the tracking LP; selects the nominal
    /// command among equally good ones.
    pub reg_weight: f64,
    /// Proportional gain of the degraded recovery on `φ` and `w`, 1/s.
    pub recovery_gain: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        // positions in cm, angles in degrees / 10
        let pos = 1e4;
        let ang = (18.0 / std::f64::consts::PI).powi(2);
        Self {
            strategy: Strategy::FunnelTrack,
            weights: [pos, pos, ang, 0.1, 0.1, 0.1, ang, pos],
            alpha: [1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 1.0, 1.0],
            input_bounds: InputBounds::default(),
            max_width: 0.08,
            tol_goal: 2f64.to_radians(),
            reg_weight: 1e-3,
            recovery_gain: 10.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::InvalidConfig(m.into()));
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return bad("weights must be positive");
        }
        if self.alpha.iter().any(|a| !(*a >= 0.0 && a.is_finite()))
            || self.alpha.iter().all(|a| *a == 0.0)
        {
            return bad("alpha must be non-negative and not all zero");
        }
        if !(self.max_width > 0.0) || !(self.tol_goal > 0.0) {
            return bad("goal width and tolerance must be positive");
        }
        if !(self.reg_weight >= 0.0) || !(self.recovery_gain >= 0.0) {
            return bad("regularizer and recovery gain must be non-negative");
        }
        if (0..NU).any(|k| !(self.input_bounds.lo[k] <= self.input_bounds.hi[k])) {
            return bad("input bounds are empty");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Branch {
    /// `u = ū_i + θ_i p(x)` inside `Y_i`.
    FunnelLaw {
        i: usize,
    },
    /// LP toward the polytope `Y_v`.
    TrackPolytope {
        i: usize,
        v: usize,
    },
    /// LP toward the point `x̄_v`.
    TrackPoint {
        i: usize,
        v: usize,
    },
    /// Tracking LP failed; proportional recovery on the gripper channels.
    Degraded {
        i: usize,
        v: usize,
    },
    GoalReached,
    /// Replayed nominal command `ū_i`; the open-loop baseline.
    OpenLoop {
        i: usize,
    },
}

impl Branch {
    pub fn name(&self) -> &'static str {
        match self {
            Branch::FunnelLaw { .. } => "funnel_law",
            Branch::TrackPolytope { .. } => "track_polytope",
            Branch::TrackPoint { .. } => "track_point",
            Branch::Degraded { .. } => "degraded",
            Branch::GoalReached => "goal_reached",
            Branch::OpenLoop { .. } => "open_loop",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub u: ControlInput,
    pub branch: Branch,
    pub closest_index: usize,
    pub mode_id: usize,
    pub lp_objective: Option<f64>,
}

/// `X̃_G = {|φ − θ| <= tol_goal, w <= c}`, closed.
pub fn goal_reached(x: &PlantState, cfg: &ControllerConfig) -> bool {
    (x.phi - x.theta).abs() <= cfg.tol_goal && x.w <= cfg.max_width
}

/// Index of the nearest center under `W`; ties go to the later index.
pub fn closest_index(x: &StateVec, centers: &[[f64; NX]], weights: &[f64; NX]) -> usize {
    assert!(!centers.is_empty(), "empty trajectory");
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d: f64 = (0..NX).map(|k| weights[k] * (x[k] - c[k]).powi(2)).sum();
        if d <= best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Tracking LP toward index `v` through the cell `(i, j)`.
///
/// Variables: `u` (0..8), `γ` (8..16), `r >= |u − ū_i|` (16..24) and, for
/// [`Strategy::FunnelTrack`], `p ∈ ℙ` (24..32). Minimizes
/// `αᵀγ + β Σ r` subject to `|A x + B u + c − x̄_v − G_v p| <= γ`, the
/// cell's input rows and the input bounds.
pub fn tracking_lp(
    x: &StateVec,
    policy: &FunnelPolicy,
    pwa: &PwaTable,
    i: usize,
    j: usize,
    v: usize,
    cfg: &ControllerConfig,
) -> LpProblem {
    let track_set = cfg.strategy == Strategy::FunnelTrack;
    let (ou, og, or, op) = (0, NX, 2 * NX, 3 * NX);
    let nvars = if track_set { 4 * NX } else { 3 * NX };
    let cell = pwa.cell(i.min(pwa.n - 1), j);
    let d = &cell.dynamics;
    let ubar = policy.controls[i.min(policy.n - 1)];
    let target = policy.center(v);
    let g = policy.generator(v);
    let drift = d.a_matrix() * x + d.c_vector() - target;

    let mut lp = LpProblem::new(nvars);
    for k in 0..NX {
        lp.cost[og + k] = cfg.alpha[k];
        lp.cost[or + k] = cfg.reg_weight;
        lp.set_bounds(og + k, 0.0, f64::INFINITY);
        lp.set_bounds(or + k, 0.0, f64::INFINITY);
    }
    for k in 0..NU {
        lp.set_bounds(ou + k, cfg.input_bounds.lo[k], cfg.input_bounds.hi[k]);
    }
    if track_set {
        for k in 0..NX {
            lp.set_bounds(op + k, -1.0, 1.0);
        }
    }
    for k in 0..NX {
        // ±(B u − G p + drift)_k <= γ_k
        for sign in [1.0, -1.0] {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(2 * NX + 1);
            for c in 0..NU {
                if d.b[k][c] != 0.0 {
                    row.push((ou + c, sign * d.b[k][c]));
                }
            }
            if track_set {
                for c in 0..NX {
                    if g[(k, c)] != 0.0 {
                        row.push((op + c, -sign * g[(k, c)]));
                    }
                }
            }
            row.push((og + k, -1.0));
            lp.add_le(&row, -sign * drift[k]);
        }
    }
    for k in 0..NU {
        lp.add_le(&[(ou + k, 1.0), (or + k, -1.0)], ubar[k]);
        lp.add_le(&[(ou + k, -1.0), (or + k, -1.0)], -ubar[k]);
    }
    let inputs = cell.constraints.trailing(NX);
    for (row, h) in inputs.lhs.iter().zip(&inputs.rhs) {
        let entries: Vec<(usize, f64)> = row
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != 0.0)
            .map(|(c, a)| (ou + c, *a))
            .collect();
        lp.add_le(&entries, *h);
    }
    lp
}

/// One tick of the controller.
pub fn decide(
    x: &PlantState,
    policy: &FunnelPolicy,
    pwa: &PwaTable,
    params: &PlantParams,
    cfg: &ControllerConfig,
) -> Result<ControlDecision, ControllerError> {
    if !x.is_finite() {
        return Err(ControllerError::NonFiniteState);
    }
    if pwa.n != policy.n {
        return Err(ControllerError::Mismatch(format!(
            "table has {} steps, policy {}",
            pwa.n, policy.n
        )));
    }
    let xv = x.to_vector();
    let n = policy.n;
    let mode_id = detect_mode(x, params).id;
    let closest = closest_index(&xv, &policy.centers, &cfg.weights);

    if goal_reached(x, cfg) {
        let mut hold = policy.controls[closest.min(n - 1)];
        hold[su::PHID] = 0.0;
        hold[su::WD] = 0.0;
        let u = cfg.input_bounds.clamp(&InputVec::from(hold));
        return Ok(ControlDecision {
            u: ControlInput::from_vector(&u),
            branch: Branch::GoalReached,
            closest_index: closest,
            mode_id,
            lp_objective: None,
        });
    }

    // the law exists for i < N only
    for i in (0..n).rev() {
        if let Some(p) = membership(policy, i, &xv)? {
            let p = p.map(|v| v.clamp(-1.0, 1.0));
            let u = policy.law(i, &p);
            debug_assert!({
                let next = pwa.nominal(i).predict(&xv, &u);
                coordinates(policy, i + 1, &next)
                    .map(|q| q.amax() <= 1.0 + 1e-6)
                    .unwrap_or(false)
            });
            return Ok(ControlDecision {
                u: ControlInput::from_vector(&cfg.input_bounds.clamp(&u)),
                branch: Branch::FunnelLaw { i },
                closest_index: closest,
                mode_id,
                lp_objective: None,
            });
        }
    }

    let i = closest;
    let v = (i + 1).min(n);
    let lp = tracking_lp(&xv, policy, pwa, i, mode_id, v, cfg);
    let sol = lp_solve(&lp, DEFAULT_TOL_FEAS)?;
    if sol.status == LpStatus::Optimal {
        let u = InputVec::from_fn(|k, _| sol.point[k]);
        let branch = match cfg.strategy {
            Strategy::FunnelTrack => Branch::TrackPolytope { i, v },
            Strategy::PointTrack => Branch::TrackPoint { i, v },
        };
        return Ok(ControlDecision {
            u: ControlInput::from_vector(&cfg.input_bounds.clamp(&u)),
            branch,
            closest_index: i,
            mode_id,
            lp_objective: Some(sol.objective),
        });
    }

    let target = policy.center(v);
    let mut u = InputVec::from(policy.controls[i.min(n - 1)]);
    u[su::PHID] = cfg.recovery_gain * (target[sx::PHI] - xv[sx::PHI]);
    u[su::WD] = cfg.recovery_gain * (target[sx::W] - xv[sx::W]);
    Ok(ControlDecision {
        u: ControlInput::from_vector(&cfg.input_bounds.clamp(&u)),
        branch: Branch::Degraded { i, v },
        closest_index: i,
        mode_id,
        lp_objective: None,
    })
}

/// `true` when `u` satisfies the input box within the membership slack.
pub fn within_bounds(u: &ControlInput, cfg: &ControllerConfig) -> bool {
    cfg.input_bounds.contains(&u.to_vector(), MEMBERSHIP_TOL)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goal_region_is_closed() {
        let cfg = ControllerConfig::default();
        let mut x = PlantState::from_vector(&StateVec::zeros());
        x.theta = 90f64.to_radians();
        x.phi = 90f64.to_radians();
        x.w = cfg.max_width / 2.0;
        assert!(goal_reached(&x, &cfg));
        x.w = cfg.max_width;
        assert!(goal_reached(&x, &cfg));
        x.phi = 100f64.to_radians();
        assert!(!goal_reached(&x, &cfg));
    }

    #[test]
    fn closest_prefers_later_index_on_ties() {
        let centers = [[0.0; NX], [1.0; NX], [2.0; NX], [3.0; NX], [4.0; NX]];
        let w = [1.0; NX];
        assert_eq!(closest_index(&StateVec::repeat(3.5), &centers, &w), 4);
        assert_eq!(closest_index(&StateVec::repeat(2.0), &centers, &w), 2);
        assert_eq!(closest_index(&StateVec::repeat(-9.0), &centers, &w), 0);
    }

    #[test]
    fn config_validation() {
        assert!(ControllerConfig::default().validate().is_ok());
        let cfg = ControllerConfig {
            alpha: [0.0; NX],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ControllerConfig {
            max_width: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
