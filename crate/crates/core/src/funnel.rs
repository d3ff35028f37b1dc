//! Polytopic funnel around the nominal trajectory.
//!
//! Each step carries a zonotope `Y_i = {x̄_i} ⊕ G_i ℙ` with `ℙ = [−1, 1]^n`
//! and an affine law `u = ū_i + θ_i p`. The generators and gains come from a
//! single sparse LP over the nominal linearization; [`verify_prop1`] then
//! checks empirically how far the cubes must shrink for the nonlinear plant.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, SMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    plant_step, sx, ControlInput, InputVec, PlantParams, PlantState, StateVec, NU, NX,
};
use crate::lp::{solve_with, Backend, LpError, LpProblem, LpStatus};
use crate::pwa::{HPolytope, PwaTable};
use crate::trajopt::{NominalTrajectory, TrajectoryLimits};

pub type GainMatrix = SMatrix<f64, NU, NX>;
pub type StateMatrix = SMatrix<f64, NX, NX>;

/// Smallest admissible singular value of a generator.
pub const SIGMA_MIN: f64 = 1e-6;
/// Slack of the membership and containment tests.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FunnelError {
    #[error("funnel synthesis infeasible: {family} at step {step}")]
    SynthesisInfeasible { family: String, step: usize },
    #[error("generator of step {step} is rank deficient (smallest singular value {sigma:.3e})")]
    RankDeficient { step: usize, sigma: f64 },
    #[error("no shrink factor above the floor at step {step}; worst sample lands at {ratio:.4} of the next cube")]
    CertificationFailed {
        step: usize,
        sample: Vec<f64>,
        ratio: f64,
    },
    #[error("invalid funnel: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("could not parse funnel policy: {0}")]
    Parse(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// True iff `{center} ⊕ G[−1, 1]^k ⊆ poly` up to `tol`.
///
/// Uses the support function `H_k·center + Σ_c |H_k·G_c|`, exact for
/// zonotopes.
pub fn zonotope_in_hpolytope(center: &[f64], g: &DMatrix<f64>, poly: &HPolytope, tol: f64) -> bool {
    containment_violation(center, g, poly) <= tol
}

/// `max_k (H_k·center + Σ_c |H_k·G_c| − h_k)`, or `-inf` without rows.
pub fn containment_violation(center: &[f64], g: &DMatrix<f64>, poly: &HPolytope) -> f64 {
    assert_eq!(center.len(), poly.dim, "center dimension");
    assert_eq!(g.nrows(), poly.dim, "generator dimension");
    poly.lhs
        .iter()
        .zip(&poly.rhs)
        .map(|(row, h)| {
            let c: f64 = row.iter().zip(center).map(|(a, b)| a * b).sum();
            let s: f64 = (0..g.ncols())
                .map(|j| {
                    row.iter()
                        .enumerate()
                        .map(|(r, a)| a * g[(r, j)])
                        .sum::<f64>()
                        .abs()
                })
                .sum();
            c + s - h
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The goal thickened to `|θ − θ_G| <= tol_goal`, `|φ − φ_G| <= tol_goal`.
pub fn goal_polytope(limits: &TrajectoryLimits) -> HPolytope {
    let mut lo = [f64::NEG_INFINITY; NX];
    let mut hi = [f64::INFINITY; NX];
    lo[sx::THETA] = limits.goal_theta - limits.tol_goal;
    hi[sx::THETA] = limits.goal_theta + limits.tol_goal;
    lo[sx::PHI] = limits.goal_phi - limits.tol_goal;
    hi[sx::PHI] = limits.goal_phi + limits.tol_goal;
    HPolytope::from_box(&lo, &hi)
}

/// Physical state limits applied at every step: an open, non-negative
/// finger separation below `max_width`.
pub fn default_state_bounds(max_width: f64) -> HPolytope {
    let mut lo = [f64::NEG_INFINITY; NX];
    let mut hi = [f64::INFINITY; NX];
    lo[sx::W] = 0.0;
    hi[sx::W] = max_width;
    HPolytope::from_box(&lo, &hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunnelOptions {
    /// Half-widths of the box around each center that `Y_i` must stay in,
    /// keeping the funnel where the linearization is meaningful. Also the
    /// per-channel scaling of the synthesis LP.
    pub trust: [f64; NX],
    /// Per-channel scaling of the gains.
    pub input_scale: [f64; NU],
    /// Row diagonal-dominance margin of every scaled generator `D⁻¹ G_i`;
    /// keeps the generators invertible, which the trace objective alone
    /// does not.
    pub dominance: f64,
    pub sigma_min: f64,
    /// Rows whose margin at the nominal point falls below this (in scaled
    /// units) pin the generator or gain rows they touch to zero.
    pub tight_margin: f64,
    pub lp_tol: f64,
}

impl Default for FunnelOptions {
    fn default() -> Self {
        Self {
            trust: [1e-3, 1e-3, 5e-3, 0.05, 0.05, 0.5, 0.02, 5e-4],
            input_scale: [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1e-2],
            dominance: 1e-3,
            sigma_min: SIGMA_MIN,
            tight_margin: 1e-6,
            lp_tol: 1e-9,
        }
    }
}

impl FunnelOptions {
    pub fn validate(&self) -> Result<(), FunnelError> {
        let pos = |v: &[f64]| v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !pos(&self.trust) || !pos(&self.input_scale) {
            return Err(FunnelError::Invalid(
                "trust widths and input scales must be positive".into(),
            ));
        }
        if !(self.dominance > 0.0 && self.dominance < 1.0) {
            return Err(FunnelError::Invalid(
                "dominance margin must lie in (0, 1)".into(),
            ));
        }
        if !(self.sigma_min > 0.0 && self.tight_margin >= 0.0 && self.lp_tol > 0.0) {
            return Err(FunnelError::Invalid("thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Backward shrink factors `a_0 <= … <= a_N = 1` with per-step statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShrinkSchedule {
    pub a: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    /// Samples of step `i` that left `Y_{i+1}` at the unshrunk `a_{i+1}`.
    pub failures: Vec<usize>,
    /// Largest `‖p_{i+1}‖∞ / a_{i+1}` over the samples at the accepted `a_i`.
    pub worst_ratio: Vec<f64>,
}

impl ShrinkSchedule {
    pub fn validate(&self) -> Result<(), String> {
        let Some(&last) = self.a.last() else {
            return Err("empty schedule".into());
        };
        if last != 1.0 {
            return Err(format!("a_N = {last}, expected 1"));
        }
        if self.a.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err("shrink factors must lie in (0, 1]".into());
        }
        if let Some(k) = (1..self.a.len()).find(|&k| self.a[k - 1] > self.a[k]) {
            return Err(format!("schedule decreases at step {k}"));
        }
        if self.failures.len() + 1 != self.a.len() || self.worst_ratio.len() + 1 != self.a.len() {
            return Err("statistics length does not match the schedule".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunnelPolicy {
    pub n: usize,
    pub dt: f64,
    pub centers: Vec<[f64; NX]>,
    pub controls: Vec<[f64; NU]>,
    /// Row-major generators, `N + 1` of them.
    #[serde(rename = "G")]
    pub g: Vec<[[f64; NX]; NX]>,
    /// Row-major gains, one per step `0..N−1`.
    pub theta: Vec<[[f64; NX]; NU]>,
    pub goal: HPolytope,
    pub schedule: Option<ShrinkSchedule>,
    pub config_hash: String,
}

impl FunnelPolicy {
    pub fn center(&self, i: usize) -> StateVec {
        StateVec::from(self.centers[i])
    }

    pub fn control(&self, i: usize) -> InputVec {
        InputVec::from(self.controls[i])
    }

    pub fn generator(&self, i: usize) -> StateMatrix {
        StateMatrix::from_fn(|r, c| self.g[i][r][c])
    }

    pub fn gain(&self, i: usize) -> GainMatrix {
        GainMatrix::from_fn(|r, c| self.theta[i][r][c])
    }

    /// `ū_i + θ_i p`.
    pub fn law(&self, i: usize, p: &StateVec) -> InputVec {
        self.control(i) + self.gain(i) * p
    }

    /// `x̄_i + G_i p`.
    pub fn point(&self, i: usize, p: &StateVec) -> StateVec {
        self.center(i) + self.generator(i) * p
    }

    pub fn min_singular_value(&self, i: usize) -> f64 {
        self.generator(i).singular_values().min()
    }

    /// Structural checks that need no dynamics: shapes, finiteness, full
    /// rank, terminal containment and a monotone schedule.
    pub fn validate(&self) -> Result<(), FunnelError> {
        let bad = |m: String| Err(FunnelError::Invalid(m));
        let n = self.n;
        if n == 0 {
            return bad("empty horizon".into());
        }
        if self.centers.len() != n + 1 || self.g.len() != n + 1 {
            return bad(format!("expected {} centers and generators", n + 1));
        }
        if self.controls.len() != n || self.theta.len() != n {
            return bad(format!("expected {n} controls and gains"));
        }
        if self.goal.dim != NX {
            return bad(format!(
                "goal has dimension {}, expected {NX}",
                self.goal.dim
            ));
        }
        self.goal
            .validate()
            .map_err(|e| FunnelError::Invalid(format!("goal: {e}")))?;
        let finite = self
            .centers
            .iter()
            .flatten()
            .chain(self.controls.iter().flatten())
            .all(|v| v.is_finite())
            && self
                .g
                .iter()
                .flatten()
                .flatten()
                .chain(self.theta.iter().flatten().flatten())
                .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite entries".into());
        }
        for i in 0..=n {
            let sigma = self.min_singular_value(i);
            if sigma < SIGMA_MIN {
                return Err(FunnelError::RankDeficient { step: i, sigma });
            }
        }
        if !self.terminal_in_goal() {
            return bad("terminal zonotope leaves the goal".into());
        }
        if let Some(s) = &self.schedule {
            if s.a.len() != n + 1 {
                return bad(format!(
                    "schedule has {} entries, expected {}",
                    s.a.len(),
                    n + 1
                ));
            }
            s.validate().map_err(FunnelError::Invalid)?;
        }
        Ok(())
    }

    pub fn terminal_in_goal(&self) -> bool {
        self.goal_margin() >= -MEMBERSHIP_TOL
    }

    /// Smallest slack of `Y_N` against the goal rows; negative when it sticks out.
    pub fn goal_margin(&self) -> f64 {
        let g = DMatrix::from_fn(NX, NX, |r, c| self.g[self.n][r][c]);
        -containment_violation(&self.centers[self.n], &g, &self.goal)
    }

    /// `max_i ‖G_{i+1} − (A_i G_i + B_i θ_i)‖_max` under the nominal cells.
    pub fn recursion_residual(&self, pwa: &PwaTable) -> f64 {
        (0..self.n)
            .map(|i| {
                let d = pwa.nominal(i);
                (self.generator(i + 1)
                    - (d.a_matrix() * self.generator(i) + d.b_matrix() * self.gain(i)))
                .abs()
                .max()
            })
            .fold(0.0, f64::max)
    }
}

/// `p` with `x = x̄_i + G_i p` and `‖p‖∞ <= 1`, if any.
pub fn membership(
    policy: &FunnelPolicy,
    i: usize,
    x: &StateVec,
) -> Result<Option<StateVec>, FunnelError> {
    let p = coordinates(policy, i, x)?;
    Ok((p.amax() <= 1.0 + MEMBERSHIP_TOL).then_some(p))
}

/// Solves `G_i p = x − x̄_i`.
pub fn coordinates(policy: &FunnelPolicy, i: usize, x: &StateVec) -> Result<StateVec, FunnelError> {
    let g = policy.generator(i);
    let rank_err = || FunnelError::RankDeficient {
        step: i,
        sigma: g.singular_values().min(),
    };
    let p = g.lu().solve(&(x - policy.center(i))).ok_or_else(rank_err)?;
    if p.iter().all(|v| v.is_finite()) {
        Ok(p)
    } else {
        Err(rank_err())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Block {
    Generator,
    Gain,
}

/// A containment row `w·M_c` summed in absolute value over the columns
/// `c` of one decision matrix.
struct Family {
    name: &'static str,
    block: Block,
    step: usize,
    center: Vec<f64>,
    poly: HPolytope,
}

struct Assembly {
    n: usize,
    nvars: usize,
    le: Vec<(Vec<(usize, f64)>, f64)>,
    eq: Vec<(Vec<(usize, f64)>, f64)>,
    unit_aux: HashMap<(Block, usize, usize), usize>,
    pinned: Vec<bool>,
}

impl Assembly {
    fn new(n: usize) -> Self {
        let nvars = (n + 1) * NX * NX + n * NU * NX;
        Self {
            n,
            nvars,
            le: Vec::new(),
            eq: Vec::new(),
            unit_aux: HashMap::new(),
            pinned: vec![false; nvars],
        }
    }

    fn var(&self, block: Block, step: usize, r: usize, c: usize) -> usize {
        match block {
            Block::Generator => step * NX * NX + r * NX + c,
            Block::Gain => (self.n + 1) * NX * NX + step * NU * NX + r * NX + c,
        }
    }

    /// `NX` auxiliaries `t_c >= |Σ_r w_r M[r, c]|`; returns the first index.
    fn abs_aux(&mut self, block: Block, step: usize, w: &[(usize, f64)]) -> usize {
        let base = self.nvars;
        self.nvars += NX;
        self.pinned.extend([false; NX]);
        for c in 0..NX {
            for sign in [1.0, -1.0] {
                let mut row: Vec<(usize, f64)> = w
                    .iter()
                    .map(|&(r, v)| (self.var(block, step, r, c), sign * v))
                    .collect();
                row.push((base + c, -1.0));
                self.le.push((row, 0.0));
            }
        }
        base
    }

    /// Auxiliaries `t_c >= |M[r, c]|`, shared by every row touching only `r`.
    fn entry_aux(&mut self, block: Block, step: usize, r: usize) -> usize {
        if let Some(&b) = self.unit_aux.get(&(block, step, r)) {
            return b;
        }
        let b = self.abs_aux(block, step, &[(r, 1.0)]);
        self.unit_aux.insert((block, step, r), b);
        b
    }

    /// `M[r, r] − Σ_{c≠r} |M[r, c]| >= margin` for every row.
    fn dominance(&mut self, step: usize, margin: f64) {
        for r in 0..NX {
            let base = self.entry_aux(Block::Generator, step, r);
            let mut row: Vec<(usize, f64)> = (0..NX)
                .filter(|&c| c != r)
                .map(|c| (base + c, 1.0))
                .collect();
            row.push((self.var(Block::Generator, step, r, r), -1.0));
            self.le.push((row, -margin));
        }
    }

    /// Support-function row `Σ_c |w·M_c| <= bound`.
    fn containment(&mut self, block: Block, step: usize, w: Vec<(usize, f64)>, bound: f64) {
        let (base, scale) = if let [(r, v)] = w[..] {
            (self.entry_aux(block, step, r), v.abs())
        } else {
            (self.abs_aux(block, step, &w), 1.0)
        };
        let row = (0..NX).map(|c| (base + c, scale)).collect();
        self.le.push((row, bound));
    }

    fn pin_row(&mut self, block: Block, step: usize, r: usize) {
        for c in 0..NX {
            let v = self.var(block, step, r, c);
            self.pinned[v] = true;
        }
    }
}

/// Synthesizes generators and gains along the nominal trajectory.
///
/// `state_bounds` applies at every step, `goal` to `Y_N`. The LP maximizes
/// `Σ_i trace(D⁻¹ G_i)` with `D = diag(opts.trust)` subject to a row
/// diagonal-dominance floor on `D⁻¹ G_i`; the result is propagated exactly
/// through the recursion and scaled uniformly so every containment holds
/// without solver slack.
pub fn synthesize(
    pwa: &PwaTable,
    traj: &NominalTrajectory,
    goal: &HPolytope,
    state_bounds: &HPolytope,
    opts: &FunnelOptions,
) -> Result<FunnelPolicy, FunnelError> {
    opts.validate()?;
    let n = traj.n;
    if pwa.n != n {
        return Err(FunnelError::Invalid(format!(
            "table covers {} steps, trajectory {n}",
            pwa.n
        )));
    }
    if goal.dim != NX || state_bounds.dim != NX {
        return Err(FunnelError::Invalid(
            "goal and state bounds must be state polytopes".into(),
        ));
    }
    let families = families(pwa, traj, goal, state_bounds, opts);
    for f in &families {
        let strict = f.name == "goal";
        let v = f.poly.max_violation(&f.center);
        if v > MEMBERSHIP_TOL || (strict && v >= 0.0) {
            return Err(FunnelError::SynthesisInfeasible {
                family: f.name.into(),
                step: f.step,
            });
        }
    }

    let d = opts.trust;
    let e = opts.input_scale;
    let mut asm = Assembly::new(n);
    for f in &families {
        let scale: &[f64] = if f.block == Block::Generator { &d } else { &e };
        let margin = |k: usize| {
            f.poly.rhs[k]
                - f.poly.lhs[k]
                    .iter()
                    .zip(&f.center)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        };
        let opposite = |j: usize, k: usize| {
            f.poly.lhs[j]
                .iter()
                .zip(&f.poly.lhs[k])
                .all(|(a, b)| *a == -*b)
        };
        for (k, row) in f.poly.lhs.iter().enumerate() {
            // the two faces of a slab share one support row
            if (0..k).any(|j| opposite(j, k)) {
                continue;
            }
            let slab = margin(k).min(
                (k + 1..f.poly.nrows())
                    .filter(|&j| opposite(j, k))
                    .map(margin)
                    .fold(f64::INFINITY, f64::min),
            );
            let w: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .filter(|(_, a)| **a != 0.0)
                .map(|(r, a)| (r, a * scale[r]))
                .collect();
            let norm = w.iter().fold(0.0f64, |m, (_, v)| m.max(v.abs()));
            if norm == 0.0 {
                continue;
            }
            let w: Vec<(usize, f64)> = w.into_iter().map(|(r, v)| (r, v / norm)).collect();
            let bound = slab / norm;
            if bound < opts.tight_margin {
                for &(r, _) in &w {
                    asm.pin_row(f.block, f.step, r);
                }
                continue;
            }
            asm.containment(f.block, f.step, w, bound);
        }
    }

    for i in 0..=n {
        asm.dominance(i, opts.dominance);
    }

    // scaled recursion G̃_{i+1} = D⁻¹ A D G̃_i + D⁻¹ B E θ̃_i
    for i in 0..n {
        let dyn_i = pwa.nominal(i);
        for r in 0..NX {
            for c in 0..NX {
                let mut row = vec![(asm.var(Block::Generator, i + 1, r, c), 1.0)];
                for k in 0..NX {
                    let a = dyn_i.a[r][k] * d[k] / d[r];
                    if a != 0.0 {
                        row.push((asm.var(Block::Generator, i, k, c), -a));
                    }
                }
                for k in 0..NU {
                    let b = dyn_i.b[r][k] * e[k] / d[r];
                    if b != 0.0 {
                        row.push((asm.var(Block::Gain, i, k, c), -b));
                    }
                }
                asm.eq.push((row, 0.0));
            }
        }
    }

    let mut lp = LpProblem::new(asm.nvars);
    for i in 0..=n {
        for r in 0..NX {
            lp.cost[asm.var(Block::Generator, i, r, r)] = -1.0;
        }
    }
    for (v, pinned) in asm.pinned.iter().enumerate() {
        if *pinned {
            lp.set_bounds(v, 0.0, 0.0);
        }
    }
    for (row, b) in &asm.le {
        lp.add_le(row, *b);
    }
    for (row, b) in &asm.eq {
        lp.add_eq(row, *b);
    }
    let sol = solve_with(&lp, opts.lp_tol, Backend::InteriorPoint)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            // the zero funnel satisfies everything but the dominance floor
            return Err(FunnelError::SynthesisInfeasible {
                family: "diagonal dominance".into(),
                step: 0,
            });
        }
        LpStatus::Unbounded => {
            return Err(FunnelError::Invalid("synthesis LP is unbounded".into()))
        }
    }

    let z = &sol.point;
    let read = |v: usize| if asm.pinned[v] { 0.0 } else { z[v] };
    let g0 = StateMatrix::from_fn(|r, c| read(asm.var(Block::Generator, 0, r, c)) * d[r]);
    let gains: Vec<GainMatrix> = (0..n)
        .map(|i| GainMatrix::from_fn(|r, c| read(asm.var(Block::Gain, i, r, c)) * e[r]))
        .collect();
    let mut gens = vec![g0];
    for i in 0..n {
        let dyn_i = pwa.nominal(i);
        gens.push(dyn_i.a_matrix() * gens[i] + dyn_i.b_matrix() * gains[i]);
    }

    // uniform shrink removes the solver's residual slack
    let mut s: f64 = 1.0;
    for f in &families {
        let m = match f.block {
            Block::Generator => DMatrix::from_fn(NX, NX, |r, c| gens[f.step][(r, c)]),
            Block::Gain => DMatrix::from_fn(NU, NX, |r, c| gains[f.step][(r, c)]),
        };
        for (row, h) in f.poly.lhs.iter().zip(&f.poly.rhs) {
            let margin = h - row.iter().zip(&f.center).map(|(a, b)| a * b).sum::<f64>();
            let support: f64 = (0..NX)
                .map(|c| {
                    row.iter()
                        .enumerate()
                        .map(|(r, a)| a * m[(r, c)])
                        .sum::<f64>()
                        .abs()
                })
                .sum();
            if support > 0.0 && support > margin {
                s = s.min(margin.max(0.0) / support);
            }
        }
    }
    let policy = FunnelPolicy {
        n,
        dt: traj.dt,
        centers: traj.states.clone(),
        controls: traj.controls.clone(),
        g: gens.iter().map(|m| rows(&(m * s))).collect(),
        theta: gains.iter().map(|m| rows(&(m * s))).collect(),
        goal: goal.clone(),
        schedule: None,
        config_hash: traj.config_hash.clone(),
    };
    for i in 0..=n {
        let sigma = policy.min_singular_value(i);
        if sigma < opts.sigma_min {
            return Err(FunnelError::RankDeficient { step: i, sigma });
        }
    }
    Ok(policy)
}

fn rows<const R: usize>(m: &SMatrix<f64, R, NX>) -> [[f64; NX]; R] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

fn trust_box(center: &[f64; NX], trust: &[f64; NX]) -> HPolytope {
    let lo: Vec<f64> = center.iter().zip(trust).map(|(c, t)| c - t).collect();
    let hi: Vec<f64> = center.iter().zip(trust).map(|(c, t)| c + t).collect();
    HPolytope::from_box(&lo, &hi)
}

fn families(
    pwa: &PwaTable,
    traj: &NominalTrajectory,
    goal: &HPolytope,
    state_bounds: &HPolytope,
    opts: &FunnelOptions,
) -> Vec<Family> {
    let mut out = Vec::new();
    for i in 0..=traj.n {
        let x = traj.states[i].to_vec();
        let state = |name, poly| Family {
            name,
            block: Block::Generator,
            step: i,
            center: x.clone(),
            poly,
        };
        out.push(state("state bounds", state_bounds.clone()));
        out.push(state(
            "trust region",
            trust_box(&traj.states[i], &opts.trust),
        ));
        if i < traj.n {
            let cell = &pwa.cell(i, 1).constraints;
            out.push(state("contact gap", cell.leading(NX)));
            out.push(Family {
                name: "input limits",
                block: Block::Gain,
                step: i,
                center: traj.controls[i].to_vec(),
                poly: cell.trailing(NX),
            });
        } else {
            out.push(state("goal", goal.clone()));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyOptions {
    pub samples: usize,
    pub seed: u64,
    /// Bisection stops once the bracket is this fraction of `a_{i+1}`.
    pub bisection_tol: f64,
    pub a_floor: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            samples: 4096,
            seed: 0,
            bisection_tol: 1e-3,
            a_floor: 1e-3,
        }
    }
}

/// Unit-cube samples of step `i`: every fourth one a vertex, the rest
/// uniform. A larger count extends a smaller one.
pub fn certification_samples(i: usize, count: usize, seed: u64) -> Vec<StateVec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    (0..count)
        .map(|s| {
            if s % 4 == 0 {
                StateVec::from_fn(|_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            } else {
                StateVec::from_fn(|_, _| rng.gen_range(-1.0..=1.0))
            }
        })
        .collect()
}

/// Sampled shrink-schedule certification against the full plant.
pub fn verify_prop1(
    policy: &FunnelPolicy,
    params: &PlantParams,
    samples: usize,
    seed: u64,
) -> Result<ShrinkSchedule, FunnelError> {
    let opts = VerifyOptions {
        samples,
        seed,
        ..Default::default()
    };
    verify_plant(policy, params, &opts)
}

/// [`verify_with`] against the full plant.
pub fn verify_plant(
    policy: &FunnelPolicy,
    params: &PlantParams,
    opts: &VerifyOptions,
) -> Result<ShrinkSchedule, FunnelError> {
    verify_with(policy, opts, |_, x, u| {
        plant_step(
            &PlantState::from_vector(x),
            &ControlInput::from_vector(u),
            params,
        )
        .to_vector()
    })
}

/// Backward bisection of the shrink factors for an arbitrary one-step map.
pub fn verify_with<F>(
    policy: &FunnelPolicy,
    opts: &VerifyOptions,
    step: F,
) -> Result<ShrinkSchedule, FunnelError>
where
    F: Fn(usize, &StateVec, &InputVec) -> StateVec + Sync,
{
    if opts.samples == 0 {
        return Err(FunnelError::Invalid(
            "at least one sample is required".into(),
        ));
    }
    if !(opts.bisection_tol > 0.0 && opts.a_floor > 0.0 && opts.a_floor <= 1.0) {
        return Err(FunnelError::Invalid(
            "bisection tolerance and floor must be positive".into(),
        ));
    }
    let n = policy.n;
    let mut a = vec![1.0; n + 1];
    let mut failures = vec![0; n];
    let mut worst_ratio = vec![0.0; n];
    for i in (0..n).rev() {
        let next = a[i + 1];
        let base = certification_samples(i, opts.samples, opts.seed);
        // ‖p_{i+1}‖∞ / a_{i+1} for every sample at shrink factor `s`
        let ratios = |s: f64| -> Result<Vec<f64>, FunnelError> {
            base.par_iter()
                .map(|u| {
                    let p = u * s;
                    let x = policy.point(i, &p);
                    let xn = step(i, &x, &policy.law(i, &p));
                    let q = coordinates(policy, i + 1, &xn)?;
                    Ok(if q.iter().all(|v| v.is_finite()) {
                        q.amax() / next
                    } else {
                        f64::INFINITY
                    })
                })
                .collect()
        };
        let passes = |r: &[f64]| r.iter().all(|v| *v <= 1.0 + MEMBERSHIP_TOL);
        let first = ratios(next)?;
        failures[i] = first.iter().filter(|v| **v > 1.0 + MEMBERSHIP_TOL).count();
        let (accepted, worst) =
            if passes(&first) {
                (next, first)
            } else {
                let (mut lo, mut hi) = (0.0, next);
                let mut best: Option<Vec<f64>> = None;
                while hi - lo > opts.bisection_tol * next {
                    let mid = 0.5 * (lo + hi);
                    let r = ratios(mid)?;
                    if passes(&r) {
                        lo = mid;
                        best = Some(r);
                    } else {
                        hi = mid;
                    }
                }
                if lo < opts.a_floor && opts.a_floor <= next {
                    let r = ratios(opts.a_floor)?;
                    if passes(&r) {
                        lo = opts.a_floor;
                        best = Some(r);
                    }
                }
                match best {
                    Some(r) if lo >= opts.a_floor => (lo, r),
                    _ => {
                        let r = ratios(opts.a_floor.min(next))?;
                        let (k, ratio) = r.iter().enumerate().fold(
                            (0, f64::NEG_INFINITY),
                            |(bk, bv), (k, v)| if *v > bv { (k, *v) } else { (bk, bv) },
                        );
                        let sample = (base[k] * opts.a_floor.min(next)).iter().copied().collect();
                        return Err(FunnelError::CertificationFailed {
                            step: i,
                            sample,
                            ratio,
                        });
                    }
                }
            };
        a[i] = accepted;
        worst_ratio[i] = worst.iter().copied().fold(0.0, f64::max);
    }
    Ok(ShrinkSchedule {
        a,
        samples: opts.samples,
        seed: opts.seed,
        failures,
        worst_ratio,
    })
}

pub fn save_policy(policy: &FunnelPolicy, path: &Path) -> Result<(), FunnelError> {
    let text = serde_json::to_string(policy).map_err(|e| FunnelError::Parse(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| FunnelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_policy(path: &Path) -> Result<FunnelPolicy, FunnelError> {
    let text = std::fs::read_to_string(path).map_err(|source| FunnelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let policy: FunnelPolicy =
        serde_json::from_str(&text).map_err(|e| FunnelError::Parse(e.to_string()))?;
    policy.validate()?;
    Ok(policy)
}

/// `i,a,failures,worst_ratio` per step of a shrink schedule.
pub fn write_schedule_csv<W: std::io::Write>(
    schedule: &ShrinkSchedule,
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["i", "a", "failures", "worst_ratio"])?;
    for (i, a) in schedule.a.iter().enumerate() {
        let fail = schedule
            .failures
            .get(i)
            .map(|v| v.to_string())
            .unwrap_or_default();
        let worst = schedule
            .worst_ratio
            .get(i)
            .map(|v| v.to_string())
            .unwrap_or_default();
        w.write_record([i.to_string(), a.to_string(), fail, worst])?;
    }
    w.flush()?;
    Ok(())
}
