use super::al::{ConstrainedProblem, Triplets};
use super::{TrajOptError, TrajOptSpec};
use crate::dynamics::{
    contact_geometry, discrete_dynamics, su, sx, ContactMode, InputVec, PlantParams, PlantState,
    StateVec, NU, NX, TOGGLABLE_CONTACTS,
};

/// Index map of the decision vector: all states, then all controls, then the
/// (ground, right finger) gap pair of every state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
}

impl Layout {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    pub fn state(&self, t: usize, k: usize) -> usize {
        NX * t + k
    }

    pub fn control(&self, t: usize, k: usize) -> usize {
        NX * (self.n + 1) + NU * t + k
    }

    pub fn gap(&self, t: usize, k: usize) -> usize {
        NX * (self.n + 1) + NU * self.n + 2 * t + k
    }

    pub fn len(&self) -> usize {
        NX * (self.n + 1) + NU * self.n + 2 * (self.n + 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// The transcribed program.
///
/// Equalities: integration defects `x_{t+1} − Φ(x_t, u_t)` (8 per step) then
/// gap definitions `g_t − gap(x_t)` (2 per state). Inequalities, all `<= 0`:
/// three two-sided friction cones per step, then the relaxed complementarity
/// rows `g·F − ε <= 0` for the ground and the right finger.
#[derive(Clone, Debug)]
pub struct Nlp {
    pub spec: TrajOptSpec,
    pub params: PlantParams,
    pub layout: Layout,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    mode: ContactMode,
    /// Cone and complementarity limits used while planning; slightly tighter
    /// than the accepted limits so the dynamics closure keeps them.
    mu_plan: (f64, f64),
    eps_plan: f64,
    scale: Vec<f64>,
}

const GAP_SCALE: f64 = 1e-4;

fn state_scale(k: usize) -> f64 {
    match k {
        sx::X | sx::Y => 1e-2,
        sx::XD | sx::YD => 1e-1,
        sx::W => 1e-3,
        _ => 1.0,
    }
}

fn control_scale(k: usize) -> f64 {
    match k {
        su::WD => 1e-2,
        _ => 1.0,
    }
}

pub fn transcribe(spec: &TrajOptSpec, params: &PlantParams) -> Result<Nlp, TrajOptError> {
    spec.validate(params)?;
    let n = spec.horizon;
    let layout = Layout::new(n);
    let inf = f64::INFINITY;
    let mut lower = vec![-inf; layout.len()];
    let mut upper = vec![inf; layout.len()];
    let x0 = spec.initial_state.to_vector();
    for t in 0..=n {
        for k in 0..NX {
            let (lo, hi) = match k {
                sx::PHI => (spec.phi_min, spec.phi_max),
                sx::THETAD => (-spec.max_thetad, spec.max_thetad),
                sx::XD | sx::YD => (-spec.max_lin_vel, spec.max_lin_vel),
                sx::W => (0.0, inf),
                _ => (-inf, inf),
            };
            lower[layout.state(t, k)] = lo;
            upper[layout.state(t, k)] = hi;
        }
        for k in 0..2 {
            lower[layout.gap(t, k)] = spec.gap_min;
            upper[layout.gap(t, k)] = spec.gap_max;
        }
    }
    for k in 0..NX {
        lower[layout.state(0, k)] = x0[k];
        upper[layout.state(0, k)] = x0[k];
    }
    let plan_tol = spec.planning_tol();
    for (k, goal) in [(sx::THETA, spec.goal_theta), (sx::PHI, spec.goal_phi)] {
        let i = layout.state(n, k);
        lower[i] = lower[i].max(goal - plan_tol);
        upper[i] = upper[i].min(goal + plan_tol);
    }
    for t in 0..n {
        for k in [su::FN, su::F1, su::F2] {
            lower[layout.control(t, k)] = 0.0;
            upper[layout.control(t, k)] = spec.max_normal_force;
        }
        lower[layout.control(t, su::PHID)] = -spec.max_phid;
        upper[layout.control(t, su::PHID)] = spec.max_phid;
        lower[layout.control(t, su::WD)] = -spec.max_wd;
        upper[layout.control(t, su::WD)] = spec.max_wd;
    }
    for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
        if lo > hi {
            return Err(TrajOptError::SpecInvalid(format!(
                "empty bound interval on variable {i}: [{lo}, {hi}]"
            )));
        }
    }

    let mut scale = vec![1.0; layout.len()];
    for t in 0..=n {
        for k in 0..NX {
            scale[layout.state(t, k)] = state_scale(k);
        }
        for k in 0..2 {
            scale[layout.gap(t, k)] = GAP_SCALE;
        }
    }
    for t in 0..n {
        for k in 0..NU {
            scale[layout.control(t, k)] = control_scale(k);
        }
    }

    Ok(Nlp {
        spec: spec.clone(),
        params: params.clone(),
        layout,
        lower,
        upper,
        mode: ContactMode::nominal(TOGGLABLE_CONTACTS),
        mu_plan: (0.97 * params.mu_ground, 0.97 * params.mu_finger),
        eps_plan: 0.5 * spec.eps_comp,
        scale,
    })
}

impl Nlp {
    pub fn n_vars(&self) -> usize {
        self.layout.len()
    }

    pub fn defect_rows(&self) -> usize {
        NX * self.spec.horizon
    }

    pub fn gap_rows(&self) -> usize {
        2 * (self.spec.horizon + 1)
    }

    fn x(&self, z: &[f64], t: usize) -> StateVec {
        StateVec::from_fn(|k, _| z[self.layout.state(t, k)])
    }

    fn u(&self, z: &[f64], t: usize) -> InputVec {
        InputVec::from_fn(|k, _| z[self.layout.control(t, k)])
    }

    fn step(&self, x: &StateVec, u: &InputVec) -> StateVec {
        discrete_dynamics(x, u, &self.mode, &self.params)
            .unwrap_or_else(|_| StateVec::from_element(f64::NAN))
    }

    fn gaps(&self, x: &StateVec) -> [f64; 2] {
        match contact_geometry(&PlantState::from_vector(x), &self.params) {
            Ok(g) => [g.ground.gap, g.right.gap],
            Err(_) => [f64::NAN; 2],
        }
    }

    /// Exact transcription objective Σ_t |phi_t − theta_t|.
    pub fn exact_objective(&self, z: &[f64]) -> f64 {
        (0..=self.spec.horizon)
            .map(|t| (z[self.layout.state(t, sx::PHI)] - z[self.layout.state(t, sx::THETA)]).abs())
            .sum()
    }

    /// Central-difference Jacobian of Φ with respect to (x, u), 8 × 16.
    fn step_jacobian(&self, x: &StateVec, u: &InputVec) -> [[f64; NX + NU]; NX] {
        let mut jac = [[0.0; NX + NU]; NX];
        for c in 0..NX + NU {
            let h = 1e-6
                * if c < NX {
                    state_scale(c)
                } else {
                    control_scale(c - NX)
                };
            let (mut xp, mut xm, mut up, mut um) = (*x, *x, *u, *u);
            if c < NX {
                xp[c] += h;
                xm[c] -= h;
            } else {
                up[c - NX] += h;
                um[c - NX] -= h;
            }
            let d = (self.step(&xp, &up) - self.step(&xm, &um)) / (2.0 * h);
            for r in 0..NX {
                jac[r][c] = d[r];
            }
        }
        jac
    }

    fn gap_jacobian(&self, x: &StateVec) -> [[f64; NX]; 2] {
        let mut jac = [[0.0; NX]; 2];
        for c in 0..NX {
            let h = 1e-6 * state_scale(c);
            let (mut xp, mut xm) = (*x, *x);
            xp[c] += h;
            xm[c] -= h;
            let (gp, gm) = (self.gaps(&xp), self.gaps(&xm));
            for r in 0..2 {
                jac[r][c] = (gp[r] - gm[r]) / (2.0 * h);
            }
        }
        jac
    }

    fn smooth_abs(&self, d: f64) -> (f64, f64) {
        let k = self.spec.smoothing;
        let s = (d * d + k * k).sqrt();
        (s - k, d / s)
    }
}

impl ConstrainedProblem for Nlp {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn var_scale(&self) -> &[f64] {
        &self.scale
    }

    fn n_eq(&self) -> usize {
        self.defect_rows() + self.gap_rows()
    }

    fn n_ineq(&self) -> usize {
        8 * self.spec.horizon
    }

    fn eq_scale(&self, row: usize) -> f64 {
        if row < self.defect_rows() {
            state_scale(row % NX)
        } else {
            GAP_SCALE
        }
    }

    fn ineq_scale(&self, row: usize) -> f64 {
        if row % 8 < 6 {
            1.0
        } else {
            self.spec.eps_comp
        }
    }

    fn objective(&self, z: &[f64]) -> f64 {
        let l = &self.layout;
        let mut f = 0.0;
        for t in 0..=self.spec.horizon {
            f += self
                .smooth_abs(z[l.state(t, sx::PHI)] - z[l.state(t, sx::THETA)])
                .0;
        }
        let w = self.spec.reg_weight;
        for t in 0..self.spec.horizon {
            for k in 0..NU {
                let s = control_scale(k);
                if t + 1 < self.spec.horizon && k < 6 {
                    let d = (z[l.control(t + 1, k)] - z[l.control(t, k)]) / s;
                    f += 0.5 * w * d * d;
                }
                if k >= 6 {
                    let v = z[l.control(t, k)] / s;
                    f += 0.5 * w * v * v;
                }
            }
        }
        f
    }

    fn add_objective_grad(&self, z: &[f64], g: &mut [f64]) {
        let l = &self.layout;
        for t in 0..=self.spec.horizon {
            let d = self
                .smooth_abs(z[l.state(t, sx::PHI)] - z[l.state(t, sx::THETA)])
                .1;
            g[l.state(t, sx::PHI)] += d;
            g[l.state(t, sx::THETA)] -= d;
        }
        let w = self.spec.reg_weight;
        for t in 0..self.spec.horizon {
            for k in 0..NU {
                let s = control_scale(k);
                if t + 1 < self.spec.horizon && k < 6 {
                    let d = (z[l.control(t + 1, k)] - z[l.control(t, k)]) / s;
                    g[l.control(t + 1, k)] += w * d / s;
                    g[l.control(t, k)] -= w * d / s;
                }
                if k >= 6 {
                    g[l.control(t, k)] += w * z[l.control(t, k)] / (s * s);
                }
            }
        }
    }

    fn objective_hessian(&self, z: &[f64]) -> Triplets {
        let l = &self.layout;
        let mut out = Vec::new();
        let k = self.spec.smoothing;
        for t in 0..=self.spec.horizon {
            let d = z[l.state(t, sx::PHI)] - z[l.state(t, sx::THETA)];
            let s = (d * d + k * k).sqrt();
            let c = k * k / (s * s * s);
            let (p, q) = (l.state(t, sx::PHI), l.state(t, sx::THETA));
            out.extend([(p, p, c), (q, q, c), (p, q, -c), (q, p, -c)]);
        }
        let w = self.spec.reg_weight;
        for t in 0..self.spec.horizon {
            for k in 0..NU {
                let s2 = control_scale(k) * control_scale(k);
                let (a, b) = (
                    l.control(t, k),
                    l.control((t + 1).min(self.spec.horizon - 1), k),
                );
                if t + 1 < self.spec.horizon && k < 6 {
                    let c = w / s2;
                    out.extend([(a, a, c), (b, b, c), (a, b, -c), (b, a, -c)]);
                }
                if k >= 6 {
                    out.push((a, a, w / s2));
                }
            }
        }
        out
    }

    fn ordering(&self) -> Option<Vec<usize>> {
        // time-major order keeps the factor banded
        let l = &self.layout;
        let mut order = vec![0; l.len()];
        let mut next = 0;
        for t in 0..=self.spec.horizon {
            let mut idx: Vec<usize> = (0..NX).map(|k| l.state(t, k)).collect();
            idx.extend((0..2).map(|k| l.gap(t, k)));
            if t < self.spec.horizon {
                idx.extend((0..NU).map(|k| l.control(t, k)));
            }
            for i in idx {
                order[i] = next;
                next += 1;
            }
        }
        Some(order)
    }

    fn eq(&self, z: &[f64]) -> Vec<f64> {
        let n = self.spec.horizon;
        let mut c = Vec::with_capacity(self.n_eq());
        for t in 0..n {
            let next = self.step(&self.x(z, t), &self.u(z, t));
            for k in 0..NX {
                c.push(z[self.layout.state(t + 1, k)] - next[k]);
            }
        }
        for t in 0..=n {
            let g = self.gaps(&self.x(z, t));
            for k in 0..2 {
                c.push(z[self.layout.gap(t, k)] - g[k]);
            }
        }
        c
    }

    fn eq_jacobian(&self, z: &[f64]) -> Triplets {
        let n = self.spec.horizon;
        let l = &self.layout;
        let mut out = Vec::with_capacity(n * NX * (NX + NU + 1) + (n + 1) * 2 * (NX + 1));
        for t in 0..n {
            let jac = self.step_jacobian(&self.x(z, t), &self.u(z, t));
            for r in 0..NX {
                let row = NX * t + r;
                out.push((row, l.state(t + 1, r), 1.0));
                for c in 0..NX + NU {
                    let idx = if c < NX {
                        l.state(t, c)
                    } else {
                        l.control(t, c - NX)
                    };
                    out.push((row, idx, -jac[r][c]));
                }
            }
        }
        let off = self.defect_rows();
        for t in 0..=n {
            let jac = self.gap_jacobian(&self.x(z, t));
            for r in 0..2 {
                let row = off + 2 * t + r;
                out.push((row, l.gap(t, r), 1.0));
                for c in 0..NX {
                    out.push((row, l.state(t, c), -jac[r][c]));
                }
            }
        }
        out
    }

    fn ineq(&self, z: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let (mu_g, mu_f) = self.mu_plan;
        let mut c = Vec::with_capacity(self.n_ineq());
        for t in 0..self.spec.horizon {
            let u = |k| z[l.control(t, k)];
            for (n, tn, mu) in [
                (su::FN, su::FT, mu_g),
                (su::F1, su::F1T, mu_f),
                (su::F2, su::F2T, mu_f),
            ] {
                c.push(u(tn) - mu * u(n));
                c.push(-u(tn) - mu * u(n));
            }
            c.push(z[l.gap(t, 0)] * u(su::FN) - self.eps_plan);
            c.push(z[l.gap(t, 1)] * u(su::F2) - self.eps_plan);
        }
        c
    }

    fn ineq_jacobian(&self, z: &[f64]) -> Triplets {
        let l = &self.layout;
        let (mu_g, mu_f) = self.mu_plan;
        let mut out = Vec::with_capacity(20 * self.spec.horizon);
        for t in 0..self.spec.horizon {
            let row = 8 * t;
            for (j, (n, tn, mu)) in [
                (su::FN, su::FT, mu_g),
                (su::F1, su::F1T, mu_f),
                (su::F2, su::F2T, mu_f),
            ]
            .into_iter()
            .enumerate()
            {
                out.push((row + 2 * j, l.control(t, tn), 1.0));
                out.push((row + 2 * j, l.control(t, n), -mu));
                out.push((row + 2 * j + 1, l.control(t, tn), -1.0));
                out.push((row + 2 * j + 1, l.control(t, n), -mu));
            }
            out.push((row + 6, l.gap(t, 0), z[l.control(t, su::FN)]));
            out.push((row + 6, l.control(t, su::FN), z[l.gap(t, 0)]));
            out.push((row + 7, l.gap(t, 1), z[l.control(t, su::F2)]));
            out.push((row + 7, l.control(t, su::F2), z[l.gap(t, 1)]));
        }
        out
    }
}
