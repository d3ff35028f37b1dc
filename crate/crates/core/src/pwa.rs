//! Piecewise-affine approximation of the contact dynamics around every
//! nominal point, one cell per (step, contact mode).

use std::path::Path;

use nalgebra::{SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    contact_geometry, continuous_dynamics, enumerate_modes, su, sx, ContactMode, ControlInput,
    DynamicsError, InputVec, PlantParams, PlantState, StateVec, NU, NX, TOGGLABLE_CONTACTS,
};
use crate::trajopt::NominalTrajectory;

pub type StateMatrix = SMatrix<f64, NX, NX>;
pub type InputMatrix = SMatrix<f64, NX, NU>;

/// Central-difference step of the Jacobians.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PwaError {
    #[error("dynamics evaluation failed at step {step}: {source}")]
    Dynamics { step: usize, source: DynamicsError },
    #[error("invalid PWA table: {0}")]
    Invalid(String),
    #[error("could not parse PWA table: {0}")]
    Parse(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// `{z : lhs·z <= rhs}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HPolytope {
    pub dim: usize,
    pub lhs: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

impl HPolytope {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            lhs: Vec::new(),
            rhs: Vec::new(),
        }
    }

    /// Axis-aligned box; infinite sides produce no row.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Self {
        assert_eq!(lo.len(), hi.len());
        let n = lo.len();
        let mut p = Self::new(n);
        for i in 0..n {
            let mut e = vec![0.0; n];
            if hi[i].is_finite() {
                e[i] = 1.0;
                p.push(e.clone(), hi[i]);
            }
            if lo[i].is_finite() {
                e[i] = -1.0;
                p.push(e, -lo[i]);
            }
        }
        p
    }

    pub fn push(&mut self, row: Vec<f64>, rhs: f64) {
        assert_eq!(row.len(), self.dim, "row length");
        self.lhs.push(row);
        self.rhs.push(rhs);
    }

    pub fn nrows(&self) -> usize {
        self.rhs.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.lhs.len() != self.rhs.len() {
            return Err(format!(
                "{} rows but {} offsets",
                self.lhs.len(),
                self.rhs.len()
            ));
        }
        for (k, (row, b)) in self.lhs.iter().zip(&self.rhs).enumerate() {
            if row.len() != self.dim {
                return Err(format!(
                    "row {k} has length {}, expected {}",
                    row.len(),
                    self.dim
                ));
            }
            if row.iter().any(|v| !v.is_finite()) || b.is_nan() {
                return Err(format!("row {k} is not finite"));
            }
        }
        Ok(())
    }

    /// Largest `lhs_k·z − rhs_k` over the rows, or `-inf` without rows.
    pub fn max_violation(&self, z: &[f64]) -> f64 {
        self.lhs
            .iter()
            .zip(&self.rhs)
            .map(|(row, b)| row.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        self.max_violation(z) <= tol
    }

    /// Restriction to the first `k` coordinates of rows that only involve them.
    pub fn leading(&self, k: usize) -> HPolytope {
        let mut p = HPolytope::new(k);
        for (row, b) in self.lhs.iter().zip(&self.rhs) {
            if row[k..].iter().all(|v| *v == 0.0) {
                p.push(row[..k].to_vec(), *b);
            }
        }
        p
    }

    /// Restriction to the trailing coordinates from `k` on, for rows that only involve them.
    pub fn trailing(&self, k: usize) -> HPolytope {
        let mut p = HPolytope::new(self.dim - k);
        for (row, b) in self.lhs.iter().zip(&self.rhs) {
            if row[..k].iter().all(|v| *v == 0.0) {
                p.push(row[k..].to_vec(), *b);
            }
        }
        p
    }
}

/// `x⁺ = A x + B u + c` for one step and contact mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineDynamics {
    pub step: usize,
    pub mode_id: usize,
    pub dt: f64,
    /// Row-major.
    pub a: [[f64; NX]; NX],
    pub b: [[f64; NU]; NX],
    pub c: [f64; NX],
}

impl AffineDynamics {
    pub fn a_matrix(&self) -> StateMatrix {
        StateMatrix::from_fn(|r, c| self.a[r][c])
    }

    pub fn b_matrix(&self) -> InputMatrix {
        InputMatrix::from_fn(|r, c| self.b[r][c])
    }

    pub fn c_vector(&self) -> StateVec {
        StateVec::from(self.c)
    }

    pub fn predict(&self, x: &StateVec, u: &InputVec) -> StateVec {
        self.a_matrix() * x + self.b_matrix() * u + self.c_vector()
    }
}

/// Central-difference Jacobians of the continuous dynamics, `(∂f/∂x, ∂f/∂u)`.
pub fn fd_jacobians(
    x: &StateVec,
    u: &InputVec,
    mode: &ContactMode,
    params: &PlantParams,
    h: f64,
) -> Result<(StateMatrix, InputMatrix), DynamicsError> {
    let f = |x: &StateVec, u: &InputVec| {
        continuous_dynamics(
            &PlantState::from_vector(x),
            &ControlInput::from_vector(u),
            mode,
            params,
        )
    };
    let mut ja = StateMatrix::zeros();
    let mut jb = InputMatrix::zeros();
    for c in 0..NX {
        let (mut xp, mut xm) = (*x, *x);
        xp[c] += h;
        xm[c] -= h;
        ja.set_column(c, &((f(&xp, u)? - f(&xm, u)?) / (2.0 * h)));
    }
    for c in 0..NU {
        let (mut up, mut um) = (*u, *u);
        up[c] += h;
        um[c] -= h;
        jb.set_column(c, &((f(x, &up)? - f(x, &um)?) / (2.0 * h)));
    }
    Ok((ja, jb))
}

/// Semi-implicit Euler applied to the linearized vector field: velocities
/// first, then positions with the updated velocities, gripper states
/// integrated directly.
fn discretize(ja: &StateMatrix, jb: &InputMatrix, dt: f64) -> (StateMatrix, InputMatrix) {
    let mut a = StateMatrix::identity();
    let mut b = InputMatrix::zeros();
    for v in 3..6 {
        for c in 0..NX {
            a[(v, c)] += dt * ja[(v, c)];
        }
        for c in 0..NU {
            b[(v, c)] = dt * jb[(v, c)];
        }
    }
    for q in 0..3 {
        let v = q + 3;
        for c in 0..NX {
            a[(q, c)] += dt * a[(v, c)];
        }
        for c in 0..NU {
            b[(q, c)] = dt * b[(v, c)];
        }
    }
    for g in [sx::PHI, sx::W] {
        for c in 0..NX {
            a[(g, c)] += dt * ja[(g, c)];
        }
        for c in 0..NU {
            b[(g, c)] = dt * jb[(g, c)];
        }
    }
    (a, b)
}

/// Affine dynamics of `mode` around nominal point `i`. The offset makes the
/// model reproduce the plant's discrete map exactly at the expansion point.
pub fn linearize_mode(
    traj: &NominalTrajectory,
    i: usize,
    mode: &ContactMode,
    params: &PlantParams,
) -> Result<AffineDynamics, PwaError> {
    let x = traj.state(i);
    let u = traj.control(i);
    let err = |source| PwaError::Dynamics { step: i, source };
    let (ja, jb) = fd_jacobians(&x, &u, mode, params, FD_STEP).map_err(err)?;
    let (a, b) = discretize(&ja, &jb, params.dt);
    let next = crate::dynamics::discrete_dynamics(&x, &u, mode, params).map_err(err)?;
    let c = next - a * x - b * u;
    Ok(AffineDynamics {
        step: i,
        mode_id: mode.id,
        dt: params.dt,
        a: std::array::from_fn(|r| std::array::from_fn(|k| a[(r, k)])),
        b: std::array::from_fn(|r| std::array::from_fn(|k| b[(r, k)])),
        c: c.into(),
    })
}

/// Gradient of the (ground, right finger) gaps with respect to the state.
fn gap_gradients(
    x: &StateVec,
    params: &PlantParams,
    step: usize,
) -> Result<([f64; 2], [SVector<f64, NX>; 2]), PwaError> {
    let gaps = |x: &StateVec| {
        contact_geometry(&PlantState::from_vector(x), params)
            .map(|g| [g.ground.gap, g.right.gap])
            .map_err(|source| PwaError::Dynamics { step, source })
    };
    let g0 = gaps(x)?;
    let mut grad = [SVector::<f64, NX>::zeros(); 2];
    for c in 0..NX {
        let (mut xp, mut xm) = (*x, *x);
        xp[c] += FD_STEP;
        xm[c] -= FD_STEP;
        let (gp, gm) = (gaps(&xp)?, gaps(&xm)?);
        for k in 0..2 {
            grad[k][c] = (gp[k] - gm[k]) / (2.0 * FD_STEP);
        }
    }
    Ok((g0, grad))
}

/// Linearized constraint cell of `mode` around nominal point `i`, over the
/// stacked vector `(x, u)`.
///
/// Rows: friction cones and force signs (inactive contacts carry zero
/// force), normal-force and gripper-rate bounds, then the contact-gap side
/// of each contact: `gap <= contact_tol` when active, `gap >= contact_tol`
/// when free.
pub fn linearize_constraints(
    traj: &NominalTrajectory,
    i: usize,
    mode: &ContactMode,
    params: &PlantParams,
) -> Result<HPolytope, PwaError> {
    let n = NX + NU;
    let mut poly = HPolytope::new(n);
    let unit = |k: usize, v: f64| {
        let mut r = vec![0.0; n];
        r[NX + k] = v;
        r
    };
    let pair = |nk: usize, tk: usize, mu: f64, s: f64| {
        let mut r = vec![0.0; n];
        r[NX + tk] = s;
        r[NX + nk] = -mu;
        r
    };
    let lim = &traj.limits;
    let contacts = [
        (su::FN, su::FT, params.mu_ground, true),
        (su::F1, su::F1T, params.mu_finger, true),
        (su::F2, su::F2T, params.mu_finger, mode.right_active()),
    ];
    for (nk, tk, mu, active) in contacts {
        if active {
            poly.push(pair(nk, tk, mu, 1.0), 0.0);
            poly.push(pair(nk, tk, mu, -1.0), 0.0);
            poly.push(unit(nk, -1.0), 0.0);
            poly.push(unit(nk, 1.0), lim.max_normal_force);
        } else {
            poly.push(unit(nk, 1.0), 0.0);
            poly.push(unit(nk, -1.0), 0.0);
            poly.push(unit(tk, 1.0), 0.0);
            poly.push(unit(tk, -1.0), 0.0);
        }
    }
    poly.push(unit(su::PHID, 1.0), lim.max_phid);
    poly.push(unit(su::PHID, -1.0), lim.max_phid);
    poly.push(unit(su::WD, 1.0), lim.max_wd);
    poly.push(unit(su::WD, -1.0), lim.max_wd);

    let x = traj.state(i);
    let (g0, grad) = gap_gradients(&x, params, i)?;
    for (k, active) in [(0, true), (1, mode.right_active())] {
        // gap(x) ≈ g0 + ∇g·(x − x̄)
        let offset = g0[k] - grad[k].dot(&x);
        let mut row = vec![0.0; n];
        let sign = if active { 1.0 } else { -1.0 };
        for c in 0..NX {
            row[c] = sign * grad[k][c];
        }
        poly.push(row, sign * (params.contact_tol - offset));
    }
    Ok(poly)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PwaCell {
    pub dynamics: AffineDynamics,
    pub constraints: HPolytope,
}

/// All cells `(i, j)` for `i = 0..N−1` and mode ids `j = 1..2^p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PwaTable {
    pub n: usize,
    pub dt: f64,
    pub modes: Vec<ContactMode>,
    pub cells: Vec<PwaCell>,
    pub config_hash: String,
}

impl PwaTable {
    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// Cell of step `i` and 1-based mode id `j`.
    pub fn cell(&self, i: usize, j: usize) -> &PwaCell {
        assert!(
            i < self.n && j >= 1 && j <= self.n_modes(),
            "cell ({i}, {j}) out of range"
        );
        &self.cells[i * self.n_modes() + (j - 1)]
    }

    /// Nominal-mode dynamics of step `i`.
    pub fn nominal(&self, i: usize) -> &AffineDynamics {
        &self.cell(i, 1).dynamics
    }

    pub fn validate(&self) -> Result<(), PwaError> {
        let bad = |m: String| Err(PwaError::Invalid(m));
        if self.modes.len() != 1 << TOGGLABLE_CONTACTS {
            return bad(format!(
                "expected {} modes, found {}",
                1 << TOGGLABLE_CONTACTS,
                self.modes.len()
            ));
        }
        if self.cells.len() != self.n * self.n_modes() {
            return bad(format!(
                "expected {} cells, found {}",
                self.n * self.n_modes(),
                self.cells.len()
            ));
        }
        for (k, cell) in self.cells.iter().enumerate() {
            let (i, j) = (k / self.n_modes(), k % self.n_modes() + 1);
            let d = &cell.dynamics;
            if d.step != i || d.mode_id != j {
                return bad(format!(
                    "cell {k} labelled ({}, {}), expected ({i}, {j})",
                    d.step, d.mode_id
                ));
            }
            let finite =
                d.a.iter()
                    .flatten()
                    .chain(d.b.iter().flatten())
                    .chain(&d.c)
                    .all(|v| v.is_finite());
            if !finite {
                return bad(format!("cell ({i}, {j}) has non-finite dynamics"));
            }
            cell.constraints
                .validate()
                .map_err(|e| PwaError::Invalid(format!("cell ({i}, {j}): {e}")))?;
        }
        Ok(())
    }
}

pub fn build_pwa(traj: &NominalTrajectory, params: &PlantParams) -> Result<PwaTable, PwaError> {
    let modes = enumerate_modes(TOGGLABLE_CONTACTS);
    let jobs: Vec<(usize, &ContactMode)> = (0..traj.n)
        .flat_map(|i| modes.iter().map(move |m| (i, m)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(i, mode)| {
            Ok(PwaCell {
                dynamics: linearize_mode(traj, i, mode, params)?,
                constraints: linearize_constraints(traj, i, mode, params)?,
            })
        })
        .collect::<Result<Vec<_>, PwaError>>()?;
    Ok(PwaTable {
        n: traj.n,
        dt: params.dt,
        modes,
        cells,
        config_hash: traj.config_hash.clone(),
    })
}

pub fn save_pwa(table: &PwaTable, path: &Path) -> Result<(), PwaError> {
    let text = serde_json::to_string(table).map_err(|e| PwaError::Parse(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| PwaError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_pwa(path: &Path) -> Result<PwaTable, PwaError> {
    let text = std::fs::read_to_string(path).map_err(|source| PwaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let table: PwaTable =
        serde_json::from_str(&text).map_err(|e| PwaError::Parse(e.to_string()))?;
    table.validate()?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_polytope_membership() {
        let p = HPolytope::from_box(&[-1.0, f64::NEG_INFINITY], &[1.0, 2.0]);
        assert_eq!(p.nrows(), 3);
        assert!(p.contains(&[0.5, -100.0], 0.0));
        assert!(!p.contains(&[1.5, 0.0], 1e-9));
        assert!(p.validate().is_ok());
    }

    #[test]
    fn leading_and_trailing_split_rows() {
        let mut p = HPolytope::new(3);
        p.push(vec![1.0, 0.0, 0.0], 1.0);
        p.push(vec![0.0, 0.0, 2.0], 4.0);
        p.push(vec![1.0, 0.0, 1.0], 3.0);
        assert_eq!(p.leading(2).nrows(), 1);
        assert_eq!(p.trailing(2).nrows(), 1);
        assert_eq!(p.trailing(2).lhs[0], vec![2.0]);
    }

    #[test]
    fn discretization_matches_semi_implicit_map() {
        // linear vector field: the discretized model must equal one step of the map
        let mut ja = StateMatrix::zeros();
        for q in 0..3 {
            ja[(q, q + 3)] = 1.0;
        }
        ja[(3, 0)] = -2.0;
        ja[(5, 2)] = 0.5;
        let mut jb = InputMatrix::zeros();
        jb[(4, 0)] = 3.0;
        jb[(6, 6)] = 1.0;
        jb[(7, 7)] = 1.0;
        let dt = 0.01;
        let (a, b) = discretize(&ja, &jb, dt);
        let x = StateVec::from([0.1, 0.2, 0.3, -0.4, 0.5, 0.6, 0.7, 0.8]);
        let u = InputVec::from([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, -1.0]);
        let f = ja * x + jb * u;
        let step = crate::dynamics::semi_implicit_step(&x, &f, dt);
        assert!((a * x + b * u - step).abs().max() < 1e-15);
    }
}
