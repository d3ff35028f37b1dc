//! Planar half-disc held by a two-finger gripper and resting on a table.
//!
//! Body frame: origin at the centre of the full circle, flat face along the
//! body x axis, material on the `y <= 0` side. At `theta = 0` the arc rests
//! on the table and the flat face points up. The left finger presses on the
//! centre of the flat face; the right fingertip sits at distance `w` from the
//! face centre along `(sin phi, -cos phi)`, so at `phi = theta` it points
//! straight through the body and touches the arc when `w = r`.

use nalgebra::{SVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NX: usize = 8;
pub const NU: usize = 8;

pub type StateVec = SVector<f64, NX>;
pub type InputVec = SVector<f64, NU>;

/// State indices.
pub mod sx {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const THETA: usize = 2;
    pub const XD: usize = 3;
    pub const YD: usize = 4;
    pub const THETAD: usize = 5;
    pub const PHI: usize = 6;
    pub const W: usize = 7;
}

/// Control indices.
pub mod su {
    pub const FN: usize = 0;
    pub const FT: usize = 1;
    pub const F1: usize = 2;
    pub const F1T: usize = 3;
    pub const F2: usize = 4;
    pub const F2T: usize = 5;
    pub const PHID: usize = 6;
    pub const WD: usize = 7;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("contact geometry undefined for non-finite state {0:?}")]
    GeometryDegenerate(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub xd: f64,
    pub yd: f64,
    pub thetad: f64,
    pub phi: f64,
    pub w: f64,
}

impl PlantState {
    pub fn to_vector(&self) -> StateVec {
        StateVec::from([
            self.x,
            self.y,
            self.theta,
            self.xd,
            self.yd,
            self.thetad,
            self.phi,
            self.w,
        ])
    }

    pub fn from_vector(v: &StateVec) -> Self {
        Self {
            x: v[0],
            y: v[1],
            theta: v[2],
            xd: v[3],
            yd: v[4],
            thetad: v[5],
            phi: v[6],
            w: v[7],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Ground normal force.
    pub fn_ground: f64,
    /// Ground friction.
    pub ft_ground: f64,
    pub f1: f64,
    pub f1t: f64,
    pub f2: f64,
    pub f2t: f64,
    pub phid: f64,
    pub wd: f64,
}

impl ControlInput {
    pub fn to_vector(&self) -> InputVec {
        InputVec::from([
            self.fn_ground,
            self.ft_ground,
            self.f1,
            self.f1t,
            self.f2,
            self.f2t,
            self.phid,
            self.wd,
        ])
    }

    pub fn from_vector(v: &InputVec) -> Self {
        Self {
            fn_ground: v[0],
            ft_ground: v[1],
            f1: v[2],
            f1t: v[3],
            f2: v[4],
            f2t: v[5],
            phid: v[6],
            wd: v[7],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    pub radius: f64,
    pub length: f64,
    pub mass: f64,
    pub inertia: f64,
    pub mu_ground: f64,
    pub mu_finger: f64,
    pub gravity: f64,
    pub dt: f64,
    pub contact_tol: f64,
    pub eps_comp: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        let radius = 0.036;
        let mass = 0.1;
        Self {
            radius,
            length: 0.11,
            mass,
            inertia: half_disc_inertia(mass, radius),
            mu_ground: 0.3,
            mu_finger: 0.5,
            gravity: 9.81,
            dt: 0.01,
            contact_tol: 1e-3,
            eps_comp: 1e-4,
        }
    }
}

/// Moment of inertia of a uniform half-disc about its centroid.
pub fn half_disc_inertia(mass: f64, radius: f64) -> f64 {
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    (0.5 - 16.0 / (9.0 * pi2)) * mass * radius * radius
}

impl PlantParams {
    /// Distance from the circle centre to the centroid.
    pub fn com_offset(&self) -> f64 {
        4.0 * self.radius / (3.0 * std::f64::consts::PI)
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("radius", self.radius),
            ("length", self.length),
            ("mass", self.mass),
            ("inertia", self.inertia),
            ("dt", self.dt),
            ("contact_tol", self.contact_tol),
            ("eps_comp", self.eps_comp),
            ("gravity", self.gravity),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("plant.{name} must be positive and finite, got {v}"));
            }
        }
        for (name, mu) in [("mu_ground", self.mu_ground), ("mu_finger", self.mu_finger)] {
            if !(0.2..=0.5).contains(&mu) {
                return Err(format!("plant.{name} = {mu} outside [0.2, 0.5]"));
            }
        }
        Ok(())
    }
}

/// Make/break contact mode over the `p` togglable contacts.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContactMode {
    pub flags: Vec<bool>,
    pub id: usize,
}

impl ContactMode {
    pub fn from_flags(flags: Vec<bool>) -> Self {
        let id = 1 + flags
            .iter()
            .enumerate()
            .map(|(k, &on)| if on { 0 } else { 1 << k })
            .sum::<usize>();
        Self { flags, id }
    }

    /// The mode with every togglable contact active.
    pub fn nominal(p: usize) -> Self {
        Self::from_flags(vec![true; p])
    }

    pub fn right_active(&self) -> bool {
        self.flags.first().copied().unwrap_or(true)
    }
}

/// All `2^p` modes ordered by id; mode 1 has every contact active.
pub fn enumerate_modes(p: usize) -> Vec<ContactMode> {
    (0..1usize << p)
        .map(|bits| ContactMode::from_flags((0..p).map(|k| bits & (1 << k) == 0).collect()))
        .collect()
}

/// Number of togglable contacts in the flip task (the right finger).
pub const TOGGLABLE_CONTACTS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactFrame {
    /// World-frame contact point on the body.
    pub point: Vector2<f64>,
    /// Unit direction of a positive normal force on the body.
    pub normal: Vector2<f64>,
    /// Unit direction of a positive tangential force on the body.
    pub tangent: Vector2<f64>,
    /// Signed separation; negative means penetration.
    pub gap: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactGeometry {
    pub ground: ContactFrame,
    pub left: ContactFrame,
    pub right: ContactFrame,
    pub circle_center: Vector2<f64>,
    pub right_fingertip: Vector2<f64>,
}

fn rot(theta: f64, v: Vector2<f64>) -> Vector2<f64> {
    let (s, c) = theta.sin_cos();
    Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

/// Clockwise perpendicular, the tangent convention for every contact.
fn cw(n: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(n.y, -n.x)
}

/// Closest point on the half-disc boundary to `q` (body frame), signed
/// distance, and outward unit normal at that point.
fn half_disc_distance(q: Vector2<f64>, r: f64) -> (Vector2<f64>, f64, Vector2<f64>) {
    let up = Vector2::new(0.0, 1.0);
    let norm = q.norm();
    if q.y > 0.0 {
        if q.x.abs() <= r {
            return (Vector2::new(q.x, 0.0), q.y, up);
        }
        let corner = Vector2::new(r * q.x.signum(), 0.0);
        let d = q - corner;
        return (corner, d.norm(), d / d.norm());
    }
    if norm >= r {
        let dir = q / norm;
        return (dir * r, norm - r, dir);
    }
    // inside: nearest of the arc and the face
    let to_arc = r - norm;
    let to_face = -q.y;
    if to_face < to_arc {
        (Vector2::new(q.x, 0.0), -to_face, up)
    } else {
        let dir = if norm > 0.0 {
            q / norm
        } else {
            Vector2::new(0.0, -1.0)
        };
        (dir * r, -to_arc, dir)
    }
}

pub fn contact_geometry(
    state: &PlantState,
    params: &PlantParams,
) -> Result<ContactGeometry, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::GeometryDegenerate(
            state.to_vector().as_slice().to_vec(),
        ));
    }
    let r = params.radius;
    let th = state.theta;
    let com = Vector2::new(state.x, state.y);
    let center = com + rot(th, Vector2::new(0.0, params.com_offset()));

    // lowest body point: arc bottom while it lies on the arc, else the lower corner
    let (s, c) = th.sin_cos();
    let low_body = if c >= 0.0 {
        Vector2::new(-s * r, -c * r)
    } else if s > 0.0 {
        Vector2::new(-r, 0.0)
    } else {
        Vector2::new(r, 0.0)
    };
    let low = center + rot(th, low_body);
    let ground = ContactFrame {
        point: low,
        normal: Vector2::new(0.0, 1.0),
        tangent: Vector2::new(1.0, 0.0),
        gap: low.y,
    };

    let face_in = rot(th, Vector2::new(0.0, -1.0));
    let left = ContactFrame {
        point: center,
        normal: face_in,
        tangent: cw(face_in),
        gap: 0.0,
    };

    let (sp, cp) = state.phi.sin_cos();
    let tip = center + state.w * Vector2::new(sp, -cp);
    let q = rot(-th, tip - center);
    let (closest, gap, outward) = half_disc_distance(q, r);
    let n_right = -rot(th, outward);
    let right = ContactFrame {
        point: center + rot(th, closest),
        normal: n_right,
        tangent: cw(n_right),
        gap,
    };

    Ok(ContactGeometry {
        ground,
        left,
        right,
        circle_center: center,
        right_fingertip: tip,
    })
}

pub fn detect_mode(state: &PlantState, params: &PlantParams) -> ContactMode {
    let gap = match contact_geometry(state, params) {
        Ok(g) => g.right.gap,
        Err(_) => f64::INFINITY,
    };
    ContactMode::from_flags(vec![gap <= params.contact_tol])
}

fn cross(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Continuous-time dynamics `f_j(x, u)` with the geometry already evaluated.
pub fn dynamics_with_geometry(
    state: &PlantState,
    u: &ControlInput,
    mode: &ContactMode,
    params: &PlantParams,
    geo: &ContactGeometry,
) -> StateVec {
    let com = Vector2::new(state.x, state.y);
    let mut forces = vec![
        (
            geo.ground.point,
            geo.ground.normal * u.fn_ground + geo.ground.tangent * u.ft_ground,
        ),
        (
            geo.left.point,
            geo.left.normal * u.f1 + geo.left.tangent * u.f1t,
        ),
    ];
    if mode.right_active() {
        forces.push((
            geo.right.point,
            geo.right.normal * u.f2 + geo.right.tangent * u.f2t,
        ));
    }
    let mut total = Vector2::zeros();
    let mut torque = 0.0;
    for (point, f) in forces {
        total += f;
        torque += cross(point - com, f);
    }
    StateVec::from([
        state.xd,
        state.yd,
        state.thetad,
        total.x / params.mass,
        total.y / params.mass - params.gravity,
        torque / params.inertia,
        u.phid,
        u.wd,
    ])
}

pub fn continuous_dynamics(
    state: &PlantState,
    u: &ControlInput,
    mode: &ContactMode,
    params: &PlantParams,
) -> Result<StateVec, DynamicsError> {
    let geo = contact_geometry(state, params)?;
    Ok(dynamics_with_geometry(state, u, mode, params, &geo))
}

/// Semi-implicit Euler: velocities first, positions with the new velocities,
/// gripper channels integrate their rates exactly.
pub fn semi_implicit_step(x: &StateVec, f: &StateVec, dt: f64) -> StateVec {
    let mut next = *x;
    for k in 0..3 {
        next[3 + k] = x[3 + k] + dt * f[3 + k];
        next[k] = x[k] + dt * next[3 + k];
    }
    next[sx::PHI] = x[sx::PHI] + dt * f[sx::PHI];
    next[sx::W] = x[sx::W] + dt * f[sx::W];
    next
}

/// Discrete map `Φ_j(x, u)` without any projection or clamping; this is the
/// map shared by the transcription and the linearization.
pub fn discrete_dynamics(
    x: &StateVec,
    u: &InputVec,
    mode: &ContactMode,
    params: &PlantParams,
) -> Result<StateVec, DynamicsError> {
    let s = PlantState::from_vector(x);
    let f = continuous_dynamics(&s, &ControlInput::from_vector(u), mode, params)?;
    Ok(semi_implicit_step(x, &f, params.dt))
}

/// Projects a command onto the forces the contacts in `geo`/`mode` can supply.
pub fn project_command(
    u: &InputVec,
    mode: &ContactMode,
    geo: &ContactGeometry,
    params: &PlantParams,
) -> InputVec {
    let mut p = *u;
    let cone = |n: f64, t: f64, mu: f64| {
        let n = n.max(0.0);
        (n, t.clamp(-mu * n, mu * n))
    };
    let ground_on = geo.ground.gap <= params.contact_tol;
    let (fnn, ft) = if ground_on {
        cone(u[su::FN], u[su::FT], params.mu_ground)
    } else {
        (0.0, 0.0)
    };
    p[su::FN] = fnn;
    p[su::FT] = ft;
    let (f1, f1t) = cone(u[su::F1], u[su::F1T], params.mu_finger);
    p[su::F1] = f1;
    p[su::F1T] = f1t;
    let (f2, f2t) = if mode.right_active() {
        cone(u[su::F2], u[su::F2T], params.mu_finger)
    } else {
        (0.0, 0.0)
    };
    p[su::F2] = f2;
    p[su::F2T] = f2t;
    p
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostic {
    pub mode: ContactMode,
    pub applied: InputVec,
    /// Table penetration removed after the step, metres.
    pub ground_clamp: f64,
    /// Right-finger penetration removed after the step, metres.
    pub finger_clamp: f64,
}

impl StepDiagnostic {
    pub fn clamped(&self) -> bool {
        self.ground_clamp > 0.0 || self.finger_clamp > 0.0
    }
}

/// One step of the simulation truth model.
pub fn plant_step(state: &PlantState, command: &ControlInput, params: &PlantParams) -> PlantState {
    plant_step_with_diagnostic(state, command, params).0
}

pub fn plant_step_with_diagnostic(
    state: &PlantState,
    command: &ControlInput,
    params: &PlantParams,
) -> (PlantState, StepDiagnostic) {
    let mode = detect_mode(state, params);
    let x = state.to_vector();
    let Ok(geo) = contact_geometry(state, params) else {
        let nan = PlantState::from_vector(&StateVec::from_element(f64::NAN));
        let diag = StepDiagnostic {
            mode,
            applied: command.to_vector(),
            ground_clamp: 0.0,
            finger_clamp: 0.0,
        };
        return (nan, diag);
    };
    let applied = project_command(&command.to_vector(), &mode, &geo, params);
    let f = dynamics_with_geometry(
        state,
        &ControlInput::from_vector(&applied),
        &mode,
        params,
        &geo,
    );
    let mut next = PlantState::from_vector(&semi_implicit_step(&x, &f, params.dt));

    let mut ground_clamp = 0.0;
    let mut finger_clamp = 0.0;
    if let Ok(g) = contact_geometry(&next, params) {
        if g.ground.gap < 0.0 {
            ground_clamp = -g.ground.gap;
            next.y += ground_clamp;
            next.yd = next.yd.max(0.0);
        }
    }
    // opening the gripper moves the tip away from the body in every region the
    // nominal task visits; a few passes settle the corner cases
    for _ in 0..4 {
        match contact_geometry(&next, params) {
            Ok(g) if g.right.gap < 0.0 => {
                finger_clamp += -g.right.gap;
                next.w += -g.right.gap;
            }
            _ => break,
        }
    }
    (
        next,
        StepDiagnostic {
            mode,
            applied,
            ground_clamp,
            finger_clamp,
        },
    )
}

/// Mechanical energy (kinetic plus potential relative to the table).
pub fn mechanical_energy(state: &PlantState, params: &PlantParams) -> f64 {
    0.5 * params.mass * (state.xd * state.xd + state.yd * state.yd)
        + 0.5 * params.inertia * state.thetad * state.thetad
        + params.mass * params.gravity * state.y
}

/// Resting pose at orientation 0 with both finger gaps equal to `gap`.
pub fn resting_state(params: &PlantParams, x: f64, phi: f64, gap: f64) -> PlantState {
    let r = params.radius;
    PlantState {
        x,
        y: r + gap - params.com_offset(),
        theta: 0.0,
        xd: 0.0,
        yd: 0.0,
        thetad: 0.0,
        phi,
        w: r + gap,
    }
}
