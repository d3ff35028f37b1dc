//! Augmented Lagrangian (PHR) outer loop with a projected Gauss-Newton inner
//! loop.
//!
//! Variables and constraint rows are scaled by the problem's declared scales
//! before the solver sees them, so tolerances below are in scaled units.

use nalgebra::DVector;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};

/// Sparse entries `(row, col, value)`; duplicates are summed.
pub type Triplets = Vec<(usize, usize, f64)>;

/// A smooth program `min f(z)` subject to `c_E(z) = 0`, `c_I(z) <= 0` and
/// box bounds.
pub trait ConstrainedProblem {
    fn dim(&self) -> usize;
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    /// Typical magnitude of each variable.
    fn var_scale(&self) -> &[f64];
    fn n_eq(&self) -> usize;
    fn n_ineq(&self) -> usize;
    fn eq_scale(&self, _row: usize) -> f64 {
        1.0
    }
    fn ineq_scale(&self, _row: usize) -> f64 {
        1.0
    }
    /// Elimination order for the sparse factorization, `order[old] = new`.
    fn ordering(&self) -> Option<Vec<usize>> {
        None
    }
    fn objective(&self, z: &[f64]) -> f64;
    fn add_objective_grad(&self, z: &[f64], grad: &mut [f64]);
    /// Both triangles of a positive semidefinite approximation of ∇²f.
    fn objective_hessian(&self, z: &[f64]) -> Triplets;
    fn eq(&self, z: &[f64]) -> Vec<f64>;
    fn eq_jacobian(&self, z: &[f64]) -> Triplets;
    fn ineq(&self, z: &[f64]) -> Vec<f64>;
    fn ineq_jacobian(&self, z: &[f64]) -> Triplets;
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Scaled constraint violation accepted at convergence.
    pub tol_feas: f64,
    /// Projected-gradient tolerance of the final inner solve.
    pub tol_opt: f64,
    /// A feasible point whose objective moved less than this, relative,
    /// over one outer iteration is accepted.
    pub tol_stall: f64,
    pub rho_init: f64,
    pub rho_growth: f64,
    pub rho_max: f64,
    /// Weight of the scaled ℓ1 violation in the reported merit.
    pub merit_weight: f64,
}

impl Default for AlOptions {
    fn default() -> Self {
        Self {
            max_outer: 40,
            max_inner: 100,
            tol_feas: 1e-8,
            tol_opt: 1e-6,
            tol_stall: 1e-5,
            rho_init: 1e3,
            rho_growth: 10.0,
            rho_max: 1e9,
            merit_weight: 1e3,
        }
    }
}

impl AlOptions {
    pub fn for_spec(spec: &super::TrajOptSpec) -> Self {
        Self {
            max_outer: spec.max_outer,
            max_inner: spec.max_inner,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlReport {
    pub z: Vec<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Largest scaled violation at the returned point.
    pub violation: f64,
    pub objective: f64,
    /// Merit of every accepted outer iterate.
    pub merit_history: Vec<f64>,
}

struct Multipliers<'m> {
    lam: &'m [f64],
    mu: &'m [f64],
    rho: f64,
}

struct Scaled<'a, P: ConstrainedProblem> {
    p: &'a P,
    s: Vec<f64>,
    eq_s: Vec<f64>,
    in_s: Vec<f64>,
    /// `order[old] = new` for the factorization.
    order: Vec<usize>,
}

impl<'a, P: ConstrainedProblem> Scaled<'a, P> {
    fn new(p: &'a P) -> Self {
        let eq_s = (0..p.n_eq()).map(|r| p.eq_scale(r)).collect();
        let in_s = (0..p.n_ineq()).map(|r| p.ineq_scale(r)).collect();
        let order = p.ordering().unwrap_or_else(|| (0..p.dim()).collect());
        Self {
            p,
            s: p.var_scale().to_vec(),
            eq_s,
            in_s,
            order,
        }
    }

    fn unscale(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.s).map(|(a, b)| a * b).collect()
    }

    fn eq(&self, z: &[f64]) -> Vec<f64> {
        self.p
            .eq(z)
            .iter()
            .zip(&self.eq_s)
            .map(|(c, s)| c / s)
            .collect()
    }

    fn ineq(&self, z: &[f64]) -> Vec<f64> {
        self.p
            .ineq(z)
            .iter()
            .zip(&self.in_s)
            .map(|(c, s)| c / s)
            .collect()
    }

    /// Jacobian rows in scaled units, grouped by row.
    fn rows(&self, t: Triplets, nrows: usize, row_s: &[f64]) -> Vec<Vec<(usize, f64)>> {
        let mut rows = vec![Vec::new(); nrows];
        for (r, c, v) in t {
            rows[r].push((c, v * self.s[c] / row_s[r]));
        }
        rows
    }

    fn violation(&self, ce: &[f64], ci: &[f64]) -> f64 {
        let a = ce.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let b = ci.iter().fold(0.0f64, |m, v| m.max(*v));
        let v = a.max(b);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    fn l1_violation(&self, ce: &[f64], ci: &[f64]) -> f64 {
        ce.iter().map(|v| v.abs()).sum::<f64>() + ci.iter().map(|v| v.max(0.0)).sum::<f64>()
    }

    /// Augmented Lagrangian value at scaled point `y`.
    fn value(&self, y: &[f64], m: &Multipliers) -> f64 {
        let z = self.unscale(y);
        let ce = self.eq(&z);
        let ci = self.ineq(&z);
        let mut val = self.p.objective(&z);
        for (k, c) in ce.iter().enumerate() {
            val += m.lam[k] * c + 0.5 * m.rho * c * c;
        }
        for (k, c) in ci.iter().enumerate() {
            let t = (m.mu[k] + m.rho * c).max(0.0);
            val += (t * t - m.mu[k] * m.mu[k]) / (2.0 * m.rho);
        }
        if val.is_finite() {
            val
        } else {
            f64::INFINITY
        }
    }

    /// Value, gradient and Gauss-Newton Hessian of the augmented Lagrangian.
    fn model(&self, y: &[f64], m: &Multipliers) -> (f64, Vec<f64>, Triplets) {
        let z = self.unscale(y);
        let ce = self.eq(&z);
        let ci = self.ineq(&z);
        let je = self.rows(self.p.eq_jacobian(&z), ce.len(), &self.eq_s);
        let ji = self.rows(self.p.ineq_jacobian(&z), ci.len(), &self.in_s);
        let mut val = self.p.objective(&z);
        let mut g = vec![0.0; z.len()];
        self.p.add_objective_grad(&z, &mut g);
        for (gi, si) in g.iter_mut().zip(&self.s) {
            *gi *= si;
        }
        let mut h: Triplets = self
            .p
            .objective_hessian(&z)
            .into_iter()
            .map(|(i, j, v)| (i, j, v * self.s[i] * self.s[j]))
            .collect();
        let add_row = |row: &[(usize, f64)], w: f64, curv: f64, g: &mut [f64], h: &mut Triplets| {
            for &(c, v) in row {
                g[c] += w * v;
            }
            if curv > 0.0 {
                for &(a, va) in row {
                    for &(b, vb) in row {
                        h.push((a, b, curv * va * vb));
                    }
                }
            }
        };
        for (k, c) in ce.iter().enumerate() {
            val += m.lam[k] * c + 0.5 * m.rho * c * c;
            add_row(&je[k], m.lam[k] + m.rho * c, m.rho, &mut g, &mut h);
        }
        for (k, c) in ci.iter().enumerate() {
            let t = (m.mu[k] + m.rho * c).max(0.0);
            val += (t * t - m.mu[k] * m.mu[k]) / (2.0 * m.rho);
            if t > 0.0 {
                add_row(&ji[k], t, m.rho, &mut g, &mut h);
            }
        }
        if !val.is_finite() {
            val = f64::INFINITY;
        }
        (val, g, h)
    }
}

fn project(y: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..y.len() {
        y[i] = y[i].clamp(lo[i], hi[i]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn proj_grad_norm(y: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..y.len() {
        let step = (y[i] - g[i]).clamp(lo[i], hi[i]) - y[i];
        m = m.max(step.abs());
    }
    m
}

/// Solves `(H_free + λ D) d = −g` on the free variables; `None` if the
/// damped matrix is not positive definite.
fn newton_direction(
    h: &Triplets,
    g: &[f64],
    diag: &[f64],
    free: &[bool],
    lm: f64,
    order: &[usize],
) -> Option<Vec<f64>> {
    let n = g.len();
    let mut coo = CooMatrix::new(n, n);
    for &(i, j, v) in h {
        if free[i] && free[j] {
            coo.push(order[i], order[j], v);
        }
    }
    for i in 0..n {
        let d = if free[i] { lm * (diag[i] + 1.0) } else { 1.0 };
        coo.push(order[i], order[i], d);
    }
    let csc = CscMatrix::from(&coo);
    let chol = CscCholesky::factor(&csc).ok()?;
    let mut rhs = DVector::zeros(n);
    for i in 0..n {
        if free[i] {
            rhs[order[i]] = -g[i];
        }
    }
    let sol = chol.solve(&rhs);
    let d: Vec<f64> = (0..n).map(|i| sol[order[i]]).collect();
    d.iter().all(|v| v.is_finite()).then_some(d)
}

/// Projected Gauss-Newton with Levenberg damping on the box; returns
/// (point, iterations, final projected gradient).
fn inner_solve<P: ConstrainedProblem>(
    sc: &Scaled<P>,
    m: &Multipliers,
    y0: &[f64],
    lo: &[f64],
    hi: &[f64],
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, usize, f64) {
    let n = y0.len();
    let mut y = y0.to_vec();
    project(&mut y, lo, hi);
    let mut lm = 1e-3;
    let mut it = 0;
    let mut pg = f64::INFINITY;
    while it < max_iter {
        let (val, g, h) = sc.model(&y, m);
        pg = proj_grad_norm(&y, &g, lo, hi);
        if pg <= tol || !val.is_finite() {
            break;
        }
        it += 1;
        let eps_b = pg.min(1e-3);
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let at_lo = y[i] <= lo[i] + eps_b && g[i] > 0.0;
                let at_hi = y[i] >= hi[i] - eps_b && g[i] < 0.0;
                !(at_lo || at_hi) && lo[i] < hi[i]
            })
            .collect();
        let mut diag = vec![0.0; n];
        for &(i, j, v) in &h {
            if i == j {
                diag[i] += v;
            }
        }
        let mut accepted = false;
        while !accepted && lm < 1e12 {
            let Some(mut d) = newton_direction(&h, &g, &diag, &free, lm, &sc.order) else {
                lm *= 10.0;
                continue;
            };
            for i in 0..n {
                if !free[i] {
                    d[i] = -g[i] / (diag[i] + 1.0);
                }
            }
            let mut alpha = 1.0;
            for _ in 0..30 {
                let mut yn: Vec<f64> = (0..n).map(|i| y[i] + alpha * d[i]).collect();
                project(&mut yn, lo, hi);
                let step: Vec<f64> = (0..n).map(|i| yn[i] - y[i]).collect();
                let decrease = dot(&g, &step);
                if decrease < 0.0 {
                    let vn = sc.value(&yn, m);
                    if vn <= val + 1e-4 * decrease {
                        y = yn;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if accepted {
                lm = if alpha == 1.0 {
                    (lm / 3.0).max(1e-6)
                } else {
                    lm * 3.0
                };
            } else {
                lm *= 100.0;
            }
        }
        if !accepted {
            break;
        }
    }
    (y, it, pg)
}

pub fn solve<P: ConstrainedProblem>(p: &P, z0: &[f64], opts: &AlOptions) -> AlReport {
    let sc = Scaled::new(p);
    let lo: Vec<f64> = p.lower().iter().zip(&sc.s).map(|(a, b)| a / b).collect();
    let hi: Vec<f64> = p.upper().iter().zip(&sc.s).map(|(a, b)| a / b).collect();
    let mut y: Vec<f64> = z0.iter().zip(&sc.s).map(|(a, b)| a / b).collect();
    project(&mut y, &lo, &hi);

    let mut lam = vec![0.0; p.n_eq()];
    let mut mu = vec![0.0; p.n_ineq()];
    let mut rho = opts.rho_init;
    let mut prev_viol = f64::INFINITY;
    let mut best_merit = f64::INFINITY;
    let mut merit_history = Vec::new();
    let mut inner_total = 0;
    let mut outer = 0;
    let mut converged = false;
    let mut omega = 1e-2;
    let mut viol = f64::INFINITY;
    let mut prev_f = f64::INFINITY;

    while outer < opts.max_outer {
        outer += 1;
        let m = Multipliers {
            lam: &lam,
            mu: &mu,
            rho,
        };
        let (yn, iters, pg) = inner_solve(&sc, &m, &y, &lo, &hi, omega, opts.max_inner);
        inner_total += iters;
        y = yn;

        let z = sc.unscale(&y);
        let ce = sc.eq(&z);
        let ci = sc.ineq(&z);
        viol = sc.violation(&ce, &ci);
        let merit = p.objective(&z) + opts.merit_weight * sc.l1_violation(&ce, &ci);
        if merit <= best_merit {
            best_merit = merit;
            merit_history.push(merit);
        }
        let f = p.objective(&z);
        let stalled = (prev_f - f).abs() <= opts.tol_stall * (1.0 + f.abs());
        prev_f = f;
        if viol <= opts.tol_feas && ((pg <= opts.tol_opt && omega <= opts.tol_opt) || stalled) {
            converged = true;
            break;
        }
        for (k, c) in ce.iter().enumerate() {
            lam[k] += rho * c;
        }
        for (k, c) in ci.iter().enumerate() {
            mu[k] = (mu[k] + rho * c).max(0.0);
        }
        if viol > 0.25 * prev_viol {
            rho = (rho * opts.rho_growth).min(opts.rho_max);
        }
        prev_viol = prev_viol.min(viol);
        omega = (omega * 0.1).max(opts.tol_opt);
    }

    let z = sc.unscale(&y);
    AlReport {
        objective: p.objective(&z),
        z,
        converged,
        outer_iterations: outer,
        inner_iterations: inner_total,
        violation: viol,
        merit_history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min (x−2)² + (y−1)² s.t. x + y = 1, x² − y <= 0, 0 <= x <= 10.
    struct Toy {
        lo: Vec<f64>,
        hi: Vec<f64>,
        s: Vec<f64>,
    }

    impl ConstrainedProblem for Toy {
        fn dim(&self) -> usize {
            2
        }
        fn lower(&self) -> &[f64] {
            &self.lo
        }
        fn upper(&self) -> &[f64] {
            &self.hi
        }
        fn var_scale(&self) -> &[f64] {
            &self.s
        }
        fn n_eq(&self) -> usize {
            1
        }
        fn n_ineq(&self) -> usize {
            1
        }
        fn objective(&self, z: &[f64]) -> f64 {
            (z[0] - 2.0).powi(2) + (z[1] - 1.0).powi(2)
        }
        fn add_objective_grad(&self, z: &[f64], g: &mut [f64]) {
            g[0] += 2.0 * (z[0] - 2.0);
            g[1] += 2.0 * (z[1] - 1.0);
        }
        fn objective_hessian(&self, _z: &[f64]) -> Triplets {
            vec![(0, 0, 2.0), (1, 1, 2.0)]
        }
        fn eq(&self, z: &[f64]) -> Vec<f64> {
            vec![z[0] + z[1] - 1.0]
        }
        fn eq_jacobian(&self, _z: &[f64]) -> Triplets {
            vec![(0, 0, 1.0), (0, 1, 1.0)]
        }
        fn ineq(&self, z: &[f64]) -> Vec<f64> {
            vec![z[0] * z[0] - z[1]]
        }
        fn ineq_jacobian(&self, z: &[f64]) -> Triplets {
            vec![(0, 0, 2.0 * z[0]), (0, 1, -1.0)]
        }
    }

    #[test]
    fn toy_problem_reaches_kkt_point() {
        let p = Toy {
            lo: vec![0.0, f64::NEG_INFINITY],
            hi: vec![10.0, f64::INFINITY],
            s: vec![1.0, 1.0],
        };
        let r = solve(&p, &[0.0, 0.0], &AlOptions::default());
        assert!(r.converged);
        // on x + y = 1 with x² <= y: x ∈ [0, (√5−1)/2]; objective decreases in x there
        let xs = (5f64.sqrt() - 1.0) / 2.0;
        assert!((r.z[0] - xs).abs() < 1e-6, "{:?}", r.z);
        assert!((r.z[1] - (1.0 - xs)).abs() < 1e-6);
        for w in r.merit_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn bound_constrained_minimum() {
        // unconstrained minimum (2, 1) lies outside x <= 1; equality pins y = 1 − x
        let p = Toy {
            lo: vec![0.0, f64::NEG_INFINITY],
            hi: vec![0.3, f64::INFINITY],
            s: vec![1.0, 1.0],
        };
        let r = solve(&p, &[0.1, 0.9], &AlOptions::default());
        assert!(r.converged);
        assert!((r.z[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn scaling_does_not_change_the_answer() {
        let p = Toy {
            lo: vec![0.0, f64::NEG_INFINITY],
            hi: vec![10.0, f64::INFINITY],
            s: vec![1e-2, 1e2],
        };
        let r = solve(&p, &[0.0, 0.0], &AlOptions::default());
        assert!(r.converged);
        let xs = (5f64.sqrt() - 1.0) / 2.0;
        assert!((r.z[0] - xs).abs() < 1e-6, "{:?}", r.z);
    }
}
