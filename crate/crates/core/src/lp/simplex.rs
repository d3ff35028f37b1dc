//! Dense two-phase tableau simplex.
//!
//! The problem is rewritten in standard form `min c·x, Ax = b, x >= 0`:
//! lower-bounded variables are shifted, upper-only variables are reflected,
//! free variables are split, and finite upper bounds on shifted variables
//! become explicit rows. Rows are scaled to unit infinity norm. Pricing is
//! Dantzig with a Harris ratio test until a run of degenerate pivots, then
//! Bland's rule for the rest of the solve. The optimal basis is re-solved with an LU factorization to
//! clean up accumulated tableau round-off.

use nalgebra::{DMatrix, DVector};

use super::{LpError, LpProblem, LpSolution, LpStatus};

const PIVOT_TOL: f64 = 1e-9;
const OPT_TOL: f64 = 1e-11;
const DEGENERATE_STREAK: usize = 50;
const HARRIS_TOL: f64 = 1e-9;

/// How an original variable is recovered from standard-form columns.
#[derive(Clone, Copy)]
enum VarMap {
    /// z = offset + sign * x[col]
    Single { col: usize, offset: f64, sign: f64 },
    /// z = x[pos] - x[neg]
    Split { pos: usize, neg: usize },
}

struct StandardForm {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
    /// Column that may start basic in each row (a slack with coefficient +1).
    slack_basis: Vec<Option<usize>>,
    maps: Vec<VarMap>,
}

fn standard_form(p: &LpProblem) -> StandardForm {
    let n = p.nvars();
    let mut maps = Vec::with_capacity(n);
    let mut ncols = 0;
    let mut upper_rows = Vec::new();
    for &(lo, hi) in &p.bounds {
        if lo.is_finite() {
            maps.push(VarMap::Single {
                col: ncols,
                offset: lo,
                sign: 1.0,
            });
            if hi.is_finite() {
                upper_rows.push((ncols, hi - lo));
            }
            ncols += 1;
        } else if hi.is_finite() {
            maps.push(VarMap::Single {
                col: ncols,
                offset: hi,
                sign: -1.0,
            });
            ncols += 1;
        } else {
            maps.push(VarMap::Split {
                pos: ncols,
                neg: ncols + 1,
            });
            ncols += 2;
        }
    }
    let nstruct = ncols;
    let n_le = p.ineq_lhs.nrows() + upper_rows.len();
    let total_cols = nstruct + n_le;

    let mut c = vec![0.0; total_cols];
    for (j, map) in maps.iter().enumerate() {
        match *map {
            VarMap::Single { col, sign, .. } => c[col] += sign * p.cost[j],
            VarMap::Split { pos, neg } => {
                c[pos] += p.cost[j];
                c[neg] -= p.cost[j];
            }
        }
    }

    // (row over standard columns, rhs, gets a slack)
    let mut raw: Vec<(Vec<f64>, f64, bool)> = Vec::new();
    let mut map_row =
        |entries: &mut dyn Iterator<Item = (usize, f64)>, rhs: f64, has_slack: bool| {
            let mut row = vec![0.0; total_cols];
            let mut rhs = rhs;
            for (j, v) in entries {
                match maps[j] {
                    VarMap::Single { col, offset, sign } => {
                        row[col] += sign * v;
                        rhs -= v * offset;
                    }
                    VarMap::Split { pos, neg } => {
                        row[pos] += v;
                        row[neg] -= v;
                    }
                }
            }
            raw.push((row, rhs, has_slack));
        };
    for k in 0..p.ineq_lhs.nrows() {
        map_row(&mut p.ineq_lhs.row(k), p.ineq_rhs[k], true);
    }
    for k in 0..p.eq_lhs.nrows() {
        map_row(&mut p.eq_lhs.row(k), p.eq_rhs[k], false);
    }
    for &(col, width) in &upper_rows {
        let mut row = vec![0.0; total_cols];
        row[col] = 1.0;
        raw.push((row, width, true));
    }

    let mut a = Vec::with_capacity(raw.len());
    let mut b = Vec::with_capacity(raw.len());
    let mut slack_basis = Vec::with_capacity(raw.len());
    let mut slack = nstruct;
    for (mut row, rhs, has_slack) in raw {
        let mut slack_col = None;
        if has_slack {
            row[slack] = 1.0;
            slack_col = Some(slack);
            slack += 1;
        }
        let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let sign = if rhs < 0.0 { -1.0 } else { 1.0 };
        row.iter_mut().for_each(|v| *v *= sign / scale);
        a.push(row);
        b.push(rhs * sign / scale);
        slack_basis.push(if sign > 0.0 { slack_col } else { None });
    }

    StandardForm {
        a,
        b,
        c,
        slack_basis,
        maps,
    }
}

struct Tableau {
    m: usize,
    width: usize,
    /// (m + 1) rows of `width + 1` entries; the last row is the reduced cost
    /// row, the last column the right-hand side.
    t: Vec<f64>,
    basis: Vec<usize>,
    eligible: Vec<bool>,
    bland: bool,
    degenerate_run: usize,
    iterations: usize,
    max_iterations: usize,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * (self.width + 1) + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.width)
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.width + 1;
        let piv = self.t[r * w + c];
        for j in 0..w {
            self.t[r * w + j] /= piv;
        }
        self.t[r * w + c] = 1.0;
        let pivot_row: Vec<f64> = self.t[r * w..(r + 1) * w].to_vec();
        for i in 0..=self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * w + c];
            if f != 0.0 {
                let row = &mut self.t[i * w..(i + 1) * w];
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        self.basis[r] = c;
    }

    /// Recomputes the reduced-cost row for `cost`.
    fn set_cost(&mut self, cost: &[f64]) {
        let w = self.width + 1;
        let obj = self.m * w;
        self.t[obj..obj + self.width].copy_from_slice(&cost[..self.width]);
        self.t[obj + self.width] = 0.0;
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                for j in 0..w {
                    self.t[obj + j] -= cb * self.t[i * w + j];
                }
            }
        }
    }

    fn entering(&self) -> Option<usize> {
        let obj = self.m * (self.width + 1);
        let mut best = None;
        let mut best_val = -OPT_TOL;
        for j in 0..self.width {
            if !self.eligible[j] {
                continue;
            }
            let d = self.t[obj + j];
            if self.bland {
                if d < -OPT_TOL {
                    return Some(j);
                }
            } else if d < best_val {
                best_val = d;
                best = Some(j);
            }
        }
        best
    }

    fn leaving(&self, c: usize) -> Option<usize> {
        if self.bland {
            return self.leaving_bland(c);
        }
        // Harris: bound the step with a small slack, then take the largest
        // pivot among the rows that fit under that bound
        let mut bound = f64::INFINITY;
        for i in 0..self.m {
            let a = self.at(i, c);
            if a > PIVOT_TOL {
                bound = bound.min((self.rhs(i).max(0.0) + HARRIS_TOL) / a);
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.m {
            let a = self.at(i, c);
            if a > PIVOT_TOL
                && self.rhs(i).max(0.0) / a <= bound
                && best.is_none_or(|(_, ba)| a > ba)
            {
                best = Some((i, a));
            }
        }
        best.map(|(i, _)| i)
    }

    fn leaving_bland(&self, c: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.m {
            let a = self.at(i, c);
            if a > PIVOT_TOL {
                let ratio = self.rhs(i).max(0.0) / a;
                best = match best {
                    None => Some((i, ratio)),
                    Some((bi, br)) => {
                        let tie = (ratio - br).abs() <= 1e-12 * (1.0 + br.abs());
                        if ratio < br && !tie || tie && self.basis[i] < self.basis[bi] {
                            Some((i, ratio))
                        } else {
                            Some((bi, br))
                        }
                    }
                };
            }
        }
        best.map(|(i, _)| i)
    }

    fn run(&mut self) -> Result<Outcome, LpError> {
        loop {
            let Some(c) = self.entering() else {
                return Ok(Outcome::Optimal);
            };
            let Some(r) = self.leaving(c) else {
                return Ok(Outcome::Unbounded);
            };
            let step = self.rhs(r).max(0.0) / self.at(r, c);
            if step <= 1e-12 {
                self.degenerate_run += 1;
                if self.degenerate_run >= DEGENERATE_STREAK {
                    self.bland = true;
                }
            } else {
                self.degenerate_run = 0;
            }
            self.pivot(r, c);
            self.iterations += 1;
            if self.iterations > self.max_iterations {
                return Err(LpError::NumericalFailure(format!(
                    "simplex iteration limit {} reached",
                    self.max_iterations
                )));
            }
        }
    }
}

pub(super) fn solve(p: &LpProblem, tol_feas: f64) -> Result<LpSolution, LpError> {
    let sf = standard_form(p);
    let m = sf.a.len();
    let nstd = sf.c.len();

    let mut art_rows = Vec::new();
    for (i, s) in sf.slack_basis.iter().enumerate() {
        if s.is_none() {
            art_rows.push(i);
        }
    }
    let width = nstd + art_rows.len();
    let mut t = vec![0.0; (m + 1) * (width + 1)];
    let mut basis = vec![0; m];
    for i in 0..m {
        let row = &mut t[i * (width + 1)..(i + 1) * (width + 1)];
        row[..nstd].copy_from_slice(&sf.a[i]);
        row[width] = sf.b[i];
    }
    for (k, &i) in art_rows.iter().enumerate() {
        t[i * (width + 1) + nstd + k] = 1.0;
        basis[i] = nstd + k;
    }
    for (i, s) in sf.slack_basis.iter().enumerate() {
        if let Some(col) = s {
            basis[i] = *col;
        }
    }

    let mut tab = Tableau {
        m,
        width,
        t,
        basis,
        eligible: vec![true; width],
        bland: false,
        degenerate_run: 0,
        iterations: 0,
        max_iterations: 50 * (m + width) + 1000,
    };

    if !art_rows.is_empty() {
        let mut phase1 = vec![0.0; width];
        phase1[nstd..].iter_mut().for_each(|v| *v = 1.0);
        tab.set_cost(&phase1);
        tab.run()?;
        let infeas: f64 = (0..m)
            .filter(|&i| tab.basis[i] >= nstd)
            .map(|i| tab.rhs(i).abs())
            .sum();
        if infeas > tol_feas {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                point: Vec::new(),
                objective: f64::NAN,
            });
        }
        // drive remaining zero-level artificials out where a structural pivot exists
        for i in 0..m {
            if tab.basis[i] < nstd {
                continue;
            }
            let col = (0..nstd)
                .filter(|&j| tab.at(i, j).abs() > PIVOT_TOL)
                .max_by(|&a, &b| tab.at(i, a).abs().total_cmp(&tab.at(i, b).abs()));
            if let Some(j) = col {
                tab.pivot(i, j);
            }
        }
        for j in nstd..width {
            tab.eligible[j] = false;
        }
        tab.bland = false;
        tab.degenerate_run = 0;
    }

    let cmax = sf.c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cscale = if cmax > 0.0 { 1.0 / cmax } else { 1.0 };
    let mut cost = vec![0.0; width];
    for j in 0..nstd {
        cost[j] = sf.c[j] * cscale;
    }
    tab.set_cost(&cost);
    if let Outcome::Unbounded = tab.run()? {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            point: Vec::new(),
            objective: f64::NEG_INFINITY,
        });
    }

    let x = refine_basic_solution(&sf, &tab, nstd);
    let point: Vec<f64> = sf
        .maps
        .iter()
        .map(|map| match *map {
            VarMap::Single { col, offset, sign } => offset + sign * x[col],
            VarMap::Split { pos, neg } => x[pos] - x[neg],
        })
        .collect();
    let objective = p.objective_at(&point);
    Ok(LpSolution {
        status: LpStatus::Optimal,
        point,
        objective,
    })
}

/// Standard-form primal values of the final basis, recomputed by LU on the
/// original (scaled) rows. Falls back to tableau values when the basis
/// matrix is singular or holds leftover artificials.
fn refine_basic_solution(sf: &StandardForm, tab: &Tableau, nstd: usize) -> Vec<f64> {
    let m = tab.m;
    let mut x = vec![0.0; nstd];
    for i in 0..m {
        if tab.basis[i] < nstd {
            x[tab.basis[i]] = tab.rhs(i).max(0.0);
        }
    }
    if m == 0 || tab.basis.iter().any(|&c| c >= nstd) {
        return x;
    }
    let bmat = DMatrix::from_fn(m, m, |i, k| sf.a[i][tab.basis[k]]);
    let rhs = DVector::from_column_slice(&sf.b);
    let Some(xb) = bmat.lu().solve(&rhs) else {
        return x;
    };
    // accept only if the refined point is at least as consistent and nonnegative
    if xb.iter().any(|v| !v.is_finite() || *v < -1e-9) {
        return x;
    }
    let mut refined = vec![0.0; nstd];
    for k in 0..m {
        refined[tab.basis[k]] = xb[k].max(0.0);
    }
    let resid = |v: &[f64]| {
        (0..m)
            .map(|i| (sf.a[i].iter().zip(v).map(|(a, b)| a * b).sum::<f64>() - sf.b[i]).abs())
            .fold(0.0f64, f64::max)
    };
    if resid(&refined) <= resid(&x) {
        refined
    } else {
        x
    }
}
