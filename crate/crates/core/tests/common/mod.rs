#![allow(dead_code)]

pub mod oracles;

use std::sync::OnceLock;

use contactfunnel::dynamics::PlantParams;
use contactfunnel::funnel::{
    default_state_bounds, goal_polytope, synthesize, FunnelOptions, FunnelPolicy,
};
use contactfunnel::pwa::{build_pwa, PwaTable};
use contactfunnel::trajopt::{plan, NominalTrajectory, TrajOptSpec};

/// The default flip plan, solved once per test binary.
pub fn flip() -> &'static NominalTrajectory {
    static PLAN: OnceLock<NominalTrajectory> = OnceLock::new();
    PLAN.get_or_init(|| {
        plan(&TrajOptSpec::default(), &PlantParams::default(), "test").expect("flip plan")
    })
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Nominal-mode PWA table of the flip plan.
pub fn flip_pwa() -> &'static PwaTable {
    static TABLE: OnceLock<PwaTable> = OnceLock::new();
    TABLE.get_or_init(|| build_pwa(flip(), &flip().params).expect("pwa table"))
}

/// Funnel of the flip plan with default options.
pub fn flip_funnel() -> &'static FunnelPolicy {
    static POLICY: OnceLock<FunnelPolicy> = OnceLock::new();
    POLICY.get_or_init(|| {
        let t = flip();
        synthesize(
            flip_pwa(),
            t,
            &goal_polytope(&t.limits),
            &default_state_bounds(0.08),
            &FunnelOptions::default(),
        )
        .expect("funnel")
    })
}
