//! Command-line driver: each subcommand runs one pipeline stage from a single
//! JSON config.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use contactfunnel::config::{ConfigError, ToolkitConfig};
use contactfunnel::controller::Strategy;
use contactfunnel::dynamics::sx;
use contactfunnel::funnel::{
    default_state_bounds, goal_polytope, load_policy, save_policy, synthesize, verify_plant,
    write_schedule_csv, FunnelError, FunnelPolicy,
};
use contactfunnel::harness::{
    check_provenance, export_report, export_trace, run_batch, run_trial, Condition, HarnessError,
};
use contactfunnel::pwa::{build_pwa, load_pwa, save_pwa, PwaError, PwaTable};
use contactfunnel::trajopt::{
    load_trajectory, plan, save_trajectory, write_trajectory_csv, NominalTrajectory, TrajOptError,
};

#[derive(Parser)]
#[command(
    name = "contactfunnel",
    version,
    about = "Plan, certify and execute a contact-rich flip"
)]
struct Cli {
    /// Toolkit config file.
    #[arg(short, long, global = true, default_value = "configs/flip.json")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Funnel,
    Point,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Funnel => Strategy::FunnelTrack,
            StrategyArg::Point => Strategy::PointTrack,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportWhat {
    Trajectory,
    Schedule,
}

#[derive(Subcommand)]
enum Command {
    /// Plan the nominal trajectory.
    Plan,
    /// Linearize the trajectory into the PWA table.
    Pwa,
    /// Build the PWA table and synthesize the funnel policy.
    Funnel {
        /// Also certify the policy against the full plant.
        #[arg(long)]
        verify: bool,
    },
    /// Certify an existing policy against the full plant.
    VerifyFunnel,
    /// Run one closed-loop trial and write its trace.
    Simulate {
        /// Condition name from the config, or `none`.
        #[arg(long, default_value = "none")]
        disturbance: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Trace CSV; defaults to `<traces>/<disturbance>_seed<seed>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured recovery experiment and write the report.
    Batch {
        /// Restrict to these condition names (repeatable).
        #[arg(long)]
        disturbance: Vec<String>,
        /// Trials per condition.
        #[arg(long)]
        trials: Option<usize>,
        /// First seed; trials use consecutive seeds from here.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Write an artifact as CSV.
    Export {
        #[arg(long, value_enum)]
        what: ExportWhat,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its exit code: 1 config, 2 solver, 3 I/O.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(m: impl ToString) -> Self {
        Self {
            code: 1,
            message: m.to_string(),
        }
    }
    fn solver(m: impl ToString) -> Self {
        Self {
            code: 2,
            message: m.to_string(),
        }
    }
    fn io(m: impl ToString) -> Self {
        Self {
            code: 3,
            message: m.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::io(e),
            _ => Failure::config(e),
        }
    }
}

impl From<TrajOptError> for Failure {
    fn from(e: TrajOptError) -> Self {
        match e {
            TrajOptError::SpecInvalid(_) => Failure::config(e),
            TrajOptError::Infeasible(_) | TrajOptError::IterationLimit(_) => Failure::solver(e),
            TrajOptError::ParseError(_)
            | TrajOptError::InvariantViolation { .. }
            | TrajOptError::Io { .. } => Failure::io(e),
        }
    }
}

impl From<PwaError> for Failure {
    fn from(e: PwaError) -> Self {
        match e {
            PwaError::Dynamics { .. } => Failure::solver(e),
            PwaError::Invalid(_) | PwaError::Parse(_) | PwaError::Io { .. } => Failure::io(e),
        }
    }
}

impl From<FunnelError> for Failure {
    fn from(e: FunnelError) -> Self {
        match e {
            FunnelError::Parse(_) | FunnelError::Io { .. } => Failure::io(e),
            _ => Failure::solver(e),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::ConfigMismatch(_) | HarnessError::Invalid(_) => Failure::config(e),
            HarnessError::Io { .. } | HarnessError::Parse { .. } => Failure::io(e),
        }
    }
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir)
            .map_err(|e| Failure::io(format!("cannot create {}: {e}", dir.display()))),
        _ => Ok(()),
    }
}

fn check_hash(cfg: &ToolkitConfig, what: &str, found: &str) -> Result<(), Failure> {
    let expected = cfg.config_hash();
    if found != expected {
        return Err(Failure::config(format!(
            "{what} was built from config {found}, current config is {expected}; rerun the upstream stage"
        )));
    }
    Ok(())
}

fn trajectory(cfg: &ToolkitConfig) -> Result<NominalTrajectory, Failure> {
    let t = load_trajectory(&cfg.paths.trajectory)?;
    check_hash(cfg, "trajectory", &t.config_hash)?;
    Ok(t)
}

fn artifacts(cfg: &ToolkitConfig) -> Result<(NominalTrajectory, PwaTable, FunnelPolicy), Failure> {
    let t = trajectory(cfg)?;
    let pwa = load_pwa(&cfg.paths.pwa)?;
    let policy = load_policy(&cfg.paths.policy)?;
    check_provenance(&t, &pwa, &policy)?;
    Ok((t, pwa, policy))
}

fn deg(v: f64) -> f64 {
    v.to_degrees()
}

fn cmd_plan(cfg: &ToolkitConfig) -> Result<(), Failure> {
    let start = Instant::now();
    let t = plan(&cfg.trajopt, &cfg.plant, &cfg.config_hash())?;
    ensure_parent(&cfg.paths.trajectory)?;
    save_trajectory(&t, &cfg.paths.trajectory)?;
    let end = t.state(t.n);
    let d = &t.diagnostics;
    println!("trajectory: {}", cfg.paths.trajectory.display());
    println!("steps {} dt {}", t.n, t.dt);
    println!(
        "theta_N {:.3} deg, phi_N {:.3} deg",
        deg(end[sx::THETA]),
        deg(end[sx::PHI])
    );
    println!(
        "max defect {:.3e}, max complementarity {:.3e}",
        d.max_defect, d.max_complementarity
    );
    println!(
        "objective {:.6}, outer {} inner {}",
        d.objective, d.outer_iterations, d.inner_iterations
    );
    println!("solve time {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_pwa(cfg: &ToolkitConfig) -> Result<PwaTable, Failure> {
    let t = trajectory(cfg)?;
    let table = build_pwa(&t, &t.params)?;
    ensure_parent(&cfg.paths.pwa)?;
    save_pwa(&table, &cfg.paths.pwa)?;
    println!(
        "pwa table: {} ({} steps x {} modes)",
        cfg.paths.pwa.display(),
        table.n,
        table.n_modes()
    );
    Ok(table)
}

fn print_schedule(policy: &FunnelPolicy) {
    if let Some(s) = &policy.schedule {
        println!(
            "shrink schedule: a_0 {:.4e}, a_N {}, samples {} per step",
            s.a[0],
            s.a[s.a.len() - 1],
            s.samples
        );
    }
}

fn cmd_funnel(cfg: &ToolkitConfig, verify: bool) -> Result<(), Failure> {
    let table = cmd_pwa(cfg)?;
    let t = trajectory(cfg)?;
    let goal = goal_polytope(&t.limits);
    let start = Instant::now();
    let mut policy = synthesize(
        &table,
        &t,
        &goal,
        &default_state_bounds(cfg.controller.max_width),
        &cfg.funnel.synthesis,
    )?;
    println!("synthesis time {:.1} s", start.elapsed().as_secs_f64());
    let sigma = (0..=policy.n)
        .map(|i| policy.min_singular_value(i))
        .fold(f64::INFINITY, f64::min);
    let margin = policy.goal_margin();
    println!(
        "recursion residual {:.3e}",
        policy.recursion_residual(&table)
    );
    println!("min sigma(G_i) {sigma:.3e}");
    println!("goal containment margin {margin:.3e}");
    if verify {
        policy.schedule = Some(verify_plant(&policy, &t.params, &cfg.funnel.verify)?);
        print_schedule(&policy);
    }
    ensure_parent(&cfg.paths.policy)?;
    save_policy(&policy, &cfg.paths.policy)?;
    println!("policy: {}", cfg.paths.policy.display());
    Ok(())
}

fn cmd_verify(cfg: &ToolkitConfig) -> Result<(), Failure> {
    let (t, _, mut policy) = artifacts(cfg)?;
    policy.schedule = Some(verify_plant(&policy, &t.params, &cfg.funnel.verify)?);
    print_schedule(&policy);
    save_policy(&policy, &cfg.paths.policy)?;
    println!("policy: {}", cfg.paths.policy.display());
    Ok(())
}

fn condition(cfg: &ToolkitConfig, name: &str) -> Result<Condition, Failure> {
    if name == "none" {
        return Ok(Condition {
            name: "none".into(),
            disturbance: None,
            trials: 1,
        });
    }
    cfg.harness
        .conditions
        .iter()
        .find(|c| c.name == name)
        .cloned()
        .ok_or_else(|| {
            let known: Vec<&str> = cfg
                .harness
                .conditions
                .iter()
                .map(|c| c.name.as_str())
                .collect();
            Failure::config(format!(
                "unknown disturbance {name}; known: none, {}",
                known.join(", ")
            ))
        })
}

fn cmd_simulate(
    cfg: &ToolkitConfig,
    disturbance: &str,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let (t, pwa, policy) = artifacts(cfg)?;
    let cond = condition(cfg, disturbance)?;
    let trace = run_trial(
        &t,
        &policy,
        &pwa,
        &t.params,
        &cfg.controller,
        &cfg.harness.sim,
        cond.disturbance.as_ref(),
        seed,
    )?;
    let path = out.unwrap_or_else(|| {
        cfg.paths
            .traces
            .join(format!("{}_seed{seed}.csv", cond.name))
    });
    ensure_parent(&path)?;
    export_trace(&trace, &path)?;
    println!("trace: {}", path.display());
    println!(
        "outcome {:?} after {} ticks",
        trace.outcome,
        trace.ticks.len()
    );
    println!("{} {}/1", cond.name, u8::from(trace.outcome.is_success()));
    Ok(())
}

fn cmd_batch(
    cfg: &mut ToolkitConfig,
    names: &[String],
    trials: Option<usize>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let mut conditions = if names.is_empty() {
        cfg.harness.conditions.clone()
    } else {
        names
            .iter()
            .map(|n| condition(cfg, n))
            .collect::<Result<Vec<_>, _>>()?
    };
    if let Some(k) = trials {
        conditions.iter_mut().for_each(|c| c.trials = k);
    }
    let needed = conditions.iter().map(|c| c.trials).max().unwrap_or(0);
    if let Some(s) = seed {
        cfg.harness.seeds = (s..s + needed as u64).collect();
    } else if cfg.harness.seeds.len() < needed {
        let start = cfg.harness.seeds.iter().max().map_or(0, |m| m + 1);
        let extra = needed - cfg.harness.seeds.len();
        cfg.harness.seeds.extend(start..start + extra as u64);
    }
    if conditions.is_empty() {
        return Err(Failure::config("no conditions to run"));
    }
    cfg.validate_conditions(&conditions)?;
    let (t, pwa, policy) = artifacts(cfg)?;
    let (report, traces) = run_batch(
        &t,
        &policy,
        &pwa,
        &t.params,
        &cfg.controller,
        &cfg.harness.sim,
        &conditions,
        &cfg.harness.seeds,
    )?;
    std::fs::create_dir_all(&cfg.paths.traces)
        .map_err(|e| Failure::io(format!("cannot create {}: {e}", cfg.paths.traces.display())))?;
    for (cond, runs) in conditions.iter().zip(&traces) {
        for trace in runs {
            let path = cfg
                .paths
                .traces
                .join(format!("{}_seed{}.csv", cond.name, trace.seed));
            export_trace(trace, &path)?;
        }
    }
    ensure_parent(&cfg.paths.report)?;
    export_report(&report, &cfg.paths.report)?;
    println!("strategy {:?}", report.strategy);
    for line in report.summary_lines() {
        println!("{line}");
    }
    println!(
        "total {}/{}",
        report.total_successes(),
        report.total_trials()
    );
    let l = &report.latency;
    println!(
        "decide latency p50 {:.3} ms, p99 {:.3} ms, max {:.3} ms",
        l.p50 * 1e3,
        l.p99 * 1e3,
        l.max * 1e3
    );
    println!("report: {}", cfg.paths.report.display());
    Ok(())
}

fn cmd_export(cfg: &ToolkitConfig, what: ExportWhat, out: &Path) -> Result<(), Failure> {
    ensure_parent(out)?;
    let file = File::create(out)
        .map_err(|e| Failure::io(format!("cannot create {}: {e}", out.display())))?;
    let written = match what {
        ExportWhat::Trajectory => write_trajectory_csv(&trajectory(cfg)?, BufWriter::new(file)),
        ExportWhat::Schedule => {
            let policy = load_policy(&cfg.paths.policy)?;
            check_hash(cfg, "policy", &policy.config_hash)?;
            let schedule = policy.schedule.ok_or_else(|| {
                Failure::config("policy has no shrink schedule; run verify-funnel first")
            })?;
            write_schedule_csv(&schedule, BufWriter::new(file))
        }
    };
    written.map_err(|e| Failure::io(format!("cannot write {}: {e}", out.display())))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = ToolkitConfig::load(&cli.config)?;
    match cli.command {
        Command::Plan => cmd_plan(&cfg),
        Command::Pwa => cmd_pwa(&cfg).map(|_| ()),
        Command::Funnel { verify } => cmd_funnel(&cfg, verify),
        Command::VerifyFunnel => cmd_verify(&cfg),
        Command::Simulate {
            disturbance,
            seed,
            strategy,
            out,
        } => {
            if let Some(s) = strategy {
                cfg.controller.strategy = s.into();
            }
            cmd_simulate(&cfg, &disturbance, seed, out)
        }
        Command::Batch {
            disturbance,
            trials,
            seed,
            strategy,
        } => {
            if let Some(s) = strategy {
                cfg.controller.strategy = s.into();
            }
            cmd_batch(&mut cfg, &disturbance, trials, seed)
        }
        Command::Export { what, out } => cmd_export(&cfg, what, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
