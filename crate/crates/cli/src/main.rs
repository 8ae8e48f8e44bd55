//! Command-line front end for the pack simulator.
//!
//! Settings layer in a fixed order: built-in defaults, then the
//! configuration file, then command-line flags. Exit codes are part of the
//! interface: 0 on success, 1 when the oracle check finds a mismatch, 2
//! for configuration errors, 3 when a run leaned on the solver fallback
//! for more than a tenth of its steps, 4 for I/O failures.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bess_core::config::{parse_config, ConfigError, PopulationSpec, SampledPopulation, SimConfig};
use bess_core::profile::{
    load_profile_csv, reference_profile, synth_udds_like, LoadProfile, ProfileError,
};
use bess_core::sim::{
    baseline_cell_level, baseline_uniform, brute_force_oracle, one_step_cell_objective,
    oracle_instance, run,
};
use bess_core::split::SplitScheme;
use bess_core::trace::{save_report, save_trace_csv, RunReport, SimTrace, TraceError};

#[derive(Parser)]
#[command(
    name = "bess",
    version,
    about = "Closed-loop simulator for clustered battery pack power management"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the clustered controller and the uniform-dispatch baseline,
    /// writing traces and a comparison report.
    Run(RunArgs),
    /// Run a reference controller on its own.
    Baseline(BaselineArgs),
    /// Compare runtime and losses across pack sizes, cluster caps and
    /// dispatch schemes.
    Benchmark(BenchArgs),
    /// Check the one-step program against an exhaustive grid search.
    Oracle(OracleArgs),
    /// Write a synthetic drive-cycle demand profile.
    SynthProfile(SynthArgs),
}

/// Flags shared by every command that runs the simulator. Each one
/// overrides the matching configuration key.
#[derive(Args)]
struct CommonArgs {
    /// Configuration file layered over built-in defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Demand profile CSV (t,p_out); the bundled reference cycle when absent.
    #[arg(long, value_name = "PATH")]
    profile: Option<PathBuf>,
    /// Cluster-to-cell dispatch scheme: equal, resistance or optimal.
    #[arg(long, value_name = "SCHEME")]
    scheme: Option<String>,
    /// Run seed; fixes the sampled population and every later draw.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory traces and reports are written into.
    #[arg(long, value_name = "DIR", default_value = "bess-out")]
    out_dir: PathBuf,
    /// Steps between clustering refreshes.
    #[arg(long, value_name = "STEPS")]
    recluster_period: Option<usize>,
    /// Upper bound on the cluster count.
    #[arg(long, value_name = "K")]
    k_max: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Which baseline: "uniform" splits the demand equally with no
    /// optimization, "cell-level" optimizes every cell as its own cluster.
    #[arg(long, default_value = "uniform")]
    kind: String,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated pack sizes.
    #[arg(long, default_value = "50,100")]
    sizes: String,
    /// Comma-separated cluster-count caps.
    #[arg(long, default_value = "15")]
    caps: String,
    /// Comma-separated dispatch schemes.
    #[arg(long, default_value = "equal")]
    schemes: String,
    /// Seconds of the demand profile each measured run covers.
    #[arg(long, default_value_t = 60.0)]
    duration_s: f64,
}

#[derive(Args)]
struct OracleArgs {
    /// Cells per instance; the exhaustive search caps out at 4.
    #[arg(long, default_value_t = 2)]
    cells: usize,
    /// Number of seeded random instances to check.
    #[arg(long, default_value_t = 20)]
    instances: u64,
    /// Grid points per current axis.
    #[arg(long, default_value_t = 1201)]
    resolution: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Worst allowed relative objective gap.
    #[arg(long, default_value_t = 0.02)]
    tolerance: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2400.0)]
    duration_s: f64,
    /// Regeneration peak; the profile's minimum is exactly its negation.
    #[arg(long, default_value_t = 6000.0)]
    peak_charge_w: f64,
    /// Discharge peak; the profile's maximum exactly.
    #[arg(long, default_value_t = 10000.0)]
    peak_discharge_w: f64,
    #[arg(long, default_value_t = 1.0)]
    dt_s: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output file.
    #[arg(long, value_name = "PATH", default_value = "profile.csv")]
    out: PathBuf,
}

/// Everything that can end a command early, tagged with its exit code.
enum Failure {
    Oracle(String),
    Config(String),
    Fallback(f64),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Oracle(_) => 1,
            Failure::Config(_) => 2,
            Failure::Fallback(_) => 3,
            Failure::Io(_) => 4,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<ProfileError> for Failure {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::Io { .. } => Failure::Io(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        Failure::Io(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Baseline(args) => cmd_baseline(args),
        Cmd::Benchmark(args) => cmd_benchmark(args),
        Cmd::Oracle(args) => cmd_oracle(args),
        Cmd::SynthProfile(args) => cmd_synth(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Oracle(m) | Failure::Config(m) | Failure::Io(m) => m.clone(),
                Failure::Fallback(frac) => format!(
                    "solver fallback on {:.1}% of steps exceeds the 10% budget",
                    100.0 * frac
                ),
            };
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}

/// Defaults, then the file, then the flags; validated at the end so a flag
/// can both break and repair a file-supplied value.
fn effective_config(common: &CommonArgs) -> Result<SimConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => SimConfig::default(),
    };
    if let Some(s) = &common.scheme {
        cfg.scheme = s.parse::<SplitScheme>().map_err(Failure::Config)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(period) = common.recluster_period {
        cfg.recluster_period = period;
    }
    if let Some(k) = common.k_max {
        cfg.k_max = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn effective_profile(common: &CommonArgs, cfg: &SimConfig) -> Result<LoadProfile, Failure> {
    let profile = match &common.profile {
        Some(path) => load_profile_csv(path, cfg.dt_s)?,
        None => reference_profile().resample(cfg.dt_s),
    };
    if profile.len() < cfg.steps() {
        return Err(Failure::Config(format!(
            "profile covers {} steps but the run needs {}",
            profile.len(),
            cfg.steps()
        )));
    }
    Ok(profile)
}

fn ensure_out_dir(common: &CommonArgs) -> Result<(), Failure> {
    fs::create_dir_all(&common.out_dir)
        .map_err(|e| Failure::Io(format!("{}: {e}", common.out_dir.display())))
}

/// Flags a profile whose peaks the pack cannot meet even at its current
/// limits. Transient overshoot is handled by the solver fallback, but a
/// systematically oversized demand (a profile written for a larger pack,
/// usually) turns the whole run into fallback dispatch, and that is worth
/// saying up front.
fn warn_if_demand_outruns_pack(cfg: &SimConfig, profile: &LoadProfile) {
    let (params, states) = cfg.population.build(cfg.seed);
    let mut deliverable = 0.0;
    let mut absorbable = 0.0;
    for (p, s) in params.iter().zip(&states) {
        let u = p
            .ocv
            .voltage(s.q)
            .expect("validated initial states sit inside the OCV domain");
        let r = p.chain_resistance();
        let i_peak = p.i_max.min(u / (2.0 * r));
        deliverable += u * i_peak - r * i_peak * i_peak;
        absorbable += u * p.i_min - r * p.i_min * p.i_min;
    }
    let steps = cfg.steps().min(profile.len());
    let demand = &profile.power_w()[..steps];
    let d_max = demand.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let d_min = demand.iter().cloned().fold(f64::INFINITY, f64::min);
    if d_max > deliverable || d_min < absorbable {
        eprintln!(
            "warning: demand spans [{d_min:.0}, {d_max:.0}] W but the pack can only cover \
             about [{absorbable:.0}, {deliverable:.0}] W; expect fallback dispatch"
        );
    }
}

fn fmt_balancing(t: Option<f64>) -> String {
    t.map_or_else(|| "never".into(), |s| format!("{s:.0} s"))
}

fn print_run_summary(trace: &SimTrace, steps: usize) {
    println!(
        "  loss {:.1} J, soc balanced {}, temp balanced {}",
        trace.cumulative_loss_j(),
        fmt_balancing(trace.soc_balancing_time_s()),
        fmt_balancing(trace.temp_balancing_time_s()),
    );
    println!(
        "  mean clusters {:.2}, mean solve {:.2} ms, fallback {:.1}% of {} steps",
        trace.mean_k(),
        1e3 * trace.mean_solver_time_s(),
        100.0 * trace.fallback_fraction(),
        steps,
    );
}

fn gate_on_fallback(trace: &SimTrace) -> Result<(), Failure> {
    let frac = trace.fallback_fraction();
    if frac > 0.10 {
        Err(Failure::Fallback(frac))
    } else {
        Ok(())
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let cfg = effective_config(&args.common)?;
    let profile = effective_profile(&args.common, &cfg)?;
    ensure_out_dir(&args.common)?;
    warn_if_demand_outruns_pack(&cfg, &profile);

    println!(
        "pack of {} cells, {} steps of {} s, scheme {}, seed {}",
        cfg.population.len(),
        cfg.steps(),
        cfg.dt_s,
        cfg.scheme,
        cfg.seed
    );
    let trace = run(&cfg, &profile);
    println!("clustered run:");
    print_run_summary(&trace, cfg.steps());

    let baseline = baseline_uniform(&cfg, &profile);
    println!("uniform baseline: loss {:.1} J", baseline.cumulative_loss_j());

    let out = &args.common.out_dir;
    let trace_path = out.join("trace.csv");
    let baseline_path = out.join("baseline_trace.csv");
    let report_path = out.join("report.txt");
    save_trace_csv(&trace, &trace_path)?;
    save_trace_csv(&baseline, &baseline_path)?;

    let mut report = RunReport::from_traces(&trace, &baseline);
    report.artifacts = vec![
        ("trace".into(), trace_path.display().to_string()),
        ("baseline_trace".into(), baseline_path.display().to_string()),
    ];
    save_report(&report, &report_path)?;

    println!(
        "loss reduction {:+.2}% against uniform dispatch; report at {}",
        report.loss_reduction_pct,
        report_path.display()
    );
    gate_on_fallback(&trace)
}

fn cmd_baseline(args: BaselineArgs) -> Result<(), Failure> {
    let cfg = effective_config(&args.common)?;
    let profile = effective_profile(&args.common, &cfg)?;
    ensure_out_dir(&args.common)?;
    warn_if_demand_outruns_pack(&cfg, &profile);

    let (trace, stem) = match args.kind.as_str() {
        "uniform" => (baseline_uniform(&cfg, &profile), "uniform"),
        "cell-level" => (baseline_cell_level(&cfg, &profile), "cell_level"),
        other => {
            return Err(Failure::Config(format!(
                "unknown baseline {other:?} (expected uniform or cell-level)"
            )))
        }
    };

    println!("{} baseline over {} steps:", args.kind, cfg.steps());
    print_run_summary(&trace, cfg.steps());

    let path = args.common.out_dir.join(format!("{stem}_trace.csv"));
    save_trace_csv(&trace, &path)?;
    println!("trace at {}", path.display());
    gate_on_fallback(&trace)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| Failure::Config(format!("bad {what} entry {p:?}")))
        })
        .collect()
}

fn with_pack_size(cfg: &SimConfig, n: usize) -> SimConfig {
    let sampled = match &cfg.population {
        PopulationSpec::Sampled(s) => SampledPopulation { n, ..s.clone() },
        PopulationSpec::Explicit(_) => SampledPopulation {
            n,
            ..Default::default()
        },
    };
    SimConfig {
        population: PopulationSpec::Sampled(sampled),
        ..cfg.clone()
    }
}

fn scaled_profile(profile: &LoadProfile, factor: f64) -> LoadProfile {
    LoadProfile::from_samples(
        profile.start_s(),
        profile.dt_s(),
        profile.power_w().iter().map(|p| p * factor).collect(),
    )
}

/// One measured run per (size, cap, scheme) cell of the matrix, with the
/// per-step optimization time of the cell-level controller at the same
/// size as the yardstick. The demand is scaled by pack size relative to
/// the configured population, keeping per-cell stress constant across
/// sizes. Times cover aggregation, program build, solve and dispatch;
/// plant stepping and clustering are excluded on both sides of the
/// comparison.
fn cmd_benchmark(args: BenchArgs) -> Result<(), Failure> {
    let sizes: Vec<usize> = parse_list(&args.sizes, "size")?;
    let caps: Vec<usize> = parse_list(&args.caps, "cap")?;
    let scheme_names: Vec<String> = parse_list(&args.schemes, "scheme")?;
    let schemes: Vec<SplitScheme> = scheme_names
        .iter()
        .map(|s| s.parse::<SplitScheme>().map_err(Failure::Config))
        .collect::<Result<_, _>>()?;
    if sizes.is_empty() || caps.is_empty() || schemes.is_empty() {
        return Err(Failure::Config("benchmark matrix is empty".into()));
    }
    if args.duration_s <= 0.0 {
        return Err(Failure::Config("duration must be positive".into()));
    }

    let base = {
        let mut cfg = effective_config(&args.common)?;
        cfg.duration_s = args.duration_s;
        cfg
    };
    ensure_out_dir(&args.common)?;

    let header = format!(
        "{:>6} {:>12} {:>5} {:>7} {:>10} {:>10} {:>9} {:>9} {:>9}",
        "cells", "scheme", "cap", "mean_k", "cell_ms", "run_ms", "time_cut", "loss_cut", "fallback"
    );
    println!("{header}");
    let mut csv = String::from(
        "cells,scheme,cap,mean_k,cell_ms_per_step,run_ms_per_step,time_cut_pct,loss_cut_pct,fallback_pct\n",
    );

    let reference_n = base.population.len();
    for &n in &sizes {
        let cfg_n = with_pack_size(&base, n);
        let profile = scaled_profile(
            &effective_profile(&args.common, &cfg_n)?,
            n as f64 / reference_n as f64,
        );
        let cell_trace = baseline_cell_level(&cfg_n, &profile);
        let cell_ms = 1e3 * cell_trace.mean_solver_time_s();
        let uniform_loss = baseline_uniform(&cfg_n, &profile).cumulative_loss_j();

        for &scheme in &schemes {
            for &cap in &caps {
                let cfg_run = SimConfig {
                    scheme,
                    k_max: cap,
                    ..cfg_n.clone()
                };
                let trace = run(&cfg_run, &profile);
                let run_ms = 1e3 * trace.mean_solver_time_s();
                let time_cut = 100.0 * (1.0 - run_ms / cell_ms);
                let loss_cut = if uniform_loss > 0.0 {
                    100.0 * (uniform_loss - trace.cumulative_loss_j()) / uniform_loss
                } else {
                    0.0
                };
                let fallback = 100.0 * trace.fallback_fraction();
                println!(
                    "{:>6} {:>12} {:>5} {:>7.2} {:>10.2} {:>10.2} {:>8.1}% {:>8.2}% {:>8.1}%",
                    n,
                    scheme.to_string(),
                    cap,
                    trace.mean_k(),
                    cell_ms,
                    run_ms,
                    time_cut,
                    loss_cut,
                    fallback
                );
                csv.push_str(&format!(
                    "{},{},{},{:.4},{:.4},{:.4},{:.2},{:.3},{:.2}\n",
                    n,
                    scheme,
                    cap,
                    trace.mean_k(),
                    cell_ms,
                    run_ms,
                    time_cut,
                    loss_cut,
                    fallback
                ));
            }
        }
    }

    let csv_path = args.common.out_dir.join("benchmark.csv");
    fs::write(&csv_path, csv).map_err(|e| Failure::Io(format!("{}: {e}", csv_path.display())))?;
    println!("table at {}", csv_path.display());
    Ok(())
}

/// Solves each seeded instance twice, by the convex program and by the
/// exhaustive grid, and fails when any relative objective gap exceeds the
/// tolerance.
fn cmd_oracle(args: OracleArgs) -> Result<(), Failure> {
    if !(1..=4).contains(&args.cells) {
        return Err(Failure::Config(
            "the exhaustive search handles 1 to 4 cells".into(),
        ));
    }
    if args.resolution < 51 {
        return Err(Failure::Config("resolution must be at least 51".into()));
    }
    if args.instances == 0 {
        return Err(Failure::Config("need at least one instance".into()));
    }

    let defaults = SimConfig::default();
    let deltas = defaults.cell_deltas;
    let lambda = defaults.lambda_cell;
    let solver = defaults.solver;

    let mut worst: f64 = 0.0;
    for index in 0..args.instances {
        let (params, states, demand_w) = oracle_instance(args.seed, index, args.cells);
        let oracle = brute_force_oracle(
            &params, &states, demand_w, args.resolution, deltas, lambda, 1.0, 298.0,
        )
        .ok_or_else(|| {
            Failure::Oracle(format!("instance {index}: no feasible grid point"))
        })?;
        let solved = one_step_cell_objective(
            &params, &states, demand_w, deltas, lambda, 1.0, 298.0, &solver,
        )
        .ok_or_else(|| Failure::Oracle(format!("instance {index}: solver did not converge")))?;
        let rel = (solved - oracle.objective).abs() / oracle.objective.abs().max(1e-9);
        worst = worst.max(rel);
        println!(
            "instance {index:>3}: demand {demand_w:>8.2} W, grid {:.6e}, solver {:.6e}, gap {:.3}%",
            oracle.objective,
            solved,
            100.0 * rel
        );
    }

    println!(
        "worst gap {:.3}% over {} instances of {} cells",
        100.0 * worst,
        args.instances,
        args.cells
    );
    if worst > args.tolerance {
        return Err(Failure::Oracle(format!(
            "worst gap {:.3}% exceeds the {:.2}% tolerance",
            100.0 * worst,
            100.0 * args.tolerance
        )));
    }
    Ok(())
}


fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    if args.peak_charge_w <= 0.0 || args.peak_discharge_w <= 0.0 {
        return Err(Failure::Config("peaks must be positive".into()));
    }
    if args.dt_s <= 0.0 || args.duration_s < args.dt_s {
        return Err(Failure::Config(
            "duration must cover at least one step".into(),
        ));
    }
    let profile = synth_udds_like(
        args.duration_s,
        args.peak_charge_w,
        args.peak_discharge_w,
        args.dt_s,
        args.seed,
    );
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    }
    let file = fs::File::create(&args.out)
        .map_err(|e| Failure::Io(format!("{}: {e}", args.out.display())))?;
    bess_core::profile::write_profile_csv(&profile, file)
        .map_err(|e| Failure::Io(format!("{}: {e}", args.out.display())))?;
    println!(
        "{} samples at {} s into {}",
        profile.len(),
        profile.dt_s(),
        args.out.display()
    );
    Ok(())
}
