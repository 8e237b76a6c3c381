//! Command-line driver for the pdmplab studies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod output;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use pdmplab::boxqp::{solve_boxqp, BoxQpProblem, CoordLabel};
use pdmplab::experiments::{
    draw_schedule, run_drift_diagnostic, run_refresh_balance, run_scaling_study, run_trajectory_gap, ExperimentSpec,
};
use pdmplab::flows::{
    flow_bps_high_refresh, flow_bps_snapping, flow_bps_with_refresh, flow_rwm_baseline, flow_zigzag_procedure,
    FlowTrajectory,
};
use pdmplab::potentials::BandSpec;
use pdmplab::rng::stream;
use pdmplab::samplers::{simulate, RunOptions, Sampler};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use config::{BalanceConfig, DriftConfig, FlowKind, FlowRunConfig, SimulateConfig};
use output::{header, num, opt_num, Outputs};

const THREADS_ENV: &str = "PDMPLAB_THREADS";

#[derive(Debug)]
pub enum CliError {
    /// Invalid input; exit code 2.
    Config(String),
    /// Failure while running a valid study; exit code 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<pdmplab::Error> for CliError {
    fn from(e: pdmplab::Error) -> Self {
        match e {
            pdmplab::Error::Configuration(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "pdmplab", version, about = "Transient-regime studies of piecewise deterministic Monte Carlo samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration of the study.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (falls back to PDMPLAB_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one sampler and export its event skeleton.
    Simulate,
    /// Integrate a limit flow.
    Flow,
    /// Jump counts to the level set across an eps grid.
    Scaling,
    /// Sup-distance between sampler paths and their limit flow.
    TrajectoryGap,
    /// BPS cost over a grid of refresh rates.
    RefreshBalance,
    /// Drift of exp(U) under the FEC or Coordinate jump chain.
    Drift,
    /// Solve a box-constrained QP given as JSON.
    QpSolve {
        /// Symmetric positive definite matrix, e.g. "[[1,-0.3],[-0.3,1]]".
        #[arg(long = "H")]
        h: String,
        /// Linear term, e.g. "[1,1]".
        #[arg(long = "c")]
        c: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "error" } else { "warn" }))
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                CliError::Config(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(s) => Some(s.trim().parse().map_err(|_| CliError::Config(format!("{THREADS_ENV}: not a thread count: {s:?}")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn load<T: DeserializeOwned>(path: Option<&Path>) -> Result<T, CliError> {
    let path = path.ok_or_else(|| CliError::Config("--config: a configuration file is required".into()))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("--config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    if let Command::QpSolve { h, c } = &cli.command {
        return qp_solve(h, c, cli);
    }
    let config = cli.config.as_deref();
    let out = Outputs::new(&cli.out, cli.quiet)?;
    match cli.command {
        Command::Simulate => {
            let mut cfg: SimulateConfig = load(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            run_simulate(&cfg, &out)
        }
        Command::Flow => {
            let mut cfg: FlowRunConfig = load(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            run_flow(&cfg, &out)
        }
        Command::Scaling => {
            let spec = experiment(config, cli.seed)?;
            run_scaling(&spec, &out)
        }
        Command::TrajectoryGap => {
            let spec = experiment(config, cli.seed)?;
            run_gap(&spec, &out)
        }
        Command::RefreshBalance => {
            let mut cfg: BalanceConfig = load(config)?;
            cfg.experiment.seed = cli.seed.unwrap_or(cfg.experiment.seed);
            cfg.experiment.validate()?;
            run_balance(&cfg, &out)
        }
        Command::Drift => {
            let mut cfg: DriftConfig = load(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            run_drift(&cfg, &out)
        }
        Command::QpSolve { .. } => unreachable!("handled above"),
    }
}

fn experiment(config: Option<&Path>, seed: Option<u64>) -> Result<ExperimentSpec, CliError> {
    let mut spec: ExperimentSpec = load(config)?;
    spec.seed = seed.unwrap_or(spec.seed);
    spec.validate()?;
    Ok(spec)
}

fn echo<T: Serialize>(out: &Outputs, cfg: &T) -> Result<(), CliError> {
    out.json("config_echo.json", cfg)
}

fn vec_cells(v: &DVector<f64>) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|x| num(*x))
}

fn run_simulate(cfg: &SimulateConfig, out: &Outputs) -> Result<(), CliError> {
    let inputs = cfg.resolve()?;
    let p = inputs.potential;
    let strategy = cfg.engine.unwrap_or_else(|| pdmplab::event_engine::EventStrategy::auto(p.as_ref()));
    let sampler = Sampler::new(cfg.sampler, p.clone(), cfg.eps, strategy)?;
    let band = cfg.gamma.map(BandSpec::new).transpose()?;
    let mut rng = stream(cfg.seed, &[0]);
    let opts = RunOptions { horizon: cfg.horizon, record_events: true, max_recorded_events: cfg.max_events, sample_stride: None };
    let run = simulate(&sampler, band.as_ref(), inputs.x0.clone(), inputs.v0, cfg.refresh.policy(cfg.eps), &opts, &mut rng)?;
    echo(out, cfg)?;
    let dim = p.dim();
    let row = |t: f64, x: &DVector<f64>, v: &DVector<f64>, marker: &str| {
        let mut r = vec![num(t)];
        r.extend(vec_cells(x));
        r.extend(vec_cells(v));
        r.push(marker.to_string());
        r
    };
    let mut rows = Vec::with_capacity(run.events.len() + 2);
    let v_start = run.events.first().map_or(&run.final_state.v, |e| &e.v_pre);
    rows.push(row(0.0, &inputs.x0, v_start, "start"));
    for e in &run.events {
        rows.push(row(e.time, &e.x, &e.v_post, &e.kind.label()));
    }
    let end = if run.hit { "level_set_hit" } else { "end" };
    rows.push(row(run.final_state.t, &run.final_state.x, &run.final_state.v, end));
    out.csv("trajectory.csv", &header(&["t"], dim, &["x", "v"], &["marker"]), rows)?;
    out.json(
        "run_summary.json",
        &json!({
            "hit": run.hit,
            "hit_time": run.hit_time,
            "band_exit_time": run.band_exit_time,
            "final_time": run.final_state.t,
            "counters": run.counters,
            "coordinate_events": run.coordinate_events,
            "events_truncated": run.events.len() >= cfg.max_events,
        }),
    )
}

fn flow_rows(f: &FlowTrajectory) -> Vec<Vec<String>> {
    let mut markers = f.markers.iter().peekable();
    f.samples
        .iter()
        .map(|s| {
            let mut labels = Vec::new();
            while let Some((t, m)) = markers.peek() {
                if *t <= s.t + 1e-12 * (1.0 + s.t.abs()) {
                    labels.push(m.label());
                    markers.next();
                } else {
                    break;
                }
            }
            let mut r = vec![num(s.t)];
            r.extend(vec_cells(&s.x));
            r.extend(vec_cells(&s.v));
            r.push(labels.join(";"));
            r
        })
        .collect()
}

fn run_flow(cfg: &FlowRunConfig, out: &Outputs) -> Result<(), CliError> {
    let config::FlowInputs { potential: p, x0, v0 } = cfg.resolve()?;
    let fc = cfg.flow_config()?;
    let band = BandSpec::new(cfg.gamma)?;
    let mut schedule = Vec::new();
    let f = match cfg.flow {
        FlowKind::BpsSnapping => flow_bps_snapping(&x0, v0.as_ref().expect("validated"), p.as_ref(), cfg.horizon, &fc)?,
        FlowKind::BpsRefresh => {
            let mut rng = stream(cfg.seed, &[0]);
            schedule = draw_schedule(cfg.refresh_rate, cfg.horizon, p.dim(), &mut rng);
            flow_bps_with_refresh(&x0, v0.as_ref().expect("validated"), &schedule, p.as_ref(), &band, cfg.horizon, &fc)?
        }
        FlowKind::BpsHighRefresh => flow_bps_high_refresh(&x0, p.as_ref(), &band, &fc)?,
        FlowKind::Rwm => flow_rwm_baseline(&x0, p.as_ref(), cfg.sigma.expect("validated"), &band, &fc)?,
        FlowKind::ZigZag => flow_zigzag_procedure(&x0, p.as_ref(), &band, &fc)?,
    };
    echo(out, cfg)?;
    out.csv("flow.csv", &header(&["t"], p.dim(), &["x", "v"], &["marker"]), flow_rows(&f))?;
    let pieces: Vec<_> = f
        .zz_pieces
        .iter()
        .map(|z| json!({ "t": z.t, "tangency": z.tangency, "v": z.v.as_slice() }))
        .collect();
    let refreshes: Vec<_> = schedule.iter().map(|(t, w)| json!({ "t": t, "w": w.as_slice() })).collect();
    out.json(
        "flow_summary.json",
        &json!({
            "terminal": f.terminal,
            "end_time": f.end_time(),
            "hit_time": f.hit_time(),
            "path_length": f.path_length(),
            "markers": f.markers.iter().map(|(t, m)| json!({ "t": t, "marker": m.label() })).collect::<Vec<_>>(),
            "zigzag_pieces": pieces,
            "refresh_schedule": refreshes,
        }),
    )
}

fn run_scaling(spec: &ExperimentSpec, out: &Outputs) -> Result<(), CliError> {
    let r = run_scaling_study(spec)?;
    echo(out, spec)?;
    let runs = r.rows.iter().map(|row| {
        vec![
            num(row.epsilon),
            row.replica.to_string(),
            row.jumps_bounce.to_string(),
            row.jumps_refresh.to_string(),
            row.jumps_flip.to_string(),
            row.deriv_evals.to_string(),
            row.hit.to_string(),
            opt_num(row.hit_time),
        ]
    });
    let cols = ["epsilon", "replica", "jumps_bounce", "jumps_refresh", "jumps_flip", "deriv_evals", "hit", "hit_time"];
    out.csv("scaling_runs.csv", &header(&cols, 0, &[], &[]), runs)?;
    let slope = r.slope;
    let summary = r.summary.iter().map(|s| {
        vec![
            num(s.epsilon),
            num(s.mean_jumps),
            num(s.se),
            opt_num(slope.map(|f| f.slope)),
            opt_num(slope.map(|f| f.ci_lo)),
            opt_num(slope.map(|f| f.ci_hi)),
        ]
    });
    let cols = ["epsilon", "mean_jumps", "se", "slope", "slope_ci_lo", "slope_ci_hi"];
    out.csv("scaling_summary.csv", &header(&cols, 0, &[], &[]), summary)?;
    out.json("scaling_report.json", &json!({ "summary": r.summary, "slope": r.slope }))?;
    if let Some(f) = slope {
        log::info!("slope {:.4} [{:.4}, {:.4}]", f.slope, f.ci_lo, f.ci_hi);
    }
    Ok(())
}

fn run_gap(spec: &ExperimentSpec, out: &Outputs) -> Result<(), CliError> {
    let r = run_trajectory_gap(spec)?;
    echo(out, spec)?;
    let rows = r.rows.iter().map(|g| vec![num(g.epsilon), g.replica.to_string(), num(g.sup_gap), num(g.window)]);
    out.csv("gap_runs.csv", &header(&["epsilon", "replica", "sup_gap", "window"], 0, &[], &[]), rows)?;
    let med = r.medians.iter().map(|(e, m)| vec![num(*e), num(*m)]);
    out.csv("gap_summary.csv", &header(&["epsilon", "median_sup_gap"], 0, &[], &[]), med)
}

fn run_balance(cfg: &BalanceConfig, out: &Outputs) -> Result<(), CliError> {
    let r = run_refresh_balance(&cfg.experiment, &cfg.rho_grid)?;
    echo(out, cfg)?;
    let rows = r.rows.iter().enumerate().map(|(i, b)| {
        vec![
            num(b.rho),
            num(b.mean_bounces),
            num(b.mean_refreshes),
            num(b.mean_total),
            num(b.se_total),
            num(b.bounces_per_refresh),
            num(b.mean_hit_time),
            num(b.jumps_per_unit_time),
            num(b.hit_fraction),
            (i == r.argmin).to_string(),
        ]
    });
    let cols = [
        "rho",
        "mean_bounces",
        "mean_refreshes",
        "mean_total",
        "se_total",
        "bounces_per_refresh",
        "mean_hit_time",
        "jumps_per_unit_time",
        "hit_fraction",
        "argmin",
    ];
    out.csv("refresh_balance.csv", &header(&cols, 0, &[], &[]), rows)
}

fn run_drift(cfg: &DriftConfig, out: &Outputs) -> Result<(), CliError> {
    let p = cfg.validate()?;
    let band = BandSpec::new(cfg.gamma)?;
    let r = run_drift_diagnostic(cfg.sampler, &p, &band, cfg.eps, cfg.points, cfg.replicas, cfg.seed)?;
    echo(out, cfg)?;
    let rows = r.points.iter().enumerate().map(|(i, q)| {
        let mut row = vec![i.to_string()];
        row.extend(q.x.iter().map(|x| num(*x)));
        row.push(num(q.relative_drift));
        row.push(num(q.se));
        row
    });
    out.csv("drift_points.csv", &header(&["point"], p.dim(), &["x"], &["relative_drift", "se"]), rows)?;
    out.json(
        "drift_summary.json",
        &json!({
            "beta_hat": r.beta_hat,
            "tail_frequency": r.tail_frequency,
            "tail_se": r.tail_se,
            "tail_bound": r.tail_bound,
        }),
    )
}

fn qp_solve(h: &str, c: &str, cli: &Cli) -> Result<(), CliError> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(h).map_err(|e| CliError::Config(format!("--H: {e}")))?;
    let c: Vec<f64> = serde_json::from_str(c).map_err(|e| CliError::Config(format!("--c: {e}")))?;
    let h: DMatrix<f64> = pdmplab::linalg::matrix_from_rows(&rows).map_err(|e| CliError::Config(format!("--H: {e}")))?;
    if c.len() != h.nrows() {
        return Err(CliError::Config(format!("--c: has length {}, --H has {} rows", c.len(), h.nrows())));
    }
    let problem = BoxQpProblem::new(h, DVector::from_vec(c)).map_err(|e| CliError::Config(format!("--H: {e}")))?;
    problem.validate().map_err(|e| CliError::Config(format!("--H: {e}")))?;
    let sol = solve_boxqp(&problem)?;
    let label = |l: &CoordLabel| match l {
        CoordLabel::ClippedPlus | CoordLabel::ClippedMinus => "clipped",
        CoordLabel::Snapping => "snapping",
    };
    let v: Vec<String> = sol.v.iter().map(|x| format!("{x}")).collect();
    let labels: Vec<&str> = sol.labels.iter().map(label).collect();
    println!("v* = ({})", v.join(", "));
    println!("labels = {}", labels.join(","));
    if cli.config.is_some() || cli.out != Path::new(".") {
        let out = Outputs::new(&cli.out, cli.quiet)?;
        out.json(
            "qp_solution.json",
            &json!({
                "v": sol.v.as_slice(),
                "alpha": sol.alpha.as_slice(),
                "beta": sol.beta.as_slice(),
                "labels": labels,
            }),
        )?;
    }
    Ok(())
}
