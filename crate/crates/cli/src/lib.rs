//! `antislosh` command line: batch simulation, the P1/P2 comparison and the
//! live teleop service.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use antislosh_core::simulation::{compute_metrics, run_closed_loop, Metrics, Termination, TrajectoryLog};
use antislosh_teleop::{ServeConfig, TeleopServer};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or input files.
    #[error("{0}")]
    Usage(String),
    /// Failure while running.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "antislosh",
    version,
    about = "Slosh-aware NMPC for a planar arm carrying a liquid container"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one closed-loop simulation, write its log and metrics.
    Simulate(RunArgs),
    /// Run P1 and P2 on the same input and check their ordering.
    ComparePresets(RunArgs),
    /// Serve the live teleop websocket at /teleop.
    Serve(RunArgs),
    /// Print the effective configuration as TOML.
    PrintConfig(RunArgs),
}

/// Flags shared by all verbs; each overrides the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight preset, P1 or P2.
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML file with q1, q2, r; takes precedence over the preset.
    #[arg(long)]
    pub weights_file: Option<PathBuf>,
    /// Generator (ramp, step, sine, idle) or replay CSV path.
    #[arg(long)]
    pub input: Option<String>,
    /// Simulated seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Horizon stages.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Horizon stage length, seconds.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Trajectory log CSV (session log for serve).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics JSON (comparison summary for compare-presets).
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    /// Seed of the measurement noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Port for serve; 0 picks a free one.
    #[arg(long)]
    pub port: Option<u16>,
    /// No solver time budget and solve times logged as zero, so logs are
    /// byte-for-byte reproducible.
    #[arg(long)]
    pub deterministic: bool,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.preset {
            cfg.preset = v.clone();
            cfg.weights_file = None;
        }
        if let Some(v) = &self.weights_file {
            cfg.weights_file = Some(v.clone());
        }
        if let Some(v) = &self.input {
            cfg.input = v.clone();
        }
        if let Some(v) = self.duration {
            cfg.duration = v;
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        if let Some(v) = self.dt {
            cfg.dt = v;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = &self.metrics_out {
            cfg.metrics_out = Some(v.clone());
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.port {
            cfg.port = v;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        Ok(cfg)
    }
}

/// Metrics document written next to each log.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub preset: String,
    pub input: String,
    pub ticks: usize,
    pub termination: Termination,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// The preset-ordering checks on a P1/P2 pair.
pub fn ordering_checks(p1: &Metrics, p2: &Metrics) -> Vec<Check> {
    vec![
        Check {
            name: "beta_suppression",
            pass: p2.max_abs_beta <= 0.2 * p1.max_abs_beta,
            detail: format!("max|beta| P2 {:.4} <= 0.2 x P1 {:.4}", p2.max_abs_beta, p1.max_abs_beta),
        },
        Check {
            name: "tracking_order",
            pass: p1.rmse[0] < p2.rmse[0],
            detail: format!("RMSE_x P1 {:.4} < P2 {:.4}", p1.rmse[0], p2.rmse[0]),
        },
        Check {
            name: "delay_order",
            pass: p2.delay_ms > p1.delay_ms,
            detail: format!("delay P2 {:.0} ms > P1 {:.0} ms", p2.delay_ms, p1.delay_ms),
        },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub input: String,
    pub p1: RunReport,
    pub p2: RunReport,
    pub checks: Vec<Check>,
    pub all_passed: bool,
}

fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("reports are plain data");
    std::fs::write(path, text + "\n").map_err(runtime(&format!("writing {}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(runtime(&format!("creating {}", dir.display())))
        }
        _ => Ok(()),
    }
}

/// `run.csv` -> `run.metrics.json`.
fn metrics_path_for(log: &Path) -> PathBuf {
    log.with_extension("metrics.json")
}

/// `run.csv` -> `run_p1.csv`.
fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    path.with_file_name(format!("{stem}_{suffix}{ext}"))
}

fn run_one(cfg: &RunConfig) -> Result<(TrajectoryLog, RunReport), CliError> {
    let sim = cfg.sim_config()?;
    let mut source = cfg.input_source()?;
    let log = run_closed_loop(&sim, source.as_mut()).map_err(|e| CliError::Usage(e.to_string()))?;
    if log.is_empty() {
        return Err(CliError::Usage("duration gives zero control ticks".into()));
    }
    let report = RunReport {
        preset: sim.preset.clone(),
        input: cfg.input.clone(),
        ticks: log.len(),
        termination: log.termination.clone(),
        metrics: compute_metrics(&log),
    };
    Ok((log, report))
}

fn save(log: &TrajectoryLog, report: &RunReport, log_path: &Path, metrics_path: &Path) -> Result<(), CliError> {
    ensure_parent(log_path)?;
    ensure_parent(metrics_path)?;
    log.save_csv(log_path)
        .map_err(runtime(&format!("writing {}", log_path.display())))?;
    write_json(metrics_path, report)
}

fn diverged(report: &RunReport) -> Option<CliError> {
    match &report.termination {
        Termination::PlantDiverged { t, detail } => Some(CliError::Runtime(format!(
            "{}: plant diverged at t = {t:.3} s ({detail})",
            report.preset
        ))),
        Termination::SolverFailed { t, detail } => Some(CliError::Runtime(format!(
            "{}: controller failed at t = {t:.3} s ({detail})",
            report.preset
        ))),
        Termination::Completed => None,
    }
}

fn summary_line(report: &RunReport) -> String {
    let m = &report.metrics;
    format!(
        "{}: {} ticks, rmse_x {:.4} m, max|beta| {:.4} rad, delay {:.0} ms, solve mean {:.2} ms / p95 {:.2} ms, gate fires {}",
        report.preset,
        report.ticks,
        m.rmse[0],
        m.max_abs_beta,
        m.delay_ms,
        m.mean_solve_ms,
        m.p95_solve_ms,
        m.gate_fires
    )
}

pub fn cmd_simulate(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (log, report) = run_one(cfg)?;
    let log_path = cfg.out.clone().unwrap_or_else(|| "run.csv".into());
    let metrics_path = cfg.metrics_out.clone().unwrap_or_else(|| metrics_path_for(&log_path));
    save(&log, &report, &log_path, &metrics_path)?;
    let _ = writeln!(stdout, "{}", summary_line(&report));
    let _ = writeln!(
        stdout,
        "log: {}  metrics: {}",
        log_path.display(),
        metrics_path.display()
    );
    match diverged(&report) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn cmd_compare_presets(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<Comparison, CliError> {
    if cfg.weights_file.is_some() {
        return Err(CliError::Usage(
            "compare-presets runs the built-in presets; drop the weights file".into(),
        ));
    }
    let base = cfg.out.clone().unwrap_or_else(|| "run.csv".into());
    let mut reports = Vec::new();
    for name in ["P1", "P2"] {
        let one = RunConfig {
            preset: name.into(),
            ..cfg.clone()
        };
        let (log, report) = run_one(&one)?;
        let log_path = suffixed(&base, &name.to_ascii_lowercase());
        save(&log, &report, &log_path, &metrics_path_for(&log_path))?;
        let _ = writeln!(stdout, "{}", summary_line(&report));
        let _ = writeln!(stdout, "  log: {}", log_path.display());
        reports.push(report);
    }
    let p2 = reports.pop().expect("two runs");
    let p1 = reports.pop().expect("two runs");
    if let Some(e) = diverged(&p1).or_else(|| diverged(&p2)) {
        return Err(e);
    }

    let row = |label: &str, a: String, b: String| format!("{label:<22}{a:>12}{b:>12}");
    let _ = writeln!(stdout, "\n{}", row("", "P1".into(), "P2".into()));
    let (a, b) = (&p1.metrics, &p2.metrics);
    let lines = [
        row("rmse x [m]", format!("{:.4}", a.rmse[0]), format!("{:.4}", b.rmse[0])),
        row("rmse z [m]", format!("{:.4}", a.rmse[1]), format!("{:.4}", b.rmse[1])),
        row(
            "rmse theta [rad]",
            format!("{:.4}", a.rmse[2]),
            format!("{:.4}", b.rmse[2]),
        ),
        row(
            "max |beta| [rad]",
            format!("{:.4}", a.max_abs_beta),
            format!("{:.4}", b.max_abs_beta),
        ),
        row("delay [ms]", format!("{:.0}", a.delay_ms), format!("{:.0}", b.delay_ms)),
        row(
            "mean solve [ms]",
            format!("{:.2}", a.mean_solve_ms),
            format!("{:.2}", b.mean_solve_ms),
        ),
        row(
            "p95 solve [ms]",
            format!("{:.2}", a.p95_solve_ms),
            format!("{:.2}", b.p95_solve_ms),
        ),
    ];
    for line in lines {
        let _ = writeln!(stdout, "{line}");
    }

    let checks = ordering_checks(a, b);
    let _ = writeln!(stdout);
    for c in &checks {
        let _ = writeln!(
            stdout,
            "{} {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let all_passed = checks.iter().all(|c| c.pass);
    let comparison = Comparison {
        input: cfg.input.clone(),
        p1,
        p2,
        checks,
        all_passed,
    };
    let summary_path = cfg
        .metrics_out
        .clone()
        .unwrap_or_else(|| suffixed(&base, "summary").with_extension("json"));
    ensure_parent(&summary_path)?;
    write_json(&summary_path, &comparison)?;
    let _ = writeln!(stdout, "summary: {}", summary_path.display());
    if all_passed {
        Ok(comparison)
    } else {
        Err(CliError::Runtime("preset ordering checks failed".into()))
    }
}

pub fn cmd_serve(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let sim = cfg.sim_config()?;
    let log_path = cfg.out.clone().unwrap_or_else(|| "session.csv".into());
    ensure_parent(&log_path)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime("starting async runtime"))?;
    runtime.block_on(async {
        let addr = format!("{}:{}", cfg.host, cfg.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot listen on {addr}: {e}")))?;
        let config = ServeConfig {
            session_log: Some(log_path.clone()),
            ..ServeConfig::new(sim)
        };
        let preset = config.sim.preset.clone();
        let server = TeleopServer::start(listener, config)
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let _ = writeln!(stdout, "serving ws://{}/teleop (preset {preset})", server.local_addr());
        let _ = stdout.flush();
        shutdown_signal().await;
        let summary = server.shutdown().await.map_err(|e| CliError::Runtime(e.to_string()))?;
        let _ = writeln!(
            stdout,
            "stopped after {} ticks; session log: {}",
            summary.ticks,
            log_path.display()
        );
        Ok(())
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(&args.resolve()?, stdout),
        Command::ComparePresets(args) => cmd_compare_presets(&args.resolve()?, stdout).map(|_| ()),
        Command::Serve(args) => cmd_serve(&args.resolve()?, stdout),
        Command::PrintConfig(args) => {
            let cfg = args.resolve()?;
            cfg.sim_config()?;
            let _ = write!(stdout, "{}", cfg.to_toml());
            Ok(())
        }
    }
}
