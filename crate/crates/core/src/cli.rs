//! `koopdev` command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{RunConfig, TOOL};
use crate::deviation::{analyze_point, grid_sweep, write_sweep_csv, DeviationReport, SweepSummary};
use crate::dynamics::fmt_f64;
use crate::edmd::{collect_data, fit_model, DataSet, LiftedBilinearModel};
use crate::error::Error;
use crate::exec::{with_jobs, Execution};
use crate::lifting::build_monomial_basis;
use crate::verify::{self, Verifier};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_ACCEPTANCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "koopdev", version, about = "EDMD bilinear optimal control with optimality-deviation bounds")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Override any config key, e.g. `--set horizon=10`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the excited plant and write the snapshot dataset.
    GenData {
        #[arg(long)]
        n_traj: Option<usize>,
        #[arg(long)]
        t_len: Option<f64>,
        /// Sampling step of the data.
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        u_max: Option<f64>,
    },
    /// Fit the lifted bilinear model and its error coefficients.
    Identify {
        /// Dataset CSV (default `<out>/data.csv`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        degree: Option<u32>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Bounds and measurements at one initial state.
    Analyze {
        /// Model file (default `<out>/model.json`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Initial state, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        x0: Vec<f64>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Grid sweep over the analysis region.
    Sweep {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Run the acceptance checks.
    Verify {
        /// `slow` runs only the sub-second checks.
        #[arg(long, value_parser = ["slow"])]
        skip: Option<String>,
        /// Use this model in the grid and adversarial checks instead of
        /// identifying one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_USAGE },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses the arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("koopdev: {}", e.message);
            e.code
        }
    }
}

fn set_key(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{assignment}'")))?;
    let key = key.trim();
    // Parse the value as TOML; bare words fall back to strings.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    table.insert(key.to_string(), value);
    Ok(())
}

/// File values, then `--set`, then dedicated flags.
pub fn resolve_config(common: &Common, apply: impl FnOnce(&mut RunConfig)) -> CliResult<RunConfig> {
    let mut table = match &common.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?
            .parse::<toml::Table>()
            .map_err(|e| usage(format!("config {}: {e}", p.display())))?,
        None => toml::Table::new(),
    };
    for s in &common.set {
        set_key(&mut table, s)?;
    }
    let mut cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| usage(format!("config: {e}")))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> CliResult<i32> {
    let common = &cli.common;
    let jobs = common.jobs;
    match cli.command {
        Command::GenData { n_traj, t_len, step, u_max } => {
            let cfg = resolve_config(common, |c| {
                c.n_traj = n_traj.unwrap_or(c.n_traj);
                c.t_len = t_len.unwrap_or(c.t_len);
                c.data_step = step.unwrap_or(c.data_step);
                c.u_max = u_max.unwrap_or(c.u_max);
            })?;
            let (path, data) = cmd_gen_data(&cfg, jobs)?;
            println!(
                "wrote {} snapshots from {} trajectories to {}",
                data.len(),
                data.meta.n_traj,
                path.display()
            );
            println!("excitation: {}", data.meta.excitation);
            Ok(EXIT_OK)
        }
        Command::Identify { data, degree, beta } => {
            let cfg = resolve_config(common, |c| {
                c.degree = degree.unwrap_or(c.degree);
                c.beta = beta.unwrap_or(c.beta);
            })?;
            let data = data.unwrap_or_else(|| cfg.out.join("data.csv"));
            let (path, m) = cmd_identify(&cfg, &data, jobs)?;
            let s = m.residual_stats;
            println!("model written to {}", path.display());
            println!("lifted dim {}  rank {}", m.lifted_dim(), m.rank);
            println!("residual norms: max {:.6e}  mean {:.6e}  rms {:.6e}", s.max, s.mean, s.rms);
            println!("c1 = {:.6e}  c2 = {:.6e}  L_p = {:.6}", m.c1, m.c2, m.lipschitz.value);
            for w in &m.warnings {
                println!("warning: {w}");
            }
            Ok(EXIT_OK)
        }
        Command::Analyze { model, x0, horizon, step } => {
            let cfg = resolve_config(common, |c| {
                c.horizon = horizon.unwrap_or(c.horizon);
                c.step = step.unwrap_or(c.step);
            })?;
            let model = model.unwrap_or_else(|| cfg.out.join("model.json"));
            let (path, report) = cmd_analyze(&cfg, &model, &x0, jobs)?;
            print_report(&report);
            println!("json: {}", path.display());
            Ok(EXIT_OK)
        }
        Command::Sweep { model, resolution, horizon, step } => {
            let cfg = resolve_config(common, |c| {
                c.resolution = resolution.unwrap_or(c.resolution);
                c.horizon = horizon.unwrap_or(c.horizon);
                c.step = step.unwrap_or(c.step);
            })?;
            let model = model.unwrap_or_else(|| cfg.out.join("model.json"));
            let out = cmd_sweep(&cfg, &model, jobs)?;
            let s = &out.summary_data;
            println!("{} points written to {}", s.points, out.csv.display());
            println!(
                "violations: value {}  controller {}  unexplained {}  failed {}",
                s.violations_thm5, s.violations_thm6, s.unexplained_violations, s.failed
            );
            println!("summary: {}", out.summary.display());
            Ok(EXIT_OK)
        }
        Command::Verify { skip, model } => {
            let cfg = resolve_config(common, |_| {})?;
            if let Some(m) = &model {
                if !m.exists() {
                    return Err(usage(format!("model file {} not found", m.display())));
                }
            }
            let outcomes = cmd_verify(&cfg, skip.is_some(), model, jobs);
            Ok(if verify::all_passed(&outcomes) { EXIT_OK } else { EXIT_ACCEPTANCE })
        }
    }
}

fn create_out(cfg: &RunConfig) -> CliResult<()> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| usage(format!("cannot create {}: {e}", cfg.out.display())))
}

fn load_model(path: &Path) -> CliResult<LiftedBilinearModel> {
    if !path.exists() {
        return Err(usage(format!("model file {} not found", path.display())));
    }
    Ok(LiftedBilinearModel::load(path)?)
}

pub fn cmd_gen_data(cfg: &RunConfig, jobs: usize) -> CliResult<(PathBuf, DataSet)> {
    create_out(cfg)?;
    let system = cfg.system()?;
    let data = with_jobs(jobs, || {
        collect_data(
            system.as_ref(),
            cfg.n_traj,
            cfg.t_len,
            cfg.data_step,
            &cfg.region()?,
            &cfg.excitation(),
            cfg.seed,
        )
    })?;
    let path = cfg.out.join("data.csv");
    data.save(&path, &cfg.provenance_line())?;
    Ok((path, data))
}

pub fn cmd_identify(cfg: &RunConfig, data: &Path, jobs: usize) -> CliResult<(PathBuf, LiftedBilinearModel)> {
    if !data.exists() {
        return Err(usage(format!("data file {} not found", data.display())));
    }
    let data = DataSet::load(data)?;
    let basis = build_monomial_basis(data.state_dim(), cfg.degree)?;
    let model = with_jobs(jobs, || fit_model(&data, &basis, &cfg.fit_options()?))?;
    create_out(cfg)?;
    let path = cfg.out.join("model.json");
    model.save(&path)?;
    Ok((path, model))
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    tool: &'a str,
    config_digest: String,
    #[serde(flatten)]
    body: &'a T,
}

pub fn cmd_analyze(cfg: &RunConfig, model: &Path, x0: &[f64], jobs: usize) -> CliResult<(PathBuf, DeviationReport)> {
    let model = load_model(model)?;
    let system = cfg.system()?;
    let weights = cfg.weights()?;
    let report = with_jobs(jobs, || analyze_point(system.as_ref(), &model, &weights, x0, &cfg.deviation_options()))?;
    create_out(cfg)?;
    let path = cfg.out.join("analyze.json");
    let stamped = Stamped {
        tool: TOOL,
        config_digest: cfg.digest(),
        body: &report,
    };
    let text = serde_json::to_string_pretty(&stamped).map_err(Error::from)?;
    std::fs::write(&path, text + "\n").map_err(Error::from)?;
    Ok((path, report))
}

fn print_report(r: &DeviationReport) {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_else(|| "-".into());
    let rows = [
        ("x0", format!("{:?}", r.x0)),
        ("V0*", fmt_f64(r.v0_star)),
        ("gradient energy", fmt_f64(r.grad_energy)),
        ("dV_max", fmt_f64(r.delta_v_max)),
        ("V measured", fmt_f64(r.v_measured)),
        ("V* analytic", opt(r.v_star_analytic)),
        ("V* - V0*", opt(r.value_gap)),
        ("controller deviation", opt(r.controller_dev_integral)),
        ("controller bound", fmt_f64(r.controller_dev_bound)),
        ("value bound ok", r.ok_thm5.to_string()),
        ("controller bound ok", r.ok_thm6.to_string()),
        ("flags", r.diagnostics.flags().join(";")),
    ];
    for (k, v) in rows {
        println!("{k:<22}{v}");
    }
}

pub struct SweepOutput {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub summary_data: SweepSummary,
}

pub fn cmd_sweep(cfg: &RunConfig, model: &Path, jobs: usize) -> CliResult<SweepOutput> {
    let model = load_model(model)?;
    let system = cfg.system()?;
    let reports = with_jobs(jobs, || {
        grid_sweep(
            system.as_ref(),
            &model,
            &cfg.weights()?,
            &cfg.region()?,
            cfg.resolution,
            &cfg.deviation_options(),
            Execution::Parallel,
        )
    })?;
    create_out(cfg)?;
    let csv = cfg.out.join("sweep.csv");
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &reports, Some(&cfg.provenance_line()))?;
    std::fs::write(&csv, buf).map_err(Error::from)?;
    let summary_data = SweepSummary::from_reports(&reports, Some(cfg.digest()));
    let summary = cfg.out.join("summary.json");
    let mut f = std::fs::File::create(&summary).map_err(Error::from)?;
    serde_json::to_writer_pretty(&mut f, &summary_data).map_err(Error::from)?;
    writeln!(f).map_err(Error::from)?;
    Ok(SweepOutput { csv, summary, summary_data })
}

pub fn cmd_verify(cfg: &RunConfig, skip_slow: bool, model: Option<PathBuf>, jobs: usize) -> Vec<verify::Outcome> {
    let v = Verifier::new(cfg.clone(), jobs, model);
    let outcomes: Vec<_> = verify::CRITERIA
        .iter()
        .filter(|c| !(skip_slow && c.is_slow()))
        .map(|c| {
            let o = v.run(c.id);
            println!("{}", o.line());
            o
        })
        .collect();
    let passed = outcomes.iter().filter(|o| o.passed()).count();
    println!("{passed}/{} criteria passed", outcomes.len());
    outcomes
}
