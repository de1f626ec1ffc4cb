//! The acceptance checks, shared by `koopdev verify` and the acceptance
//! test target.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cli;
use crate::config::RunConfig;
use crate::control::solve_care;
use crate::deviation::{
    adversarial_error_sweep, controller_deviation_bound, grid_sweep, value_deviation_bound, DeviationReport,
    SweepSummary,
};
use crate::dynamics::{
    hjb_residual, integrate, paper_example_system, quadratic_cost, AnalyticValue, ControlAffineSystem, FnSystem,
    IntegrationOptions, OcpWeights,
};
use crate::edmd::{collect_data, fit_error_coefficients, fit_model, Excitation, FitOptions, LiftedBilinearModel};
use crate::error::Result;
use crate::exec::{with_jobs, Execution};
use crate::lifting::{build_monomial_basis, Region};
use crate::linalg;

/// Share of grid points that must satisfy each bound.
pub const PASS_RATE: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub limit: Duration,
}

impl Criterion {
    /// Checks with a time limit above one second.
    pub fn is_slow(&self) -> bool {
        self.limit > Duration::from_secs(1)
    }
}

const fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

pub const CRITERIA: [Criterion; 10] = [
    Criterion { id: 1, name: "analytic HJB certificate", limit: secs(1) },
    Criterion { id: 2, name: "optimal cost reproduction", limit: secs(5) },
    Criterion { id: 3, name: "EDMD exact recovery", limit: secs(10) },
    Criterion { id: 4, name: "coefficient fit optimality", limit: secs(10) },
    Criterion { id: 5, name: "CARE certificate", limit: secs(10) },
    Criterion { id: 6, name: "value deviation bound on grid", limit: secs(600) },
    Criterion { id: 7, name: "controller deviation bound on grid", limit: secs(600) },
    Criterion { id: 8, name: "adversarial dominance", limit: secs(120) },
    Criterion { id: 9, name: "bound monotonicity", limit: secs(1) },
    Criterion { id: 10, name: "sweep determinism", limit: secs(120) },
];

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub criterion: Criterion,
    /// The numerical check held.
    pub held: bool,
    pub elapsed: Duration,
    pub detail: String,
}

impl Outcome {
    /// Passing needs the check to hold inside its time limit.
    pub fn passed(&self) -> bool {
        self.held && self.elapsed <= self.criterion.limit
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:>2} {:<36} {:>8.2}s/{:<4} {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.criterion.id,
            self.criterion.name,
            self.elapsed.as_secs_f64(),
            format!("{}s", self.criterion.limit.as_secs()),
            self.detail,
        )
    }
}

struct Check {
    held: bool,
    detail: String,
}

fn check(held: bool, detail: String) -> Check {
    Check { held, detail }
}

struct SweepRun {
    reports: Vec<DeviationReport>,
    summary: SweepSummary,
    elapsed: Duration,
}

/// Runs the criteria; the identified model and the grid sweep are computed
/// once and shared.
pub struct Verifier {
    cfg: RunConfig,
    jobs: usize,
    model_file: Option<PathBuf>,
    model: OnceLock<std::result::Result<(LiftedBilinearModel, Duration), String>>,
    sweep: OnceLock<std::result::Result<SweepRun, String>>,
}

impl Verifier {
    /// `model_file` replaces the identified model in the grid and
    /// adversarial checks.
    pub fn new(cfg: RunConfig, jobs: usize, model_file: Option<PathBuf>) -> Self {
        Self {
            cfg: example_config(cfg),
            jobs,
            model_file,
            model: OnceLock::new(),
            sweep: OnceLock::new(),
        }
    }

    pub fn run(&self, id: u8) -> Outcome {
        let criterion = *CRITERIA.iter().find(|c| c.id == id).expect("criterion id");
        let start = Instant::now();
        let (res, extra) = with_jobs(self.jobs, || match id {
            1 => (hjb_certificate(self.cfg.seed), Duration::ZERO),
            2 => (optimal_cost(), Duration::ZERO),
            3 => (exact_recovery(self.cfg.seed), Duration::ZERO),
            4 => (coefficient_fit(self.cfg.seed), Duration::ZERO),
            5 => (care_certificate(self.cfg.seed), Duration::ZERO),
            6 => self.value_bound(),
            7 => self.controller_bound(),
            8 => self.adversarial(),
            9 => (monotonicity(self.cfg.seed), Duration::ZERO),
            10 => self.determinism(),
            _ => unreachable!(),
        });
        let mut elapsed = start.elapsed();
        // Work shared with an earlier criterion is charged here as well.
        if extra > elapsed {
            elapsed = extra;
        }
        let (held, detail) = match res {
            Ok(c) => (c.held, c.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        Outcome { criterion, held, elapsed, detail }
    }

    pub fn run_all(&self, skip_slow: bool) -> Vec<Outcome> {
        CRITERIA
            .iter()
            .filter(|c| !(skip_slow && c.is_slow()))
            .map(|c| self.run(c.id))
            .collect()
    }

    fn model(&self) -> Result<(&LiftedBilinearModel, Duration)> {
        let res = self.model.get_or_init(|| {
            let start = Instant::now();
            let model = match &self.model_file {
                Some(p) => LiftedBilinearModel::load(p),
                None => identify_example_model(&self.cfg),
            };
            model.map(|m| (m, start.elapsed())).map_err(|e| e.to_string())
        });
        match res {
            Ok((m, t)) => Ok((m, *t)),
            Err(e) => Err(crate::Error::InvalidArgument(format!("model: {e}"))),
        }
    }

    fn sweep(&self) -> Result<&SweepRun> {
        let res = self.sweep.get_or_init(|| {
            let run = || -> Result<SweepRun> {
                let (model, fit_time) = self.model()?;
                let start = Instant::now();
                let system = paper_example_system();
                let reports = grid_sweep(
                    &system,
                    model,
                    &self.cfg.weights()?,
                    &self.cfg.region()?,
                    self.cfg.resolution,
                    &self.cfg.deviation_options(),
                    Execution::Parallel,
                )?;
                let summary = SweepSummary::from_reports(&reports, Some(self.cfg.digest()));
                Ok(SweepRun { reports, summary, elapsed: fit_time + start.elapsed() })
            };
            run().map_err(|e| e.to_string())
        });
        res.as_ref().map_err(|e| crate::Error::InvalidArgument(format!("sweep: {e}")))
    }

    fn value_bound(&self) -> (Result<Check>, Duration) {
        match self.sweep() {
            Ok(s) => {
                let rate = s.summary.pass_rate_thm5();
                let worst = s
                    .reports
                    .iter()
                    .filter_map(|r| r.value_gap.map(|g| g - r.delta_v_max))
                    .fold(f64::NEG_INFINITY, f64::max);
                let held = rate >= PASS_RATE && s.summary.unexplained_violations == 0 && s.summary.failed == 0;
                let detail = format!(
                    "{} points, pass rate {:.4}, unexplained {}, max(gap - dVmax) {:.4e}",
                    s.summary.points, rate, s.summary.unexplained_violations, worst
                );
                (Ok(check(held, detail)), s.elapsed)
            }
            Err(e) => (Err(e), Duration::ZERO),
        }
    }

    fn controller_bound(&self) -> (Result<Check>, Duration) {
        match self.sweep() {
            Ok(s) => {
                let rate = s.summary.pass_rate_thm6();
                let measured = s.reports.iter().filter(|r| r.controller_dev_integral.is_some()).count();
                let worst = s
                    .reports
                    .iter()
                    .filter_map(|r| r.controller_dev_integral.map(|d| d / r.controller_dev_bound.max(1e-300)))
                    .filter(|v| v.is_finite())
                    .fold(0.0, f64::max);
                let held = rate >= PASS_RATE && measured == s.reports.len();
                let detail = format!(
                    "{} points measured, pass rate {:.4}, max integral/bound {:.3e}",
                    measured, rate, worst
                );
                (Ok(check(held, detail)), s.elapsed)
            }
            Err(e) => (Err(e), Duration::ZERO),
        }
    }

    fn adversarial(&self) -> (Result<Check>, Duration) {
        let run = || -> Result<(Check, Duration)> {
            let (model, fit_time) = self.model()?;
            let start = Instant::now();
            let weights = self.cfg.weights()?;
            let region = self.cfg.region()?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
            let opts = self.cfg.adversarial_options();
            let (mut violations, mut samples, mut worst_zero, mut worst_ratio) = (0, 0, 0.0f64, 0.0f64);
            for k in 0..10 {
                let x0: Vec<f64> = (0..region.dim())
                    .map(|i| rng.gen_range(region.lower[i]..=region.upper[i]))
                    .collect();
                let r = adversarial_error_sweep(
                    model,
                    &weights,
                    &x0,
                    self.cfg.adversarial_samples,
                    self.cfg.seed.wrapping_add(k),
                    &opts,
                    Execution::Parallel,
                )?;
                violations += r.samples.iter().filter(|s| !s.within_bound).count();
                samples += r.samples.len();
                worst_zero = worst_zero.max((r.samples[0].cost - r.nominal_cost).abs());
                worst_ratio = worst_ratio.max(r.max_deviation / (r.delta_v_max + r.slack));
            }
            let held = violations == 0 && worst_zero <= 1e-9;
            let detail = format!(
                "{samples} samples, {violations} outside bound, max |V-V0|/(dVmax+slack) {worst_ratio:.3}, zero-sample gap {worst_zero:.1e}"
            );
            Ok((check(held, detail), fit_time + start.elapsed()))
        };
        match run() {
            Ok((c, t)) => (Ok(c), t),
            Err(e) => (Err(e), Duration::ZERO),
        }
    }

    fn determinism(&self) -> (Result<Check>, Duration) {
        let run = || -> Result<Check> {
            let (model, _) = self.model()?;
            let dir = scratch_dir()?;
            let result = (|| -> Result<Check> {
                let model_path = dir.join("model.json");
                model.save(&model_path)?;
                let cfg = RunConfig {
                    resolution: 11,
                    step: 1e-2,
                    ..self.cfg.clone()
                };
                let mut outputs = Vec::new();
                for (jobs, sub) in [(1, "a"), (4, "b")] {
                    let cfg = RunConfig { out: dir.join(sub), ..cfg.clone() };
                    let out = cli::cmd_sweep(&cfg, &model_path, jobs).map_err(|e| crate::Error::InvalidArgument(e.message))?;
                    outputs.push((std::fs::read(&out.csv)?, std::fs::read(&out.summary)?));
                }
                let same_csv = outputs[0].0 == outputs[1].0;
                let same_summary = outputs[0].1 == outputs[1].1;
                let rows = outputs[0].0.iter().filter(|b| **b == b'\n').count();
                Ok(check(
                    same_csv && same_summary,
                    format!("{rows} lines, csv identical {same_csv}, summary identical {same_summary} (jobs 1 vs 4)"),
                ))
            })();
            let _ = std::fs::remove_dir_all(&dir);
            result
        };
        (run(), Duration::ZERO)
    }
}

/// The grid checks are stated for the example plant under unit weights.
fn example_config(cfg: RunConfig) -> RunConfig {
    RunConfig {
        plant: "example".into(),
        qbar: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        r: vec![vec![1.0]],
        region_lower: vec![-1.0, -1.0],
        region_upper: vec![1.0, 1.0],
        ..cfg
    }
}

pub fn identify_example_model(cfg: &RunConfig) -> Result<LiftedBilinearModel> {
    let system = cfg.system()?;
    let region = cfg.region()?;
    let data = collect_data(
        system.as_ref(),
        cfg.n_traj,
        cfg.t_len,
        cfg.data_step,
        &region,
        &cfg.excitation(),
        cfg.seed,
    )?;
    let basis = build_monomial_basis(system.state_dim(), cfg.degree)?;
    fit_model(&data, &basis, &cfg.fit_options()?)
}

fn scratch_dir() -> Result<PathBuf> {
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let dir = std::env::temp_dir().join(format!("koopdev-verify-{}-{nanos}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

fn hjb_certificate(seed: u64) -> Result<Check> {
    let plant = paper_example_system();
    let w = OcpWeights::identity(2, 1);
    let u_star = |x: &DVector<f64>| plant.optimal_controller(x).unwrap_or_else(|| DVector::from_element(1, f64::NAN));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = v(&[rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]);
        let r = hjb_residual(&plant, &w, &AnalyticValue(&plant), u_star, &x)?;
        worst = if r.is_nan() { f64::NAN } else { worst.max(r.abs()) };
    }
    Ok(check(worst <= 1e-10, format!("max |residual| {worst:.2e} over 100 points")))
}

fn optimal_cost() -> Result<Check> {
    let plant = paper_example_system();
    let w = OcpWeights::identity(2, 1);
    let traj = integrate(
        &plant,
        &w,
        |x| {
            plant
                .optimal_controller(x)
                .ok_or(crate::Error::UnsupportedPlant)
        },
        &v(&[1.0, 1.0]),
        &IntegrationOptions::new(20.0, 1e-3),
    )?;
    let cost = quadratic_cost(&traj, None)?.total;
    let err = (cost - 0.75).abs();
    Ok(check(err <= 1e-3, format!("cost {cost:.6}, |cost - 0.75| {err:.2e}")))
}

/// `ẋ = Ax + B0 u + u B1 x` with a diagonally dominant, hence Hurwitz, `A`.
fn known_bilinear(n: usize, rng: &mut ChaCha8Rng) -> (FnSystem, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_fn(n, n, |i, j| {
        let off: f64 = rng.gen_range(-0.3..0.3);
        if i == j { off - 2.0 } else { off }
    });
    let b0 = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
    let b1 = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3));
    let (a2, b02, b12) = (a.clone(), b0.clone(), b1.clone());
    let sys = FnSystem::new(
        n,
        1,
        move |x| &a2 * x,
        move |x| &b02 + DMatrix::from_column_slice(n, 1, (&b12 * x).as_slice()),
    );
    (sys, a, b0, b1)
}

fn exact_recovery(seed: u64) -> Result<Check> {
    let n = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sys, a, b0, b1) = known_bilinear(n, &mut rng);
    let (re, _) = linalg::eigenvalues(&a)?;
    let region = Region::symmetric(n, 1.0)?;
    let data = collect_data(&sys, 50, 0.99, 0.01, &region, &Excitation::default(), seed)?;
    let basis = build_monomial_basis(n, 1)?;
    let opts = FitOptions {
        beta: 1.0,
        lipschitz_region: region,
        lipschitz_resolution: 2,
        provenance: Default::default(),
    };
    let model = fit_model(&data, &basis, &opts)?;
    let err = (&model.a - &a)
        .amax()
        .max((&model.b0 - &b0).amax())
        .max((&model.b_list[0] - &b1).amax());
    let stable = re.iter().all(|l| *l < 0.0);
    let held = stable && data.len() == 5000 && err <= 1e-6 && model.c1 <= 1e-8 && model.c2 <= 1e-8;
    Ok(check(
        held,
        format!(
            "{} snapshots, max entry error {err:.2e}, c1 {:.1e}, c2 {:.1e}",
            data.len(),
            model.c1,
            model.c2
        ),
    ))
}

/// Best point of a `1e-4` grid in `c1`, with the smallest feasible `c2`
/// for each grid value.
fn grid_search_oracle(r: &[f64], z: &[f64], u: &[f64], beta: f64) -> (f64, f64) {
    let h = 1e-4;
    let c1_cap = r.iter().zip(z).map(|(r, z)| r / z).fold(0.0, f64::max);
    let steps = (c1_cap / h).ceil() as usize + 1;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for k in 0..=steps {
        let c1 = k as f64 * h;
        let c2 = (0..r.len()).map(|j| (r[j] - c1 * z[j]) / u[j]).fold(0.0, f64::max);
        let f = c1 + beta * c2;
        if f < best.0 {
            best = (f, c1, c2);
        }
    }
    (best.1, best.2)
}

fn coefficient_fit(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_gap, mut worst_slack) = (0.0f64, f64::INFINITY);
    for _ in 0..20 {
        let z: Vec<f64> = (0..50).map(|_| rng.gen_range(0.5..1.0)).collect();
        let u: Vec<f64> = (0..50).map(|_| rng.gen_range(0.5..1.0)).collect();
        let r: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (c1, c2) = fit_error_coefficients(&r, &z, &u, 1.0)?;
        let (o1, o2) = grid_search_oracle(&r, &z, &u, 1.0);
        worst_gap = worst_gap.max((c1 - o1).abs()).max((c2 - o2).abs());
        for j in 0..50 {
            worst_slack = worst_slack.min(c1 * z[j] + c2 * u[j] - r[j]);
        }
    }
    let held = worst_gap <= 2e-4 && worst_slack >= -1e-12;
    Ok(check(
        held,
        format!("max coordinate gap to grid oracle {worst_gap:.2e}, min constraint slack {worst_slack:.1e}"),
    ))
}

fn care_certificate(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for k in 0..50 {
        let n: usize = rng.gen_range(1..=14);
        let m = rng.gen_range(n.div_ceil(3)..=n.div_ceil(2));
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = &l * l.transpose();
        let lr = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
        let r = &lr * lr.transpose() + DMatrix::identity(m, m);
        let sol = match solve_care(&a, &b, &q, &r) {
            Ok(s) => s,
            Err(e) => {
                bad.push(format!("#{k}: {e}"));
                continue;
            }
        };
        let p = &sol.p;
        let g = &b * r.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(m, m)) * b.transpose();
        let res = (a.transpose() * p + p * &a - p * &g * p + &q).norm() / q.norm().max(1.0);
        worst = worst.max(res);
        let scale = p.norm().max(1.0);
        let (re, _) = linalg::eigenvalues(&(&a - &g * p))?;
        if res > 1e-9
            || linalg::max_asymmetry(p) > 1e-12 * scale
            || linalg::min_sym_eigenvalue(p) < -1e-10 * scale
            || re.iter().any(|l| *l >= 0.0)
        {
            bad.push(format!("#{k} n={n} m={m} residual {res:.1e}"));
        }
    }
    let one = DMatrix::from_element(1, 1, 1.0);
    let p1 = solve_care(&DMatrix::zeros(1, 1), &one, &one, &one)?.p[(0, 0)];
    let p2 = solve_care(&DMatrix::from_element(1, 1, -1.0), &DMatrix::zeros(1, 1), &one, &one)?.p[(0, 0)];
    let scalar = (p1 - 1.0).abs().max((p2 - 0.5).abs());
    let held = bad.is_empty() && scalar <= 1e-10;
    let mut detail = format!("max relative residual {worst:.2e}, scalar cases error {scalar:.1e}");
    if !bad.is_empty() {
        detail += &format!(", failures: {}", bad.join("; "));
    }
    Ok(check(held, detail))
}

fn monotonicity(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    for _ in 0..1000 {
        let mut args = [0.0f64; 7];
        for (i, a) in args.iter_mut().enumerate() {
            *a = if i == 3 || i == 4 { rng.gen_range(0.1..5.0) } else { rng.gen_range(0.0..2.0) };
        }
        let bound = |a: &[f64; 7]| value_deviation_bound(a[0], a[1], a[2], a[3], a[4], a[5], a[6]);
        let base = bound(&args)?;
        for i in 0..7 {
            let mut up = args;
            up[i] += rng.gen_range(1e-3..1.0);
            let b = bound(&up)?;
            let ok = if i == 3 || i == 4 { b <= base } else { b >= base };
            failures += usize::from(!ok);
        }
        let v0 = rng.gen_range(1e-3..5.0);
        let d1 = rng.gen_range(0.0..5.0);
        let d2 = d1 + rng.gen_range(1e-3..1.0);
        failures += usize::from(controller_deviation_bound(0.0, v0)? != 0.0);
        failures += usize::from(controller_deviation_bound(d1, v0)? >= controller_deviation_bound(d2, v0)?);
    }
    Ok(check(failures == 0, format!("1000 tuples, {failures} violations")))
}

/// Writes the outcome table.
pub fn print_table(outcomes: &[Outcome]) {
    for o in outcomes {
        println!("{}", o.line());
    }
    let passed = outcomes.iter().filter(|o| o.passed()).count();
    println!("{passed}/{} criteria passed", outcomes.len());
}

pub fn all_passed(outcomes: &[Outcome]) -> bool {
    outcomes.iter().all(Outcome::passed)
}
