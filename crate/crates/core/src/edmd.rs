//! Data generation, bilinear least-squares identification and error-bound
//! coefficient fitting.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{fmt_f64, integrate_closed_loop, ClosedLoop, ControlAffineSystem, IntegrationOptions};
use crate::error::{Error, Result};
use crate::exec;
use crate::lifting::{DictionaryBasis, LipschitzEstimate, Region};
use crate::linalg;

/// One sample `(x_j, ẋ_j, u_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub traj_id: usize,
    pub t: f64,
    pub x: DVector<f64>,
    pub xdot: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub n_traj: usize,
    pub t_len: f64,
    pub step: f64,
    pub excitation: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub snapshots: Vec<Snapshot>,
    pub meta: DataMeta,
}

impl DataSet {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.x.len())
    }

    pub fn input_dim(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.u.len())
    }

    /// Writes `traj_id,t,x1..xn,xdot1..xdotn,u1..um`, preceded by one `#`
    /// provenance line.
    pub fn write_csv<W: Write>(&self, mut out: W, provenance: &str) -> Result<()> {
        let meta = serde_json::to_string(&self.meta)?;
        writeln!(out, "# {provenance} meta={meta}")?;
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["traj_id".to_string(), "t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=n).map(|i| format!("xdot{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        w.write_record(&header)?;
        for s in &self.snapshots {
            let mut row = vec![s.traj_id.to_string(), fmt_f64(s.t)];
            row.extend(s.x.iter().map(|v| fmt_f64(*v)));
            row.extend(s.xdot.iter().map(|v| fmt_f64(*v)));
            row.extend(s.u.iter().map(|v| fmt_f64(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let meta_line = text
            .lines()
            .find(|l| l.starts_with('#'))
            .and_then(|l| l.split_once("meta=").map(|(_, m)| m.to_string()));
        let mut rd = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = rd.headers()?.clone();
        let n = header.iter().filter(|h| h.starts_with('x') && !h.starts_with("xdot")).count();
        let m = header.iter().filter(|h| h.starts_with('u')).count();
        if header.len() != 2 + 2 * n + m || header.get(0) != Some("traj_id") || header.get(1) != Some("t") {
            return Err(Error::Format("unexpected dataset header".into()));
        }
        let mut snapshots = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Format("short dataset row".into()))?
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad number: {e}")))
            };
            let traj_id = rec
                .get(0)
                .unwrap_or_default()
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("bad traj_id: {e}")))?;
            let vals: Vec<f64> = (1..header.len()).map(parse).collect::<Result<_>>()?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("non-finite dataset entry".into()));
            }
            snapshots.push(Snapshot {
                traj_id,
                t: vals[0],
                x: DVector::from_column_slice(&vals[1..1 + n]),
                xdot: DVector::from_column_slice(&vals[1 + n..1 + 2 * n]),
                u: DVector::from_column_slice(&vals[1 + 2 * n..1 + 2 * n + m]),
            });
        }
        let meta = match meta_line {
            Some(m) => serde_json::from_str(&m)?,
            None => {
                let mut ids: Vec<usize> = snapshots.iter().map(|s| s.traj_id).collect();
                ids.dedup();
                DataMeta {
                    n_traj: ids.len(),
                    t_len: snapshots.iter().map(|s| s.t).fold(0.0, f64::max),
                    step: f64::NAN,
                    excitation: "unknown".into(),
                    seed: 0,
                }
            }
        };
        Ok(Self { snapshots, meta })
    }

    pub fn save(&self, path: &Path, provenance: &str) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f), provenance)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Piecewise-constant input resampled uniformly from `[-u_max, u_max]`
/// every `hold` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Excitation {
    pub u_max: f64,
    pub hold: f64,
}

impl Default for Excitation {
    fn default() -> Self {
        Self { u_max: 2.0, hold: 0.1 }
    }
}

impl Excitation {
    pub fn describe(&self) -> String {
        format!("piecewise-constant uniform[-{}, {}] every {} s", self.u_max, self.u_max, self.hold)
    }
}

struct ExcitedLoop<'a, S: ?Sized> {
    system: &'a S,
    levels: Vec<DVector<f64>>,
    hold: f64,
}

impl<S: ControlAffineSystem + ?Sized> ClosedLoop for ExcitedLoop<'_, S> {
    fn control(&mut self, t: f64, _x: &DVector<f64>) -> Result<DVector<f64>> {
        let idx = ((t / self.hold) + 1e-9).floor() as usize;
        Ok(self.levels[idx.min(self.levels.len() - 1)].clone())
    }
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.system.rhs(x, u)
    }
    fn running_cost(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        0.0
    }
}

fn simulate_excited<S: ControlAffineSystem + ?Sized>(
    system: &S,
    rng: &mut ChaCha8Rng,
    init: &Region,
    excitation: &Excitation,
    opts: &IntegrationOptions,
) -> Result<Option<crate::dynamics::Trajectory>> {
    let x0 = DVector::from_iterator(
        init.dim(),
        init.lower
            .iter()
            .zip(&init.upper)
            .map(|(lo, hi)| if hi > lo { rng.gen_range(*lo..*hi) } else { *lo }),
    );
    let n_levels = (opts.horizon / excitation.hold).ceil() as usize + 1;
    let m = system.input_dim();
    let levels = (0..n_levels)
        .map(|_| {
            DVector::from_iterator(
                m,
                (0..m).map(|_| {
                    if excitation.u_max > 0.0 {
                        rng.gen_range(-excitation.u_max..excitation.u_max)
                    } else {
                        0.0
                    }
                }),
            )
        })
        .collect();
    let mut lp = ExcitedLoop {
        system,
        levels,
        hold: excitation.hold,
    };
    match integrate_closed_loop(&mut lp, &x0, opts) {
        Ok(t) if !t.diverged => Ok(Some(t)),
        Ok(_) | Err(Error::Diverged { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Simulates `n_traj` excited trajectories from initial states drawn
/// uniformly in `init`, recording `(x, ẋ, u)` on the `step` grid with `ẋ`
/// taken from the dynamics.
///
/// Trajectory `k` draws from its own ChaCha stream (`seed`, stream `k`), so
/// the result does not depend on how the work is scheduled.
pub fn collect_data<S: ControlAffineSystem + ?Sized>(
    system: &S,
    n_traj: usize,
    t_len: f64,
    step: f64,
    init: &Region,
    excitation: &Excitation,
    seed: u64,
) -> Result<DataSet> {
    if n_traj < 1 {
        return Err(Error::InvalidArgument("need at least one trajectory".into()));
    }
    if !(step > 0.0) || !(t_len >= step * (1.0 - 1e-12)) {
        return Err(Error::InvalidArgument("require t_len >= step > 0".into()));
    }
    if !(excitation.hold > 0.0) || !(excitation.u_max >= 0.0) {
        return Err(Error::InvalidArgument("invalid excitation".into()));
    }
    if init.dim() != system.state_dim() {
        return Err(Error::dims(system.state_dim(), init.dim(), "initial-state region"));
    }
    let opts = IntegrationOptions::new(t_len.max(step), step);
    let ids: Vec<usize> = (0..n_traj).collect();
    let per_traj = exec::map_collect(&ids, |&id| -> Result<Vec<Snapshot>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64);
        let traj = match simulate_excited(system, &mut rng, init, excitation, &opts)? {
            Some(t) => t,
            None => simulate_excited(system, &mut rng, init, excitation, &opts)?
                .ok_or(Error::DataCollection { traj_id: id })?,
        };
        Ok(traj
            .times
            .iter()
            .zip(traj.states.iter().zip(&traj.inputs))
            .map(|(&t, (x, u))| Snapshot {
                traj_id: id,
                t,
                xdot: system.rhs(x, u),
                x: x.clone(),
                u: u.clone(),
            })
            .collect())
    });
    let mut snapshots = Vec::new();
    for chunk in per_traj {
        snapshots.extend(chunk?);
    }
    Ok(DataSet {
        snapshots,
        meta: DataMeta {
            n_traj,
            t_len,
            step,
            excitation: excitation.describe(),
            seed,
        },
    })
}

/// Regressor and target matrices of the least-squares problem.
#[derive(Debug, Clone)]
pub struct RegressionData {
    /// Rows: `Z0` (N), `U0` (m), then one `N`-row bilinear block per input.
    pub w0: DMatrix<f64>,
    /// Columns `∂Ψ/∂x(x_j) ẋ_j`.
    pub z1: DMatrix<f64>,
    pub lifted_dim: usize,
    pub input_dim: usize,
}

impl RegressionData {
    pub fn z0(&self) -> DMatrix<f64> {
        self.w0.rows(0, self.lifted_dim).into_owned()
    }

    pub fn u0(&self) -> DMatrix<f64> {
        self.w0.rows(self.lifted_dim, self.input_dim).into_owned()
    }

    /// `u^i_j Ψ(x_j)` block for input `i`.
    pub fn bilinear_block(&self, i: usize) -> DMatrix<f64> {
        let start = self.lifted_dim + self.input_dim + i * self.lifted_dim;
        self.w0.rows(start, self.lifted_dim).into_owned()
    }
}

pub fn assemble_matrices(data: &DataSet, basis: &DictionaryBasis) -> Result<RegressionData> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if data.state_dim() != basis.state_dim() {
        return Err(Error::dims(basis.state_dim(), data.state_dim(), "dataset state dimension"));
    }
    let n_lift = basis.lifted_dim();
    let m = data.input_dim();
    let rows = n_lift + m + m * n_lift;
    let cols = data.len();
    let mut w0 = DMatrix::zeros(rows, cols);
    let mut z1 = DMatrix::zeros(n_lift, cols);
    for (j, s) in data.snapshots.iter().enumerate() {
        if s.x.len() != basis.state_dim() || s.xdot.len() != basis.state_dim() || s.u.len() != m {
            return Err(Error::dims(basis.state_dim(), s.x.len(), "snapshot"));
        }
        let z = basis.lift(s.x.as_slice())?;
        let zdot = basis.jacobian(s.x.as_slice())? * &s.xdot;
        w0.view_mut((0, j), (n_lift, 1)).copy_from(&z);
        for i in 0..m {
            w0[(n_lift + i, j)] = s.u[i];
            let start = n_lift + m + i * n_lift;
            w0.view_mut((start, j), (n_lift, 1)).copy_from(&(&z * s.u[i]));
        }
        z1.set_column(j, &zdot);
    }
    Ok(RegressionData {
        w0,
        z1,
        lifted_dim: n_lift,
        input_dim: m,
    })
}

/// Identified matrices plus rank diagnostics.
#[derive(Debug, Clone)]
pub struct Identification {
    pub a: DMatrix<f64>,
    pub b0: DMatrix<f64>,
    pub b_list: Vec<DMatrix<f64>>,
    pub rank: usize,
    pub full_rank: usize,
    pub warnings: Vec<String>,
}

impl Identification {
    /// `[A B0 B1 … Bm]`
    pub fn stacked(&self) -> DMatrix<f64> {
        stack_blocks(&self.a, &self.b0, &self.b_list)
    }
}

fn stack_blocks(a: &DMatrix<f64>, b0: &DMatrix<f64>, b_list: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b0.ncols();
    let mut out = DMatrix::zeros(n, n + m + m * n);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((0, n), (n, m)).copy_from(b0);
    for (i, bi) in b_list.iter().enumerate() {
        out.view_mut((0, n + m + i * n), (n, n)).copy_from(bi);
    }
    out
}

/// Relative singular-value cutoff of the pseudoinverse.
pub const PINV_RTOL: f64 = 1e-10;

/// `[A B0 B1 … Bm] = Z1 W0†` with an SVD pseudoinverse.
pub fn identify(w0: &DMatrix<f64>, z1: &DMatrix<f64>) -> Result<Identification> {
    let n = z1.nrows();
    let rows = w0.nrows();
    if w0.ncols() == 0 {
        return Err(Error::InvalidArgument("no data columns".into()));
    }
    if w0.ncols() != z1.ncols() {
        return Err(Error::dims(w0.ncols(), z1.ncols(), "Z1 columns"));
    }
    if rows < n || (rows - n) % (n + 1) != 0 {
        return Err(Error::InvalidArgument(format!(
            "regressor has {rows} rows, not of the form N + m + mN with N = {n}"
        )));
    }
    let m = (rows - n) / (n + 1);

    // Thin SVD of W0ᵀ (T × rows) keeps the factor sizes small.
    let svd = w0.transpose().svd(true, true);
    let u = svd.u.as_ref().ok_or(Error::NoConvergence)?; // T × k
    let v_t = svd.v_t.as_ref().ok_or(Error::NoConvergence)?; // k × rows
    let sigma = &svd.singular_values;
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let cutoff = PINV_RTOL * smax;
    // W0 = V Σ Uᵀ, so W0† = U Σ⁺ Vᵀ and Z1 W0† = (Z1 U) Σ⁺ Vᵀ.
    let mut zu = z1 * u;
    let mut rank = 0;
    for (k, &s) in sigma.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            zu.column_mut(k).scale_mut(1.0 / s);
        } else {
            zu.column_mut(k).fill(0.0);
        }
    }
    let stacked = zu * v_t;
    let mut warnings = Vec::new();
    if rank < rows {
        warnings.push(format!(
            "regressor rank {rank} below {rows}; identification uses the attained rank"
        ));
    }
    let a = stacked.columns(0, n).into_owned();
    let b0 = stacked.columns(n, m).into_owned();
    let b_list = (0..m)
        .map(|i| stacked.columns(n + m + i * n, n).into_owned())
        .collect();
    Ok(Identification {
        a,
        b0,
        b_list,
        rank,
        full_rank: rows,
        warnings,
    })
}

/// `R = Z1 − [A B0 B1 … Bm] W0` and its column norms.
pub fn residuals(
    a: &DMatrix<f64>,
    b0: &DMatrix<f64>,
    b_list: &[DMatrix<f64>],
    reg: &RegressionData,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let stacked = stack_blocks(a, b0, b_list);
    if stacked.ncols() != reg.w0.nrows() || a.nrows() != reg.z1.nrows() {
        return Err(Error::dims(reg.w0.nrows(), stacked.ncols(), "model vs regressor"));
    }
    let r = &reg.z1 - stacked * &reg.w0;
    let norms = r.column_iter().map(|c| c.norm()).collect();
    Ok((r, norms))
}

/// Minimizes `c1 + β c2` subject to `r_j ≤ c1 z_j + c2 u_j`, `c1, c2 ≥ 0`.
///
/// The feasible set is bounded below by the upper envelope of the lines
/// `c2 = (r_j − c1 z_j)/u_j`; the objective is convex and piecewise linear
/// along that envelope, so its minimum sits at one of the envelope's
/// vertices (or at the smallest admissible `c1`). Those vertices are
/// enumerated exactly; ties go to the smaller `c2`.
pub fn fit_error_coefficients(r: &[f64], z: &[f64], u: &[f64], beta: f64) -> Result<(f64, f64)> {
    if r.len() != z.len() || r.len() != u.len() {
        return Err(Error::dims(r.len(), z.len().min(u.len()), "norm sequences"));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument("fit weight must be positive".into()));
    }
    if r.iter().chain(z).chain(u).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("norms must be finite and nonnegative".into()));
    }

    let mut c1_floor = 0.0f64;
    // (intercept, slope) of c2 >= intercept + slope * c1
    let mut lines: Vec<(f64, f64)> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    for j in 0..r.len() {
        if r[j] == 0.0 {
            continue;
        }
        if z[j] == 0.0 && u[j] == 0.0 {
            return Err(Error::Infeasible { index: j, residual: r[j] });
        }
        if u[j] == 0.0 {
            c1_floor = c1_floor.max(r[j] / z[j]);
        } else {
            lines.push((r[j] / u[j], -z[j] / u[j]));
            active.push(j);
        }
    }
    if lines.is_empty() {
        return Ok((c1_floor, 0.0));
    }
    lines.push((0.0, 0.0));

    let min_c2 = |c1: f64| -> f64 {
        active
            .iter()
            .map(|&j| (r[j] - c1 * z[j]) / u[j])
            .fold(0.0f64, f64::max)
    };

    let hull = upper_envelope(lines);
    let mut candidates = vec![c1_floor];
    for w in hull.windows(2) {
        let (a1, s1) = w[0];
        let (a2, s2) = w[1];
        let x = (a1 - a2) / (s2 - s1);
        if x > c1_floor && x.is_finite() {
            candidates.push(x);
        }
    }

    let mut best: Option<(f64, f64, f64)> = None;
    for c1 in candidates {
        let c2 = min_c2(c1);
        let obj = c1 + beta * c2;
        best = match best {
            None => Some((obj, c1, c2)),
            Some((bo, bc1, bc2)) => {
                let tol = 1e-12 * bo.abs().max(1.0);
                if obj < bo - tol || ((obj - bo).abs() <= tol && c2 < bc2) {
                    Some((obj, c1, c2))
                } else {
                    Some((bo, bc1, bc2))
                }
            }
        };
    }
    let (_, c1, c2) = best.expect("at least one candidate");
    Ok((c1, c2))
}

/// Upper envelope of lines `y = a + s x`, returned in order of increasing
/// slope (which is also left-to-right order along the envelope).
fn upper_envelope(mut lines: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    lines.sort_by(|p, q| p.1.partial_cmp(&q.1).unwrap().then(p.0.partial_cmp(&q.0).unwrap()));
    // Same slope: keep only the largest intercept (the last after sorting).
    let mut dedup: Vec<(f64, f64)> = Vec::with_capacity(lines.len());
    for l in lines {
        if let Some(last) = dedup.last_mut() {
            if last.1 == l.1 {
                *last = l;
                continue;
            }
        }
        dedup.push(l);
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(dedup.len());
    for l in dedup {
        while hull.len() >= 2 {
            let l1 = hull[hull.len() - 2];
            let l2 = hull[hull.len() - 1];
            // l2 is redundant if l1 and l meet at or left of where l1 and l2 meet.
            let x13 = (l1.0 - l.0) / (l.1 - l1.1);
            let x12 = (l1.0 - l2.0) / (l2.1 - l1.1);
            if x13 <= x12 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(l);
    }
    hull
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub max: f64,
    pub mean: f64,
    pub rms: f64,
}

impl ResidualStats {
    pub fn from_norms(norms: &[f64]) -> Self {
        if norms.is_empty() {
            return Self { max: 0.0, mean: 0.0, rms: 0.0 };
        }
        let n = norms.len() as f64;
        Self {
            max: norms.iter().copied().fold(0.0, f64::max),
            mean: norms.iter().sum::<f64>() / n,
            rms: (norms.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub tool: String,
    pub seed: Option<u64>,
    pub config_digest: Option<String>,
}

/// Identified lifted bilinear model `ż = Az + B0 u + Σ u_i B_i z + r(z, u)`
/// with `‖r‖ ≤ c1‖z‖ + c2‖u‖` fitted on the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedBilinearModel {
    pub basis: DictionaryBasis,
    pub a: DMatrix<f64>,
    pub b0: DMatrix<f64>,
    pub b_list: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
    pub c1: f64,
    pub c2: f64,
    pub lipschitz: LipschitzEstimate,
    pub residual_stats: ResidualStats,
    pub rank: usize,
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

impl LiftedBilinearModel {
    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b0.ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.basis.state_dim()
    }

    pub fn stacked(&self) -> DMatrix<f64> {
        stack_blocks(&self.a, &self.b0, &self.b_list)
    }

    /// Checks dimensions, finiteness and the sign of the coefficients.
    pub fn validate(&self) -> Result<()> {
        let n = self.basis.lifted_dim();
        let m = self.b0.ncols();
        if self.a.shape() != (n, n) {
            return Err(Error::dims(n, self.a.nrows(), "A"));
        }
        if self.b0.nrows() != n {
            return Err(Error::dims(n, self.b0.nrows(), "B0"));
        }
        if self.b_list.len() != m || self.b_list.iter().any(|b| b.shape() != (n, n)) {
            return Err(Error::dims(m, self.b_list.len(), "bilinear matrices"));
        }
        if self.c.shape() != (self.basis.state_dim(), n) {
            return Err(Error::dims(n, self.c.ncols(), "C"));
        }
        let finite = self
            .a
            .iter()
            .chain(self.b0.iter())
            .chain(self.b_list.iter().flat_map(|b| b.iter()))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("model has non-finite entries".into()));
        }
        if !(self.c1 >= 0.0 && self.c2 >= 0.0) {
            return Err(Error::InvalidArgument("error coefficients must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk form of [`LiftedBilinearModel`]; matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub basis: DictionaryBasis,
    pub input_dim: usize,
    pub a: Vec<Vec<f64>>,
    pub b0: Vec<Vec<f64>>,
    pub b_list: Vec<Vec<Vec<f64>>>,
    pub c: Vec<Vec<f64>>,
    pub c1: f64,
    pub c2: f64,
    pub lipschitz: LipschitzEstimate,
    pub residual_stats: ResidualStats,
    pub rank: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub provenance: Provenance,
}

impl From<&LiftedBilinearModel> for ModelFile {
    fn from(m: &LiftedBilinearModel) -> Self {
        Self {
            basis: m.basis.clone(),
            input_dim: m.input_dim(),
            a: linalg::to_rows(&m.a),
            b0: linalg::to_rows(&m.b0),
            b_list: m.b_list.iter().map(linalg::to_rows).collect(),
            c: linalg::to_rows(&m.c),
            c1: m.c1,
            c2: m.c2,
            lipschitz: m.lipschitz.clone(),
            residual_stats: m.residual_stats,
            rank: m.rank,
            warnings: m.warnings.clone(),
            provenance: m.provenance.clone(),
        }
    }
}

impl TryFrom<ModelFile> for LiftedBilinearModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let n = f.basis.lifted_dim();
        let model = Self {
            a: linalg::from_rows(&f.a, n)?,
            b0: linalg::from_rows(&f.b0, f.input_dim)?,
            b_list: f
                .b_list
                .iter()
                .map(|b| linalg::from_rows(b, n))
                .collect::<Result<_>>()?,
            c: linalg::from_rows(&f.c, n)?,
            basis: f.basis,
            c1: f.c1,
            c2: f.c2,
            lipschitz: f.lipschitz,
            residual_stats: f.residual_stats,
            rank: f.rank,
            warnings: f.warnings,
            provenance: f.provenance,
        };
        if model.b0.ncols() != f.input_dim {
            return Err(Error::dims(f.input_dim, model.b0.ncols(), "B0 columns"));
        }
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Weight on `c2` in the coefficient objective.
    pub beta: f64,
    pub lipschitz_region: Region,
    pub lipschitz_resolution: usize,
    pub provenance: Provenance,
}

/// Runs the full identification pipeline on a dataset.
pub fn fit_model(data: &DataSet, basis: &DictionaryBasis, opts: &FitOptions) -> Result<LiftedBilinearModel> {
    let reg = assemble_matrices(data, basis)?;
    let id = identify(&reg.w0, &reg.z1)?;
    let (_, r_norms) = residuals(&id.a, &id.b0, &id.b_list, &reg)?;
    let z_norms: Vec<f64> = reg.z0().column_iter().map(|c| c.norm()).collect();
    let u_norms: Vec<f64> = reg.u0().column_iter().map(|c| c.norm()).collect();
    let (c1, c2) = fit_error_coefficients(&r_norms, &z_norms, &u_norms, opts.beta)?;
    let lipschitz = basis.lipschitz_constant(&opts.lipschitz_region, opts.lipschitz_resolution)?;
    let model = LiftedBilinearModel {
        basis: basis.clone(),
        a: id.a,
        b0: id.b0,
        b_list: id.b_list,
        c: basis.projection_matrix(),
        c1,
        c2,
        lipschitz,
        residual_stats: ResidualStats::from_norms(&r_norms),
        rank: id.rank,
        warnings: id.warnings,
        provenance: opts.provenance.clone(),
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{paper_example_system, FnSystem};
    use crate::lifting::build_monomial_basis;
    use proptest::prelude::*;
    use rand::Rng;

    fn square_region(dim: usize) -> Region {
        Region::symmetric(dim, 1.0).unwrap()
    }

    /// Exactly bilinear plant `ẋ = Ax + B0 u + u B1 x` with an identity
    /// dictionary.
    fn bilinear_plant(n: usize, seed: u64) -> (FnSystem, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, n, |i, j| {
            let v: f64 = rng.gen_range(-0.5..0.5);
            if i == j { v - 1.5 } else { v }
        });
        let b0 = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
        let b1 = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3));
        let (a2, b02, b12) = (a.clone(), b0.clone(), b1.clone());
        let sys = FnSystem::new(n, 1, move |x| &a2 * x, move |x| {
            let col = &b12 * x;
            &b02 + DMatrix::from_column_slice(n, 1, col.as_slice())
        });
        (sys, a, b0, b1)
    }

    #[test]
    fn snapshot_counts() {
        let plant = paper_example_system();
        let data = collect_data(&plant, 40, 1.0, 0.01, &square_region(2), &Excitation::default(), 1).unwrap();
        assert_eq!(data.len(), 4040);
        let tiny = collect_data(&plant, 1, 0.01, 0.01, &square_region(2), &Excitation::default(), 1).unwrap();
        assert_eq!(tiny.len(), 2);
        assert!(collect_data(&plant, 0, 1.0, 0.01, &square_region(2), &Excitation::default(), 1).is_err());
        assert!(collect_data(&plant, 1, 0.001, 0.01, &square_region(2), &Excitation::default(), 1).is_err());
    }

    #[test]
    fn collection_is_deterministic_and_exact() {
        let plant = paper_example_system();
        let a = collect_data(&plant, 5, 0.5, 0.01, &square_region(2), &Excitation::default(), 77).unwrap();
        let b = collect_data(&plant, 5, 0.5, 0.01, &square_region(2), &Excitation::default(), 77).unwrap();
        assert_eq!(a, b);
        for s in &a.snapshots {
            assert_eq!(s.xdot, plant.rhs(&s.x, &s.u));
            assert!(s.u[0].abs() <= 2.0);
        }
        let c = collect_data(&plant, 5, 0.5, 0.01, &square_region(2), &Excitation::default(), 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let plant = paper_example_system();
        let data = collect_data(&plant, 2, 0.05, 0.01, &square_region(2), &Excitation::default(), 3).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf, "test").unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "traj_id,t,x1,x2,xdot1,xdot2,u1");
        let back = DataSet::read_csv(&buf[..]).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn assemble_single_snapshot() {
        let basis = build_monomial_basis(2, 1).unwrap();
        let data = DataSet {
            snapshots: vec![Snapshot {
                traj_id: 0,
                t: 0.0,
                x: DVector::from_vec(vec![1.0, 0.0]),
                xdot: DVector::from_vec(vec![0.5, -0.25]),
                u: DVector::from_vec(vec![1.0]),
            }],
            meta: DataMeta { n_traj: 1, t_len: 0.0, step: 0.01, excitation: String::new(), seed: 0 },
        };
        let reg = assemble_matrices(&data, &basis).unwrap();
        assert_eq!(reg.w0.shape(), (2 + 1 + 2, 1));
        assert_eq!(reg.z0().as_slice(), &[1.0, 0.0]);
        assert_eq!(reg.bilinear_block(0).as_slice(), &[1.0, 0.0]);
        assert_eq!(reg.z1.as_slice(), &[0.5, -0.25]);
    }

    #[test]
    fn assemble_zero_input_and_derivative_consistency() {
        let plant = paper_example_system();
        let basis = build_monomial_basis(2, 3).unwrap();
        let quiet = Excitation { u_max: 0.0, hold: 0.1 };
        let data = collect_data(&plant, 3, 0.2, 0.01, &square_region(2), &quiet, 2).unwrap();
        let reg = assemble_matrices(&data, &basis).unwrap();
        assert!(reg.u0().iter().all(|v| *v == 0.0));
        assert!(reg.bilinear_block(0).iter().all(|v| *v == 0.0));
        for (j, s) in data.snapshots.iter().enumerate() {
            let expect = basis.jacobian(s.x.as_slice()).unwrap() * &s.xdot;
            assert_eq!(reg.z1.column(j).into_owned(), expect);
        }
        let wrong = build_monomial_basis(3, 2).unwrap();
        assert!(assemble_matrices(&data, &wrong).is_err());
    }

    #[test]
    fn exact_bilinear_recovery() {
        let (sys, a, b0, b1) = bilinear_plant(5, 21);
        let basis = build_monomial_basis(5, 1).unwrap();
        let data = collect_data(&sys, 50, 0.99, 0.01, &square_region(5), &Excitation::default(), 4).unwrap();
        assert_eq!(data.len(), 5000);
        let reg = assemble_matrices(&data, &basis).unwrap();
        let id = identify(&reg.w0, &reg.z1).unwrap();
        assert_eq!(id.rank, id.full_rank);
        assert!((&id.a - &a).amax() < 1e-8);
        assert!((&id.b0 - &b0).amax() < 1e-8);
        assert!((&id.b_list[0] - &b1).amax() < 1e-8);
        let (_, norms) = residuals(&id.a, &id.b0, &id.b_list, &reg).unwrap();
        assert!(norms.iter().copied().fold(0.0, f64::max) <= 1e-8);
    }

    #[test]
    fn zero_target_and_duplicate_columns() {
        let plant = paper_example_system();
        let basis = build_monomial_basis(2, 2).unwrap();
        let data = collect_data(&plant, 4, 0.5, 0.01, &square_region(2), &Excitation::default(), 5).unwrap();
        let reg = assemble_matrices(&data, &basis).unwrap();
        let zero = identify(&reg.w0, &DMatrix::zeros(5, reg.w0.ncols())).unwrap();
        assert!(zero.stacked().iter().all(|v| *v == 0.0));

        let base = identify(&reg.w0, &reg.z1).unwrap().stacked();
        let k = reg.w0.ncols();
        let mut w_dup = reg.w0.clone().insert_column(k, 0.0);
        w_dup.set_column(k, &reg.w0.column(7));
        let mut z_dup = reg.z1.clone().insert_column(k, 0.0);
        z_dup.set_column(k, &reg.z1.column(7));
        let dup = identify(&w_dup, &z_dup).unwrap().stacked();
        // duplicating a sample changes the weights, so compare against a
        // reweighted least-squares oracle through the normal equations
        let normal = |w: &DMatrix<f64>, z: &DMatrix<f64>| {
            let g = w * w.transpose();
            (z * w.transpose()) * g.try_inverse().unwrap()
        };
        assert!((&dup - normal(&w_dup, &z_dup)).amax() < 1e-6 * (1.0 + dup.amax()));
        assert!((&base - normal(&reg.w0, &reg.z1)).amax() < 1e-6 * (1.0 + base.amax()));
    }

    #[test]
    fn duplicated_column_of_exact_data() {
        let (sys, ..) = bilinear_plant(3, 8);
        let basis = build_monomial_basis(3, 1).unwrap();
        let data = collect_data(&sys, 10, 0.49, 0.01, &square_region(3), &Excitation::default(), 9).unwrap();
        let reg = assemble_matrices(&data, &basis).unwrap();
        let base = identify(&reg.w0, &reg.z1).unwrap().stacked();
        let k = reg.w0.ncols();
        let mut w_dup = reg.w0.clone().insert_column(k, 0.0);
        w_dup.set_column(k, &reg.w0.column(0));
        let mut z_dup = reg.z1.clone().insert_column(k, 0.0);
        z_dup.set_column(k, &reg.z1.column(0));
        let dup = identify(&w_dup, &z_dup).unwrap().stacked();
        assert!((&dup - &base).amax() < 1e-9);
    }

    #[test]
    fn rank_deficiency_is_a_warning() {
        let plant = paper_example_system();
        let basis = build_monomial_basis(2, 2).unwrap();
        let quiet = Excitation { u_max: 0.0, hold: 0.1 };
        let data = collect_data(&plant, 4, 0.5, 0.01, &square_region(2), &quiet, 5).unwrap();
        let reg = assemble_matrices(&data, &basis).unwrap();
        let id = identify(&reg.w0, &reg.z1).unwrap();
        assert!(id.rank < id.full_rank);
        assert!(!id.warnings.is_empty());
    }

    #[test]
    fn least_squares_optimality() {
        let plant = paper_example_system();
        let basis = build_monomial_basis(2, 3).unwrap();
        let data = collect_data(&plant, 10, 1.0, 0.01, &square_region(2), &Excitation::default(), 6).unwrap();
        let reg = assemble_matrices(&data, &basis).unwrap();
        let best = identify(&reg.w0, &reg.z1).unwrap().stacked();
        let base = (&reg.z1 - &best * &reg.w0).norm();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let dir: DMatrix<f64> = DMatrix::from_fn(best.nrows(), best.ncols(), |_, _| rng.gen_range(-1.0..1.0));
            let dir = &dir / dir.norm() * 1e-3;
            let perturbed = (&reg.z1 - (&best + dir) * &reg.w0).norm();
            assert!(perturbed >= base);
        }
    }

    #[test]
    fn residual_examples() {
        let plant = paper_example_system();
        let basis = build_monomial_basis(2, 2).unwrap();
        let data = collect_data(&plant, 2, 0.1, 0.01, &square_region(2), &Excitation::default(), 5).unwrap();
        let reg = assemble_matrices(&data, &basis).unwrap();
        let zero_a = DMatrix::zeros(5, 5);
        let zero_b0 = DMatrix::zeros(5, 1);
        let zero_b = vec![DMatrix::zeros(5, 5)];
        let (r, norms) = residuals(&zero_a, &zero_b0, &zero_b, &reg).unwrap();
        assert_eq!(r, reg.z1);
        for (j, n) in norms.iter().enumerate() {
            assert_eq!(*n, reg.z1.column(j).norm());
        }
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(fit_error_coefficients(&[0.0, 0.0], &[1.0, 2.0], &[1.0, 0.0], 1.0).unwrap(), (0.0, 0.0));
        assert_eq!(fit_error_coefficients(&[1.0], &[2.0], &[0.0], 1.0).unwrap(), (0.5, 0.0));
        let (c1, c2) = fit_error_coefficients(&[1.0, 1.0], &[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert_eq!((c1, c2), (1.0, 1.0));
        assert!(matches!(
            fit_error_coefficients(&[1.0], &[0.0], &[0.0], 1.0),
            Err(Error::Infeasible { index: 0, .. })
        ));
        assert!(fit_error_coefficients(&[1.0], &[1.0], &[1.0], 0.0).is_err());
        assert!(fit_error_coefficients(&[-1.0], &[1.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn tie_goes_to_smaller_c2() {
        // r = z + u: every point on c1 + c2 = 1 is optimal.
        let (c1, c2) = fit_error_coefficients(&[2.0], &[1.0], &[1.0], 1.0).unwrap();
        assert_eq!(c2, 0.0);
        assert_eq!(c1, 2.0);
    }

    /// Brute-force vertex enumeration: all pairwise intersections and axis
    /// intercepts, filtered for feasibility.
    fn brute_force(r: &[f64], z: &[f64], u: &[f64], beta: f64) -> (f64, f64) {
        let feasible = |c1: f64, c2: f64| {
            c1 >= 0.0 && c2 >= 0.0 && (0..r.len()).all(|j| c1 * z[j] + c2 * u[j] >= r[j] - 1e-12)
        };
        let mut pts = vec![(0.0, 0.0)];
        for j in 0..r.len() {
            if z[j] > 0.0 {
                pts.push((r[j] / z[j], 0.0));
            }
            if u[j] > 0.0 {
                pts.push((0.0, r[j] / u[j]));
            }
            for k in j + 1..r.len() {
                let det = z[j] * u[k] - z[k] * u[j];
                if det.abs() > 1e-14 {
                    pts.push(((r[j] * u[k] - r[k] * u[j]) / det, (z[j] * r[k] - z[k] * r[j]) / det));
                }
            }
        }
        pts.into_iter()
            .filter(|p| feasible(p.0, p.1))
            .min_by(|p, q| (p.0 + beta * p.1).partial_cmp(&(q.0 + beta * q.1)).unwrap())
            .unwrap()
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_is_feasible(
            rows in proptest::collection::vec((0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0), 1..30),
            beta in 0.2f64..3.0,
        ) {
            let r: Vec<f64> = rows.iter().map(|t| t.0).collect();
            let z: Vec<f64> = rows.iter().map(|t| t.1).collect();
            let u: Vec<f64> = rows.iter().map(|t| t.2).collect();
            let (c1, c2) = fit_error_coefficients(&r, &z, &u, beta).unwrap();
            let (b1, b2) = brute_force(&r, &z, &u, beta);
            prop_assert!(((c1 + beta * c2) - (b1 + beta * b2)).abs() < 1e-9);
            let mut tight = false;
            for j in 0..r.len() {
                let slack = c1 * z[j] + c2 * u[j] - r[j];
                prop_assert!(slack >= -1e-12);
                tight |= slack.abs() <= 1e-9;
            }
            prop_assert!(tight || r.iter().all(|v| *v == 0.0));
        }

        #[test]
        fn more_data_never_lowers_the_fit(
            rows in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0), 2..30),
        ) {
            let r: Vec<f64> = rows.iter().map(|t| t.0).collect();
            let z: Vec<f64> = rows.iter().map(|t| t.1).collect();
            let u: Vec<f64> = rows.iter().map(|t| t.2).collect();
            let k = rows.len() / 2;
            let (a1, a2) = fit_error_coefficients(&r[..k], &z[..k], &u[..k], 1.0).unwrap();
            let (f1, f2) = fit_error_coefficients(&r, &z, &u, 1.0).unwrap();
            prop_assert!(f1 + f2 >= a1 + a2 - 1e-12);
        }
    }

    #[test]
    fn model_file_round_trip() {
        let plant = paper_example_system();
        let basis = build_monomial_basis(2, 2).unwrap();
        let data = collect_data(&plant, 4, 0.5, 0.01, &square_region(2), &Excitation::default(), 5).unwrap();
        let opts = FitOptions {
            beta: 1.0,
            lipschitz_region: square_region(2),
            lipschitz_resolution: 11,
            provenance: Provenance { tool: "t".into(), seed: Some(5), config_digest: Some("abc".into()) },
        };
        let model = fit_model(&data, &basis, &opts).unwrap();
        let back = LiftedBilinearModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let mut broken: serde_json::Value = serde_json::from_str(&model.to_json().unwrap()).unwrap();
        broken["c1"] = serde_json::json!(-1.0);
        assert!(LiftedBilinearModel::from_json(&broken.to_string()).is_err());
    }
}
