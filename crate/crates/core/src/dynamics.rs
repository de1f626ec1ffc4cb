//! Control-affine plants, closed-loop integration and quadratic costs.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::control::care;
use crate::error::{Error, Result};
use crate::linalg;

/// `ẋ = f(x) + Σ g_i(x) u_i` with `f(0) = 0`.
pub trait ControlAffineSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `n × m` matrix whose columns are the input fields `g_i(x)`.
    fn input_fields(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.input_fields(x) * u
    }

    /// Known optimal value `V*(x)` for the quadratic problem, if any.
    fn optimal_value(&self, _x: &DVector<f64>) -> Option<f64> {
        None
    }

    fn optimal_value_gradient(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    /// Known optimal feedback `u*(x)`, if any.
    fn optimal_controller(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    fn name(&self) -> &str {
        "custom"
    }
}

/// The two-state example plant
/// `ẋ1 = −x1 + x2`, `ẋ2 = −½(x1 + x2) + ½x1²x2 + x1 u`,
/// whose optimal value under `Q̄ = I, R = 1` is `¼x1² + ½x2²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExamplePlant;

pub fn paper_example_system() -> ExamplePlant {
    ExamplePlant
}

fn expect_dim(x: &[f64], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::dims(n, x.len(), "state vector"));
    }
    Ok(())
}

/// `V*(x) = ¼x1² + ½x2²` for the example plant.
pub fn analytic_value(x: &[f64]) -> Result<f64> {
    expect_dim(x, 2)?;
    Ok(0.25 * x[0] * x[0] + 0.5 * x[1] * x[1])
}

/// `u*(x) = −x1 x2` for the example plant.
pub fn analytic_controller(x: &[f64]) -> Result<f64> {
    expect_dim(x, 2)?;
    Ok(-x[0] * x[1])
}

impl ControlAffineSystem for ExamplePlant {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let (x1, x2) = (x[0], x[1]);
        DVector::from_vec(vec![-x1 + x2, -0.5 * (x1 + x2) + 0.5 * x1 * x1 * x2])
    }

    fn input_fields(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(2, 1, &[0.0, x[0]])
    }

    fn optimal_value(&self, x: &DVector<f64>) -> Option<f64> {
        analytic_value(x.as_slice()).ok()
    }

    fn optimal_value_gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        (x.len() == 2).then(|| DVector::from_vec(vec![0.5 * x[0], x[1]]))
    }

    fn optimal_controller(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        analytic_controller(x.as_slice())
            .ok()
            .map(|u| DVector::from_element(1, u))
    }

    fn name(&self) -> &str {
        "example"
    }
}

type VecFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Plant assembled from closures.
#[derive(Clone)]
pub struct FnSystem {
    n: usize,
    m: usize,
    drift: VecFn,
    fields: MatFn,
    optimum: Option<(ScalarFn, VecFn, VecFn)>,
}

impl FnSystem {
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        drift: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        fields: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n: state_dim,
            m: input_dim,
            drift: Arc::new(drift),
            fields: Arc::new(fields),
            optimum: None,
        }
    }

    /// Linear plant `ẋ = Ax + Bu`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let (n, m) = (a.nrows(), b.ncols());
        Self::new(n, m, move |x| &a * x, move |_| b.clone())
    }

    /// Attaches a known optimal value function, its gradient and the
    /// optimal feedback.
    pub fn with_optimum(
        mut self,
        value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        controller: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.optimum = Some((Arc::new(value), Arc::new(gradient), Arc::new(controller)));
        self
    }
}

impl ControlAffineSystem for FnSystem {
    fn state_dim(&self) -> usize {
        self.n
    }
    fn input_dim(&self) -> usize {
        self.m
    }
    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.drift)(x)
    }
    fn input_fields(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.fields)(x)
    }
    fn optimal_value(&self, x: &DVector<f64>) -> Option<f64> {
        self.optimum.as_ref().map(|(v, _, _)| v(x))
    }
    fn optimal_value_gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.optimum.as_ref().map(|(_, g, _)| g(x))
    }
    fn optimal_controller(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.optimum.as_ref().map(|(_, _, u)| u(x))
    }
}

/// Weights of `J = ∫ ½(xᵀQ̄x + uᵀRu) dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpWeights {
    pub qbar: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `CᵀQ̄C`, present once the weights are tied to a dictionary.
    pub lifted_q: Option<DMatrix<f64>>,
    pub lambda_min_qbar: f64,
    pub lambda_min_r: f64,
}

impl OcpWeights {
    pub fn new(qbar: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        for (name, m) in [("Qbar", &qbar), ("R", &r)] {
            if !m.is_square() || m.is_empty() {
                return Err(Error::InvalidArgument(format!("{name} must be square and nonempty")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} has non-finite entries")));
            }
            if linalg::max_asymmetry(m) > 1e-12 {
                return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
            }
        }
        let lambda_min_qbar = linalg::min_sym_eigenvalue(&qbar);
        let lambda_min_r = linalg::min_sym_eigenvalue(&r);
        if lambda_min_qbar <= 0.0 || lambda_min_r <= 0.0 {
            return Err(Error::InvalidArgument(
                "Qbar and R must be positive definite".into(),
            ));
        }
        Ok(Self {
            qbar,
            r,
            lifted_q: None,
            lambda_min_qbar,
            lambda_min_r,
        })
    }

    pub fn identity(n: usize, m: usize) -> Self {
        Self::new(DMatrix::identity(n, n), DMatrix::identity(m, m)).expect("identity weights")
    }

    pub fn state_dim(&self) -> usize {
        self.qbar.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.r.nrows()
    }

    /// Fills `lifted_q = CᵀQ̄C` for the selector `C`.
    pub fn with_lifting(mut self, c: &DMatrix<f64>) -> Result<Self> {
        if c.nrows() != self.qbar.nrows() {
            return Err(Error::dims(self.qbar.nrows(), c.nrows(), "selector rows"));
        }
        self.lifted_q = Some(c.transpose() * &self.qbar * c);
        Ok(self)
    }

    /// `CᵀQ̄C`, computed on the fly when not cached.
    pub fn lifted_q_for(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.lifted_q {
            Some(q) if q.nrows() == c.ncols() => q.clone(),
            _ => c.transpose() * &self.qbar * c,
        }
    }

    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (linalg::quad_form(&self.qbar, x) + linalg::quad_form(&self.r, u))
    }
}

/// Sampled closed-loop trajectory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub running_cost: Vec<f64>,
    /// The divergence guard stopped the integration.
    pub diverged: bool,
    /// The state fell below the stopping norm before the horizon.
    pub stopped_early: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> Option<&DVector<f64>> {
        self.states.last()
    }

    fn push(&mut self, t: f64, x: DVector<f64>, u: DVector<f64>, cost: f64) {
        self.times.push(t);
        self.states.push(x);
        self.inputs.push(u);
        self.running_cost.push(cost);
    }

    /// CSV with header `t,<p>1..<p>n,u1..um,running_cost[,extra...]`.
    pub fn write_csv<W: Write>(
        &self,
        out: W,
        state_prefix: &str,
        extra: &[(&str, &[f64])],
        provenance: Option<&str>,
    ) -> Result<()> {
        let mut out = out;
        if let Some(p) = provenance {
            writeln!(out, "# {p}")?;
        }
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("{state_prefix}{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.push("running_cost".into());
        header.extend(extra.iter().map(|(name, _)| name.to_string()));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![fmt_f64(self.times[k])];
            row.extend(self.states[k].iter().map(|v| fmt_f64(*v)));
            row.extend(self.inputs[k].iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(self.running_cost[k]));
            for (_, col) in extra {
                row.push(col.get(k).map_or_else(String::new, |v| fmt_f64(*v)));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip representation; deterministic across runs.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationOptions {
    pub horizon: f64,
    pub step: f64,
    /// Integration stops with `diverged = true` once `‖x‖` exceeds this.
    pub divergence_guard: f64,
    /// Integration stops once `‖x‖` falls below this.
    pub stop_norm: Option<f64>,
}

impl IntegrationOptions {
    pub fn new(horizon: f64, step: f64) -> Self {
        Self {
            horizon,
            step,
            divergence_guard: 1e6,
            stop_norm: None,
        }
    }

    /// Defaults used for infinite-horizon cost evaluation.
    pub fn infinite_horizon(horizon: f64, step: f64) -> Self {
        Self {
            stop_norm: Some(1e-6),
            ..Self::new(horizon, step)
        }
    }

    fn steps(&self) -> Result<usize> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::InvalidArgument("integration step must be positive".into()));
        }
        if !(self.horizon >= self.step) || !self.horizon.is_finite() {
            return Err(Error::InvalidArgument("horizon must be at least one step".into()));
        }
        Ok((self.horizon / self.step).round() as usize)
    }
}

/// A closed loop: a feedback evaluated once per step (zero-order hold) and
/// the vector field it drives.
pub trait ClosedLoop {
    fn control(&mut self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
}

/// Fixed-step classical RK4 with the input held over each step.
pub fn integrate_closed_loop<L: ClosedLoop + ?Sized>(
    lp: &mut L,
    x0: &DVector<f64>,
    opts: &IntegrationOptions,
) -> Result<Trajectory> {
    let steps = opts.steps()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("initial state is not finite".into()));
    }
    let h = opts.step;
    let mut traj = Trajectory::default();
    let mut x = x0.clone();
    for k in 0..=steps {
        let t = k as f64 * h;
        let u = lp.control(t, &x)?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                time: t,
                partial: Box::new(traj),
            });
        }
        let cost = lp.running_cost(&x, &u);
        traj.push(t, x.clone(), u.clone(), cost);
        if k == steps {
            break;
        }
        if let Some(tol) = opts.stop_norm {
            if x.norm() < tol {
                traj.stopped_early = true;
                break;
            }
        }
        let k1 = lp.rhs(&x, &u);
        let k2 = lp.rhs(&(&x + &k1 * (0.5 * h)), &u);
        let k3 = lp.rhs(&(&x + &k2 * (0.5 * h)), &u);
        let k4 = lp.rhs(&(&x + &k3 * h), &u);
        let next = &x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                time: t + h,
                partial: Box::new(traj),
            });
        }
        if next.norm() > opts.divergence_guard {
            traj.diverged = true;
            break;
        }
        x = next;
    }
    Ok(traj)
}

struct PlantLoop<'a, S: ?Sized, F> {
    system: &'a S,
    weights: &'a OcpWeights,
    controller: F,
}

impl<S, F> ClosedLoop for PlantLoop<'_, S, F>
where
    S: ControlAffineSystem + ?Sized,
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    fn control(&mut self, _t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u = (self.controller)(x)?;
        if u.len() != self.system.input_dim() {
            return Err(Error::dims(self.system.input_dim(), u.len(), "controller output"));
        }
        Ok(u)
    }
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.system.rhs(x, u)
    }
    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.weights.stage_cost(x, u)
    }
}

/// Integrates the plant under a state feedback.
pub fn integrate<S, F>(
    system: &S,
    weights: &OcpWeights,
    controller: F,
    x0: &DVector<f64>,
    opts: &IntegrationOptions,
) -> Result<Trajectory>
where
    S: ControlAffineSystem + ?Sized,
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    if x0.len() != system.state_dim() {
        return Err(Error::dims(system.state_dim(), x0.len(), "initial state"));
    }
    if weights.state_dim() != system.state_dim() || weights.input_dim() != system.input_dim() {
        return Err(Error::dims(system.state_dim(), weights.state_dim(), "weights vs plant"));
    }
    let mut lp = PlantLoop {
        system,
        weights,
        controller,
    };
    integrate_closed_loop(&mut lp, x0, opts)
}

/// Total cost split into the recorded quadrature and the tail estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub total: f64,
    pub recorded: f64,
    pub tail: f64,
    /// `tail / total`, 0 when the total vanishes.
    pub tail_fraction: f64,
}

impl CostBreakdown {
    fn infinite() -> Self {
        Self {
            total: f64::INFINITY,
            recorded: f64::INFINITY,
            tail: 0.0,
            tail_fraction: 0.0,
        }
    }
}

/// Trapezoidal rule over a sampled signal.
pub fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

/// Trapezoidal quadrature of the running cost plus `½ x(T)ᵀ P x(T)` when a
/// tail matrix is supplied.
pub fn quadratic_cost(traj: &Trajectory, tail_matrix: Option<&DMatrix<f64>>) -> Result<CostBreakdown> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    if traj.diverged {
        return Ok(CostBreakdown::infinite());
    }
    let recorded = trapezoid(&traj.times, &traj.running_cost);
    let tail = match (tail_matrix, traj.final_state()) {
        (Some(p), Some(x)) if p.nrows() == x.len() => 0.5 * linalg::quad_form(p, x),
        _ => 0.0,
    };
    let total = recorded + tail;
    Ok(CostBreakdown {
        total,
        recorded,
        tail,
        tail_fraction: if total > 0.0 { tail / total } else { 0.0 },
    })
}

/// Riccati solution of the linearization at the origin, used for the cost
/// tail beyond the horizon. `None` when the linearized problem has no
/// stabilizing solution.
pub fn linearized_tail_matrix<S: ControlAffineSystem + ?Sized>(
    system: &S,
    weights: &OcpWeights,
) -> Option<DMatrix<f64>> {
    let n = system.state_dim();
    let h = 1e-6;
    let zero = DVector::zeros(n);
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut xp = zero.clone();
        let mut xm = zero.clone();
        xp[j] = h;
        xm[j] = -h;
        let col = (system.drift(&xp) - system.drift(&xm)) / (2.0 * h);
        a.set_column(j, &col);
    }
    let b = system.input_fields(&zero);
    care::solve_care(&a, &b, &weights.qbar, &weights.r)
        .ok()
        .map(|s| s.p)
}

/// A value function candidate for the HJB check.
pub trait ValueFunction {
    fn value(&self, x: &DVector<f64>) -> f64;

    /// Central differences with step `1e-6` unless overridden.
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let h = 1e-6;
        DVector::from_fn(x.len(), |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (self.value(&xp) - self.value(&xm)) / (2.0 * h)
        })
    }
}

/// Wraps a closure; gradient by finite differences.
pub struct FiniteDifferenceValue<F>(pub F);

impl<F: Fn(&DVector<f64>) -> f64> ValueFunction for FiniteDifferenceValue<F> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        (self.0)(x)
    }
}

/// The plant's own analytic optimum with its analytic gradient.
pub struct AnalyticValue<'a, S: ?Sized>(pub &'a S);

impl<S: ControlAffineSystem + ?Sized> ValueFunction for AnalyticValue<'_, S> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.0.optimal_value(x).unwrap_or(f64::NAN)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.0
            .optimal_value_gradient(x)
            .unwrap_or_else(|| DVector::from_element(x.len(), f64::NAN))
    }
}

/// `∇V·(f + g u) + ½xᵀQ̄x + ½uᵀRu` at `x` with `u = controller(x)`.
pub fn hjb_residual<S, V, F>(
    system: &S,
    weights: &OcpWeights,
    value: &V,
    controller: F,
    x: &DVector<f64>,
) -> Result<f64>
where
    S: ControlAffineSystem + ?Sized,
    V: ValueFunction + ?Sized,
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if x.len() != system.state_dim() {
        return Err(Error::dims(system.state_dim(), x.len(), "state vector"));
    }
    let u = controller(x);
    if u.len() != system.input_dim() {
        return Err(Error::dims(system.input_dim(), u.len(), "controller output"));
    }
    let grad = value.gradient(x);
    Ok(grad.dot(&system.rhs(x, &u)) + weights.stage_cost(x, &u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn scalar_decay() -> FnSystem {
        FnSystem::new(1, 1, |x| -x, |_| DMatrix::zeros(1, 1))
    }

    #[test]
    fn example_plant_values() {
        let p = paper_example_system();
        assert_eq!(p.drift(&v(&[0.0, 0.0])), v(&[0.0, 0.0]));
        assert_eq!(p.drift(&v(&[1.0, 1.0])), v(&[0.0, -0.5]));
        assert_eq!(p.input_fields(&v(&[1.0, 0.0])), DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
    }

    #[test]
    fn analytic_solution_values() {
        assert_eq!(analytic_value(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(analytic_value(&[1.0, 1.0]).unwrap(), 0.75);
        assert_eq!(analytic_value(&[2.0, -1.0]).unwrap(), 1.5);
        assert_eq!(analytic_controller(&[0.0, 3.7]).unwrap(), 0.0);
        assert_eq!(analytic_controller(&[1.0, 1.0]).unwrap(), -1.0);
        assert_eq!(analytic_controller(&[-2.0, 3.0]).unwrap(), 6.0);
        assert!(analytic_value(&[1.0]).is_err());
        assert!(analytic_controller(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(OcpWeights::new(DMatrix::identity(2, 2), DMatrix::identity(1, 1)).is_ok());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(OcpWeights::new(asym, DMatrix::identity(1, 1)).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(OcpWeights::new(indefinite, DMatrix::identity(1, 1)).is_err());
    }

    #[test]
    fn lifted_weight_matches_state_weight() {
        let basis = crate::lifting::build_monomial_basis(2, 4).unwrap();
        let qbar = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let w = OcpWeights::new(qbar.clone(), DMatrix::identity(1, 1))
            .unwrap()
            .with_lifting(&basis.projection_matrix())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = v(&[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
            let z = basis.lift(x.as_slice()).unwrap();
            let lhs = linalg::quad_form(w.lifted_q.as_ref().unwrap(), &z);
            assert!((lhs - linalg::quad_form(&qbar, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn hjb_residual_examples() {
        let plant = paper_example_system();
        let w = OcpWeights::identity(2, 1);
        let u_star = |x: &DVector<f64>| plant.optimal_controller(x).unwrap();
        let r = hjb_residual(&plant, &w, &AnalyticValue(&plant), u_star, &v(&[0.5, -0.3])).unwrap();
        assert!(r.abs() <= 1e-10);

        let zero_v = FiniteDifferenceValue(|_: &DVector<f64>| 0.0);
        let zero_u = |_: &DVector<f64>| DVector::zeros(1);
        assert_eq!(hjb_residual(&plant, &w, &zero_v, zero_u, &v(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(hjb_residual(&plant, &w, &zero_v, zero_u, &v(&[1.0, 0.0])).unwrap(), 0.5);
    }

    #[test]
    fn hjb_residual_random_points() {
        let plant = paper_example_system();
        let w = OcpWeights::identity(2, 1);
        let u_star = |x: &DVector<f64>| plant.optimal_controller(x).unwrap();
        let fd = FiniteDifferenceValue(|x: &DVector<f64>| analytic_value(x.as_slice()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = v(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let ra = hjb_residual(&plant, &w, &AnalyticValue(&plant), u_star, &x).unwrap();
            let rf = hjb_residual(&plant, &w, &fd, u_star, &x).unwrap();
            assert!(ra.abs() <= 1e-10, "{ra}");
            assert!(rf.abs() <= 1e-6, "{rf}");
        }
    }

    #[test]
    fn rk4_exponential_decay() {
        let sys = scalar_decay();
        let w = OcpWeights::identity(1, 1);
        let traj = integrate(&sys, &w, |_| Ok(DVector::zeros(1)), &v(&[1.0]), &IntegrationOptions::new(1.0, 1e-3)).unwrap();
        let x_end = traj.final_state().unwrap()[0];
        assert!((x_end - (-1.0f64).exp()).abs() < 1e-9);
        assert_eq!(traj.len(), 1001);
        assert_eq!(traj.times[0], 0.0);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let sys = scalar_decay();
        let w = OcpWeights::identity(1, 1);
        let end = |h: f64| {
            integrate(&sys, &w, |_| Ok(DVector::zeros(1)), &v(&[1.0]), &IntegrationOptions::new(1.0, h))
                .unwrap()
                .final_state()
                .unwrap()[0]
        };
        let h = 0.1;
        let reference = end(h / 16.0);
        let e1 = (end(h) - reference).abs();
        let e2 = (end(h / 2.0) - reference).abs();
        let ratio = e1 / e2;
        assert!((ratio - 16.0).abs() < 2.0, "ratio {ratio}");
    }

    #[test]
    fn equilibrium_stays_put() {
        let plant = paper_example_system();
        let w = OcpWeights::identity(2, 1);
        let traj = integrate(&plant, &w, |_| Ok(DVector::zeros(1)), &v(&[0.0, 0.0]), &IntegrationOptions::new(2.0, 0.01)).unwrap();
        assert!(traj.states.iter().all(|x| x.norm() == 0.0));
        assert_eq!(quadratic_cost(&traj, None).unwrap().total, 0.0);
    }

    #[test]
    fn optimal_closed_loop_decays() {
        let plant = paper_example_system();
        let w = OcpWeights::identity(2, 1);
        let traj = integrate(
            &plant,
            &w,
            |x| Ok(plant.optimal_controller(x).unwrap()),
            &v(&[-0.8, 0.9]),
            &IntegrationOptions::new(20.0, 1e-2),
        )
        .unwrap();
        // V* decreases along the optimal closed loop.
        let values: Vec<f64> = traj.states.iter().map(|x| analytic_value(x.as_slice()).unwrap()).collect();
        assert!(values.windows(2).all(|p| p[1] <= p[0] + 1e-15));
        assert!(traj.final_state().unwrap().norm() < 1e-5);
    }

    #[test]
    fn constant_state_cost() {
        let w = OcpWeights::identity(2, 1);
        let mut traj = Trajectory::default();
        for k in 0..=200 {
            let x = v(&[1.0, 0.0]);
            let u = DVector::zeros(1);
            let c = w.stage_cost(&x, &u);
            traj.push(k as f64 * 0.01, x, u, c);
        }
        let cost = quadratic_cost(&traj, None).unwrap();
        assert!((cost.total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn optimal_cost_reproduces_value() {
        let plant = paper_example_system();
        let w = OcpWeights::identity(2, 1);
        let tail = linearized_tail_matrix(&plant, &w);
        assert!(tail.is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x0 = v(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let traj = integrate(
                &plant,
                &w,
                |x| Ok(plant.optimal_controller(x).unwrap()),
                &x0,
                &IntegrationOptions::infinite_horizon(20.0, 1e-3),
            )
            .unwrap();
            let cost = quadratic_cost(&traj, tail.as_ref()).unwrap();
            let exact = analytic_value(x0.as_slice()).unwrap();
            assert!((cost.total - exact).abs() < 1e-3, "{} vs {}", cost.total, exact);
        }
    }

    #[test]
    fn divergence_guard_and_nan() {
        let sys = FnSystem::new(1, 1, |x| x * 5.0, |_| DMatrix::zeros(1, 1));
        let w = OcpWeights::identity(1, 1);
        let traj = integrate(&sys, &w, |_| Ok(DVector::zeros(1)), &v(&[1.0]), &IntegrationOptions::new(10.0, 0.01)).unwrap();
        assert!(traj.diverged);
        assert!(quadratic_cost(&traj, None).unwrap().total.is_infinite());

        let nan = FnSystem::new(1, 1, |x| x.map(|_| f64::NAN), |_| DMatrix::zeros(1, 1));
        match integrate(&nan, &w, |_| Ok(DVector::zeros(1)), &v(&[1.0]), &IntegrationOptions::new(1.0, 0.1)) {
            Err(Error::Diverged { partial, .. }) => assert_eq!(partial.len(), 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_steps() {
        let sys = scalar_decay();
        let w = OcpWeights::identity(1, 1);
        let zero = |_: &DVector<f64>| Ok(DVector::zeros(1));
        assert!(integrate(&sys, &w, zero, &v(&[1.0]), &IntegrationOptions::new(1.0, 0.0)).is_err());
        assert!(integrate(&sys, &w, zero, &v(&[1.0]), &IntegrationOptions::new(0.01, 0.1)).is_err());
        assert!(integrate(&sys, &w, zero, &v(&[1.0, 2.0]), &IntegrationOptions::new(1.0, 0.1)).is_err());
    }

    #[test]
    fn csv_header() {
        let w = OcpWeights::identity(2, 1);
        let plant = paper_example_system();
        let traj = integrate(&plant, &w, |_| Ok(DVector::zeros(1)), &v(&[0.1, 0.2]), &IntegrationOptions::new(0.02, 0.01)).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, "x", &[], None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,x2,u1,running_cost");
        assert_eq!(text.lines().count(), 4);
    }
}
