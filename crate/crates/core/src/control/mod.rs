//! State-dependent Riccati control of the lifted bilinear model.

pub mod care;

use std::io::Write;

use nalgebra::{DMatrix, DVector};

pub use care::{solve_care, solve_care_in, solve_care_with, CareOptions, CareSolution, CareWorkspace};

use crate::dynamics::{integrate_closed_loop, trapezoid, ClosedLoop, IntegrationOptions, OcpWeights, Trajectory};
use crate::edmd::LiftedBilinearModel;
use crate::error::{Error, Result};
use crate::linalg;

/// `B(z) = B0 + Σ_i B_i z e_iᵀ`
pub fn input_matrix(model: &LiftedBilinearModel, z: &DVector<f64>) -> DMatrix<f64> {
    let mut b = model.b0.clone();
    for (i, bi) in model.b_list.iter().enumerate() {
        let mut col = b.column_mut(i);
        col += bi * z;
    }
    b
}

/// Nominal optimal quantities at one lifted state.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalSolution {
    pub z: DVector<f64>,
    pub u0: DVector<f64>,
    pub v0: f64,
    /// `P(z) z`
    pub grad_v0: DVector<f64>,
    pub care: CareSolution,
    /// The query state lies outside the box the Lipschitz constant covers.
    pub outside_region: bool,
}

/// SDRE feedback `u0(z) = −R⁻¹B(z)ᵀP(z)z`.
///
/// Keeps the last three Riccati solutions and starts each new solve from
/// their quadratic extrapolation; along a smooth trajectory that guess
/// usually meets the residual tolerance without any Newton step.
pub struct SdreController<'a> {
    model: &'a LiftedBilinearModel,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    opts: CareOptions,
    history: Vec<DMatrix<f64>>,
    ws: CareWorkspace,
}

impl<'a> SdreController<'a> {
    pub fn new(model: &'a LiftedBilinearModel, weights: &OcpWeights, opts: CareOptions) -> Result<Self> {
        if weights.state_dim() != model.state_dim() {
            return Err(Error::dims(model.state_dim(), weights.state_dim(), "weights vs model state"));
        }
        if weights.input_dim() != model.input_dim() {
            return Err(Error::dims(model.input_dim(), weights.input_dim(), "weights vs model input"));
        }
        let r_inv = weights
            .r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("R is singular".into()))?;
        Ok(Self {
            model,
            q: weights.lifted_q_for(&model.c),
            r: weights.r.clone(),
            r_inv,
            opts,
            history: Vec::with_capacity(3),
            ws: CareWorkspace::default(),
        })
    }

    pub fn model(&self) -> &LiftedBilinearModel {
        self.model
    }

    pub fn lifted_q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Forgets the warm-start history.
    pub fn reset(&mut self) {
        self.history.clear();
        self.ws = CareWorkspace::default();
    }

    fn finish(&self, z: &DVector<f64>, b: &DMatrix<f64>, care: CareSolution) -> NominalSolution {
        let grad = &care.p * z;
        let u0 = -(&self.r_inv * (b.transpose() * &grad));
        let v0 = 0.5 * z.dot(&grad);
        let x = &self.model.c * z;
        NominalSolution {
            z: z.clone(),
            u0,
            v0,
            grad_v0: grad,
            outside_region: !self.model.lipschitz.region.contains(x.as_slice()),
            care,
        }
    }

    /// Cold-started solve; the result depends only on `z`.
    pub fn solve_cold(&self, z: &DVector<f64>) -> Result<NominalSolution> {
        self.check_dim(z)?;
        let b = input_matrix(self.model, z);
        let care = solve_care_with(&self.model.a, &b, &self.q, &self.r, None, &self.opts)?;
        Ok(self.finish(z, &b, care))
    }

    /// Warm-started solve along a trajectory.
    pub fn solve(&mut self, z: &DVector<f64>) -> Result<NominalSolution> {
        self.check_dim(z)?;
        let b = input_matrix(self.model, z);
        let guess = match self.history.as_slice() {
            [p0, p1, p2] => Some(p2.zip_zip_map(p1, p0, |c, b, a| 3.0 * (c - b) + a)),
            [p0, p1] => Some(p1.zip_map(p0, |b, a| 2.0 * b - a)),
            [p0] => Some(p0.clone()),
            _ => None,
        };
        let (a, q, r, opts) = (&self.model.a, &self.q, &self.r, &self.opts);
        let care = match solve_care_in(a, &b, q, r, guess.as_ref(), opts, &mut self.ws) {
            Ok(c) => c,
            // an extrapolated guess can overshoot; retry from the last solution
            Err(_) if self.history.len() > 1 => {
                solve_care_in(a, &b, q, r, self.history.last(), opts, &mut self.ws)?
            }
            Err(e) => return Err(e),
        };
        if self.history.len() == 3 {
            self.history.remove(0);
        }
        self.history.push(care.p.clone());
        Ok(self.finish(z, &b, care))
    }

    fn check_dim(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.model.lifted_dim() {
            return Err(Error::dims(self.model.lifted_dim(), z.len(), "lifted state"));
        }
        Ok(())
    }
}

/// Nominal solution at the lifted image of `x`.
pub fn nominal_solution(model: &LiftedBilinearModel, weights: &OcpWeights, x: &[f64]) -> Result<NominalSolution> {
    nominal_solution_with(model, weights, x, CareOptions::default())
}

pub fn nominal_solution_with(
    model: &LiftedBilinearModel,
    weights: &OcpWeights,
    x: &[f64],
    opts: CareOptions,
) -> Result<NominalSolution> {
    let z = model.basis.lift(x)?;
    SdreController::new(model, weights, opts)?.solve_cold(&z)
}

/// Admissible model-error realization `r(z, u)` added to the lifted
/// dynamics, with `‖r‖ ≤ c1‖z‖ + c2‖u‖`.
#[derive(Debug, Clone, PartialEq)]
pub enum ErrorRealization {
    None,
    /// `s (c1‖z‖ + c2‖u‖) d` for a fixed unit direction `d`, `s ∈ [0, 1]`.
    Direction { dir: DVector<f64>, scale: f64 },
    /// Full-size error along `∇V0 / ‖∇V0‖`.
    WorstProxy,
    /// Full-size error against `∇V0`.
    BestProxy,
}

impl ErrorRealization {
    /// Error at `(z, u)`; `grad` is the current value gradient direction.
    pub fn eval(&self, c1: f64, c2: f64, z: &DVector<f64>, u: &DVector<f64>, grad: &DVector<f64>) -> Option<DVector<f64>> {
        let size = c1 * z.norm() + c2 * u.norm();
        match self {
            ErrorRealization::None => None,
            ErrorRealization::Direction { dir, scale } => Some(dir * (scale * size)),
            ErrorRealization::WorstProxy | ErrorRealization::BestProxy => {
                let g = grad.norm();
                if g == 0.0 || size == 0.0 {
                    return None;
                }
                let sign = if matches!(self, ErrorRealization::WorstProxy) { 1.0 } else { -1.0 };
                Some(grad * (sign * size / g))
            }
        }
    }
}

/// Lifted closed-loop trajectory with the value and its gradient at every
/// sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LiftedTrajectory {
    pub traj: Trajectory,
    pub v0: Vec<f64>,
    pub grad_v0: Vec<DVector<f64>>,
    /// Riccati solution at `z = 0`, used for the cost tail.
    pub p_origin: Option<DMatrix<f64>>,
}

impl LiftedTrajectory {
    /// Trajectory CSV (`z` prefix) with `V0,gradV0_norm` appended.
    pub fn write_csv<W: Write>(&self, out: W, provenance: Option<&str>) -> Result<()> {
        let norms: Vec<f64> = self.grad_v0.iter().map(|g| g.norm()).collect();
        self.traj
            .write_csv(out, "z", &[("V0", &self.v0), ("gradV0_norm", &norms)], provenance)
    }

    pub fn gradient_energy(&self) -> GradientEnergy {
        gradient_energy(&self.traj.times, &self.grad_v0)
    }
}

struct LiftedLoop<'a, 'm> {
    ctrl: &'a mut SdreController<'m>,
    error: &'a ErrorRealization,
    held_p: DMatrix<f64>,
    v0: Vec<f64>,
    grad_v0: Vec<DVector<f64>>,
}

impl ClosedLoop for LiftedLoop<'_, '_> {
    fn control(&mut self, _t: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
        let sol = self.ctrl.solve(z)?;
        self.v0.push(sol.v0);
        self.grad_v0.push(sol.grad_v0);
        self.held_p = sol.care.p;
        Ok(sol.u0)
    }

    fn rhs(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let model = self.ctrl.model;
        let mut dz = &model.a * z + input_matrix(model, z) * u;
        if !matches!(self.error, ErrorRealization::None) {
            let grad = &self.held_p * z;
            if let Some(r) = self.error.eval(model.c1, model.c2, z, u, &grad) {
                dz += r;
            }
        }
        dz
    }

    fn running_cost(&self, z: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (linalg::quad_form(&self.ctrl.q, z) + linalg::quad_form(&self.ctrl.r, u))
    }
}

/// Integrates `ż = Az + B(z)u0(z) + r(z, u0)` from `z0 = Ψ(x0)`, re-solving
/// the Riccati equation at every step.
pub fn simulate_lifted(
    model: &LiftedBilinearModel,
    weights: &OcpWeights,
    x0: &[f64],
    opts: &IntegrationOptions,
    care_opts: CareOptions,
    error: &ErrorRealization,
) -> Result<LiftedTrajectory> {
    let z0 = model.basis.lift(x0)?;
    let mut ctrl = SdreController::new(model, weights, care_opts)?;
    let p_origin = ctrl.solve_cold(&DVector::zeros(model.lifted_dim())).ok().map(|s| s.care.p);
    let n = model.lifted_dim();
    let mut lp = LiftedLoop {
        ctrl: &mut ctrl,
        error,
        held_p: DMatrix::zeros(n, n),
        v0: Vec::new(),
        grad_v0: Vec::new(),
    };
    let traj = integrate_closed_loop(&mut lp, &z0, opts)?;
    let (mut v0, mut grad_v0) = (lp.v0, lp.grad_v0);
    v0.truncate(traj.len());
    grad_v0.truncate(traj.len());
    Ok(LiftedTrajectory {
        traj,
        v0,
        grad_v0,
        p_origin,
    })
}

/// Nominal lifted closed loop (no model error).
pub fn simulate_nominal(
    model: &LiftedBilinearModel,
    weights: &OcpWeights,
    x0: &[f64],
    opts: &IntegrationOptions,
    care_opts: CareOptions,
) -> Result<LiftedTrajectory> {
    simulate_lifted(model, weights, x0, opts, care_opts, &ErrorRealization::None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientEnergy {
    pub value: f64,
    /// Share of `value` collected over the last 10% of the time span.
    pub tail_fraction: f64,
}

/// Trapezoidal `∫ ‖∇V0‖² dt`.
pub fn gradient_energy(times: &[f64], grads: &[DVector<f64>]) -> GradientEnergy {
    let sq: Vec<f64> = grads.iter().map(|g| g.norm_squared()).collect();
    let k = times.len().min(sq.len());
    let value = trapezoid(&times[..k], &sq[..k]);
    if k < 2 || value <= 0.0 {
        return GradientEnergy {
            value: value.max(0.0),
            tail_fraction: 0.0,
        };
    }
    let (t0, t1) = (times[0], times[k - 1]);
    let cut = t1 - 0.1 * (t1 - t0);
    let start = times[..k].iter().position(|t| *t >= cut).unwrap_or(k - 1);
    let tail = trapezoid(&times[start..k], &sq[start..k]);
    GradientEnergy {
        value,
        tail_fraction: tail / value,
    }
}
