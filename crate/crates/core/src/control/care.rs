//! Newton–Kleinman solver for `AᵀP + PA − PBR⁻¹BᵀP + Q = 0`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, RealSchur};

#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    /// Frobenius norm of the Riccati residual at `p`.
    pub residual_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CareOptions {
    /// Stop once the residual is below `rel_tol · max(1, ‖Q‖_F)`.
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Added to the diagonal of `Q` before solving.
    pub regularization: f64,
}

impl Default for CareOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            max_iter: 100,
            regularization: 0.0,
        }
    }
}

/// Cold-started solve with default options.
pub fn solve_care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<CareSolution> {
    solve_care_with(a, b, q, r, None, &CareOptions::default())
}

/// State carried between related solves.
///
/// Holds a Lyapunov certificate `X ≻ 0` for a recent closed loop. When
/// `−(A_clᵀX + XA_cl)` is positive definite for a new closed loop `A_cl`,
/// that loop is Hurwitz and no eigenvalue computation is needed.
///
/// Also keeps the Schur form of that closed loop, which serves for cheap
/// chord corrections `P ← P + X`, `A'ᵀX + XA' + Res(P) = 0`, while the
/// closed loop drifts slowly.
#[derive(Debug, Clone, Default)]
pub struct CareWorkspace {
    certificate: Option<DMatrix<f64>>,
    schur: Option<RealSchur>,
}

impl CareWorkspace {
    /// Confirms that `acl` is Hurwitz, refreshing the certificate when the
    /// cached one no longer applies.
    fn certify(&mut self, acl: &DMatrix<f64>) -> Result<bool> {
        if let Some(x) = &self.certificate {
            if lyapunov_decrease(acl, x) {
                return Ok(true);
            }
        }
        let schur = linalg::real_schur(acl)?;
        if !schur.is_hurwitz() {
            return Ok(false);
        }
        self.refresh(&schur);
        Ok(true)
    }

    /// New certificate from the Schur form of a Hurwitz closed loop.
    fn refresh(&mut self, schur: &RealSchur) {
        let n = schur.t.nrows();
        self.certificate = linalg::lyapunov_with_schur(schur, &DMatrix::identity(n, n))
            .ok()
            .filter(|x| x.clone().cholesky().is_some());
        self.schur = Some(schur.clone());
    }
}

/// `−(AᵀX + XA) ≻ 0` with a small relative margin.
fn lyapunov_decrease(a: &DMatrix<f64>, x: &DMatrix<f64>) -> bool {
    if a.shape() != x.shape() {
        return false;
    }
    let mut m = linalg::sym_sum(&linalg::mul(x, a), -1.0);
    let margin = 1e-12 * m.amax().max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        m[(i, i)] -= margin;
    }
    m.cholesky().is_some()
}

struct Problem<'a> {
    a: &'a DMatrix<f64>,
    a_t: DMatrix<f64>,
    b: &'a DMatrix<f64>,
    r: &'a DMatrix<f64>,
    q: DMatrix<f64>,
    /// `B R⁻¹ Bᵀ`
    g: DMatrix<f64>,
    /// `R⁻¹ Bᵀ`
    rb: DMatrix<f64>,
    tol: f64,
}

impl Problem<'_> {
    /// `(AᵀP + PA − PGP + Q, A − GP)`, using the low rank of `G`.
    fn residual_parts(&self, p: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let k = linalg::mul(&self.rb, p);
        let pbk = linalg::mul(&linalg::mul(p, self.b), &k);
        let ap = linalg::mul(&self.a_t, p);
        let n = p.nrows();
        let mut res = DMatrix::<f64>::zeros(n, n);
        let (apv, pbkv, qv) = (ap.as_slice(), pbk.as_slice(), self.q.as_slice());
        let rv = res.as_mut_slice();
        for j in 0..n {
            for i in 0..=j {
                let (ij, ji) = (j * n + i, i * n + j);
                let v = apv[ij] + apv[ji] + 0.5 * (qv[ij] + qv[ji] - pbkv[ij] - pbkv[ji]);
                rv[ij] = v;
                rv[ji] = v;
            }
        }
        (res, self.a - linalg::mul(self.b, &k))
    }

    fn residual_and_closed_loop(&self, p: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let (res, acl) = self.residual_parts(p);
        (res.norm(), acl)
    }

    fn accept(&self, p: &DMatrix<f64>, res: f64, acl: &DMatrix<f64>, ws: &mut CareWorkspace) -> Result<bool> {
        Ok(res <= self.tol && is_psd(p) && ws.certify(acl)?)
    }

}

/// Solves the CARE, optionally starting Newton's iteration from `guess`.
///
/// A guess whose closed loop is not Hurwitz is discarded in favor of a cold
/// start. The cold start uses `K0 = 0` when `A` is Hurwitz. Otherwise it
/// seeds Newton with a sign-function estimate of `P`, and failing that with
/// the shifted-Lyapunov gain `K0 = BᵀZ⁻¹`.
pub fn solve_care_with(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    guess: Option<&DMatrix<f64>>,
    opts: &CareOptions,
) -> Result<CareSolution> {
    solve_care_in(a, b, q, r, guess, opts, &mut CareWorkspace::default())
}

/// [`solve_care_with`] reusing the state kept in `ws` by earlier solves.
pub fn solve_care_in(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    guess: Option<&DMatrix<f64>>,
    opts: &CareOptions,
    ws: &mut CareWorkspace,
) -> Result<CareSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() {
        return Err(Error::dims(n, a.ncols(), "CARE: A columns"));
    }
    if b.nrows() != n {
        return Err(Error::dims(n, b.nrows(), "CARE: B rows"));
    }
    if q.shape() != (n, n) {
        return Err(Error::dims(n, q.nrows(), "CARE: Q"));
    }
    if r.shape() != (m, m) {
        return Err(Error::dims(m, r.nrows(), "CARE: R"));
    }
    if a.iter().chain(b.iter()).chain(q.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("CARE: non-finite coefficients".into()));
    }
    let r_inv = if m == 0 {
        DMatrix::zeros(0, 0)
    } else {
        r.clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("CARE: R must be positive definite".into()))?
            .inverse()
    };
    let mut q_reg = linalg::symmetrize(q);
    if opts.regularization > 0.0 {
        for i in 0..n {
            q_reg[(i, i)] += opts.regularization;
        }
    }
    let rb = &r_inv * b.transpose();
    let g = linalg::symmetrize(&(b * &rb));
    let tol = opts.rel_tol * q_reg.norm().max(1.0);
    let pb = Problem {
        a,
        a_t: linalg::transpose(a),
        b,
        r,
        q: q_reg,
        g,
        rb,
        tol,
    };
    if n == 0 {
        return Ok(CareSolution {
            p: DMatrix::zeros(0, 0),
            residual_norm: 0.0,
            iterations: 0,
        });
    }

    if let Some(p0) = guess.filter(|p| p.shape() == (n, n)) {
        if let Some(sol) = newton(&pb, Start::Guess(p0.clone()), opts, ws)? {
            return Ok(sol);
        }
    }
    let schur = linalg::real_schur(a)?;
    let start = if schur.is_hurwitz() {
        Start::Gain(DMatrix::zeros(m, n), schur)
    } else {
        if let Some(p0) = sign_function_guess(&pb) {
            if let Ok(Some(sol)) = newton(&pb, Start::Guess(p0), opts, ws) {
                return Ok(sol);
            }
        }
        bass_gain(&pb, &schur)?
    };
    newton(&pb, start, opts, ws)?.ok_or_else(|| Error::CareFailure {
        reason: "initial gain is not stabilizing".into(),
        iterations: 0,
        residual: f64::NAN,
    })
}

enum Start {
    Guess(DMatrix<f64>),
    /// Stabilizing gain with the Schur form of `A − B K0`.
    Gain(DMatrix<f64>, RealSchur),
}

/// Approximate stabilizing solution from the matrix sign function of the
/// Hamiltonian `[[A, −G], [−Q, −Aᵀ]]` (Newton iteration with determinant
/// scaling). Only used to seed Newton–Kleinman, which fixes the accuracy.
fn sign_function_guess(pb: &Problem<'_>) -> Option<DMatrix<f64>> {
    let n = pb.a.nrows();
    let mut w = DMatrix::zeros(2 * n, 2 * n);
    w.view_mut((0, 0), (n, n)).copy_from(pb.a);
    w.view_mut((0, n), (n, n)).copy_from(&(-&pb.g));
    w.view_mut((n, 0), (n, n)).copy_from(&(-&pb.q));
    w.view_mut((n, n), (n, n)).copy_from(&(-pb.a.transpose()));
    for _ in 0..100 {
        let lu = w.clone().lu();
        let det = lu.determinant().abs();
        let inv = lu.try_inverse()?;
        let c = if det.is_finite() && det > 0.0 {
            det.powf(1.0 / (2 * n) as f64)
        } else {
            1.0
        };
        let next = (&w / c + inv * c) * 0.5;
        let change = (&next - &w).norm();
        let done = change <= 1e-12 * next.norm();
        w = next;
        if !w.iter().all(|v| v.is_finite()) {
            return None;
        }
        if done {
            break;
        }
    }
    // [W12; W22 + I] P = −[W11 + I; W21]
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w.view((n, n), (n, n)) + DMatrix::identity(n, n)));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w.view((0, 0), (n, n)) + DMatrix::identity(n, n))));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w.view((n, 0), (n, n))));
    let p = lhs.svd(true, true).solve(&rhs, 1e-12).ok()?;
    let p = linalg::symmetrize(&p);
    p.iter().all(|v| v.is_finite()).then_some(p)
}

/// Shifted-Lyapunov gain `K0 = BᵀZ⁻¹` with `(A + σI)Z + Z(A + σI)ᵀ = 2BBᵀ`.
fn bass_gain(pb: &Problem<'_>, schur: &RealSchur) -> Result<Start> {
    let n = pb.a.nrows();
    let shift = schur
        .eig_re
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        + 1.0;
    let mut f = pb.a.transpose();
    for i in 0..n {
        f[(i, i)] += shift;
    }
    // Fᵀ Z + Z F − 2BBᵀ = 0 with F = (A + σI)ᵀ.
    let rhs = -(pb.b * pb.b.transpose()) * 2.0;
    let z = linalg::solve_lyapunov(&f, &rhs)?;
    let z_inv = z.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| Error::CareFailure {
        reason: "pair (A, B) is not stabilizable: shifted controllability Gramian is singular".into(),
        iterations: 0,
        residual: f64::NAN,
    })?;
    let k0 = pb.b.transpose() * z_inv;
    let acl = pb.a - pb.b * &k0;
    let schur = linalg::real_schur(&acl)?;
    if !schur.is_hurwitz() {
        return Err(Error::CareFailure {
            reason: "could not construct a stabilizing initial gain".into(),
            iterations: 0,
            residual: f64::NAN,
        });
    }
    Ok(Start::Gain(k0, schur))
}

/// Up to two chord corrections with the cached Schur form.
fn chord(pb: &Problem<'_>, p0: &DMatrix<f64>, mut res_m: DMatrix<f64>, ws: &mut CareWorkspace) -> Result<Option<CareSolution>> {
    let n = p0.nrows();
    let mut p = p0.clone();
    for it in 1..=2 {
        let Some(schur) = ws.schur.as_ref().filter(|s| s.t.nrows() == n) else {
            return Ok(None);
        };
        let x = match linalg::lyapunov_with_schur(schur, &res_m) {
            Ok(x) => x,
            Err(_) => return Ok(None),
        };
        p += x;
        let (r, acl) = pb.residual_parts(&p);
        let res = r.norm();
        if !res.is_finite() {
            return Ok(None);
        }
        if pb.accept(&p, res, &acl, ws)? {
            return Ok(Some(CareSolution {
                p,
                residual_norm: res,
                iterations: it,
            }));
        }
        res_m = r;
    }
    Ok(None)
}

/// Runs Newton's iteration. Returns `Ok(None)` when a guess turns out not to
/// be stabilizing, so the caller can fall back to a cold start.
fn newton(pb: &Problem<'_>, start: Start, opts: &CareOptions, ws: &mut CareWorkspace) -> Result<Option<CareSolution>> {
    let (mut schur, mut rhs) = match start {
        Start::Guess(p0) => {
            let p0 = linalg::symmetrize(&p0);
            let (res_m, acl) = pb.residual_parts(&p0);
            let res = res_m.norm();
            if pb.accept(&p0, res, &acl, ws)? {
                return Ok(Some(CareSolution {
                    p: p0,
                    residual_norm: res,
                    iterations: 0,
                }));
            }
            if let Some(sol) = chord(pb, &p0, res_m, ws)? {
                return Ok(Some(sol));
            }
            let schur = linalg::real_schur(&acl)?;
            if !schur.is_hurwitz() {
                return Ok(None);
            }
            ws.refresh(&schur);
            let rhs = &pb.q + linalg::mul(&p0, &linalg::mul(&pb.g, &p0));
            (schur, rhs)
        }
        Start::Gain(k0, schur) => {
            let rhs = &pb.q + k0.transpose() * pb.r * &k0;
            (schur, rhs)
        }
    };

    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut last_res = f64::NAN;
    for it in 1..=opts.max_iter {
        let p = linalg::lyapunov_with_schur(&schur, &rhs)?;
        let (res, acl) = pb.residual_and_closed_loop(&p);
        last_res = res;
        if res <= pb.tol {
            if ws.certify(&acl)? {
                if !is_psd(&p) {
                    return Err(Error::CareFailure {
                        reason: "converged to an indefinite solution".into(),
                        iterations: it,
                        residual: res,
                    });
                }
                return Ok(Some(CareSolution {
                    p,
                    residual_norm: res,
                    iterations: it,
                }));
            }
            return Err(Error::CareFailure {
                reason: "converged to a non-stabilizing solution".into(),
                iterations: it,
                residual: res,
            });
        }
        if !res.is_finite() {
            break;
        }
        if res < 0.5 * best {
            best = res;
            since_best = 0;
        } else {
            since_best += 1;
            best = best.min(res);
            if since_best >= 8 {
                return Err(Error::CareFailure {
                    reason: "Newton iteration stalled".into(),
                    iterations: it,
                    residual: res,
                });
            }
        }
        schur = linalg::real_schur(&acl)?;
        if !schur.is_hurwitz() {
            return Err(Error::CareFailure {
                reason: "Newton iterate lost stability".into(),
                iterations: it,
                residual: res,
            });
        }
        ws.refresh(&schur);
        rhs = &pb.q + linalg::mul(&p, &linalg::mul(&pb.g, &p));
    }
    Err(Error::CareFailure {
        reason: "iteration limit reached".into(),
        iterations: opts.max_iter,
        residual: last_res,
    })
}

fn is_psd(p: &DMatrix<f64>) -> bool {
    // A Cholesky factorization of `P + δI` is far cheaper than an
    // eigendecomposition and certifies `λ_min(P) > −δ`.
    let scale = p.amax().max(1.0);
    if linalg::max_asymmetry(p) > 1e-12 * scale {
        return false;
    }
    let mut shifted = p.clone();
    for i in 0..p.nrows() {
        shifted[(i, i)] += 1e-10 * scale;
    }
    shifted.cholesky().is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn check(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, sol: &CareSolution) {
        let p = &sol.p;
        let g = b * r.clone().try_inverse().unwrap() * b.transpose();
        let res = (a.transpose() * p + p * a - p * &g * p + q).norm();
        // Evaluating the residual is itself only accurate to about
        // eps·n·(‖P‖²‖G‖ + 2‖A‖‖P‖); that matters once ‖P‖ gets large.
        let n = a.nrows() as f64;
        let noise = f64::EPSILON * n * (p.norm().powi(2) * g.norm() + 2.0 * a.norm() * p.norm());
        assert!(res <= 1e-9 * q.norm().max(1.0) + noise, "residual {res}");
        assert!(linalg::max_asymmetry(p) <= 1e-12);
        assert!(linalg::min_sym_eigenvalue(p) >= -1e-10);
        let eig = (a - &g * p).complex_eigenvalues();
        assert!(eig.iter().all(|l| l.re < 0.0));
    }

    #[test]
    fn scalar_closed_forms() {
        let one = m(1, 1, &[1.0]);
        let s = solve_care(&m(1, 1, &[0.0]), &one, &one, &one).unwrap();
        assert!((s.p[(0, 0)] - 1.0).abs() <= 1e-10);
        let s = solve_care(&m(1, 1, &[-1.0]), &m(1, 1, &[0.0]), &one, &one).unwrap();
        assert!((s.p[(0, 0)] - 0.5).abs() <= 1e-10);
        // a = 1, b = 2, q = 3, r = 4: p²·b²/r − 2ap − q = 0
        let s = solve_care(&one, &m(1, 1, &[2.0]), &m(1, 1, &[3.0]), &m(1, 1, &[4.0])).unwrap();
        let p = (2.0 + (4.0f64 + 4.0 * 3.0).sqrt()) / 2.0;
        assert!((s.p[(0, 0)] - p).abs() <= 1e-10);
    }

    #[test]
    fn zero_weight_on_stable_system() {
        let a = m(2, 2, &[-1.0, 2.0, 0.0, -3.0]);
        let s = solve_care(&a, &m(2, 1, &[1.0, 1.0]), &DMatrix::zeros(2, 2), &m(1, 1, &[1.0])).unwrap();
        assert!(s.p.amax() == 0.0);
    }

    #[test]
    fn double_integrator_lqr() {
        // Known solution: P = [[√3, 1], [1, √3]].
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = m(1, 1, &[1.0]);
        let s = solve_care(&a, &b, &q, &r).unwrap();
        let expect = m(2, 2, &[3f64.sqrt(), 1.0, 1.0, 3f64.sqrt()]);
        assert!((&s.p - expect).amax() < 1e-10);
        check(&a, &b, &q, &r, &s);
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let n: usize = rng.gen_range(1..=14);
        // at least n/3 inputs keeps the solution well conditioned enough
        // for an absolute residual test in double precision
        let mm = rng.gen_range(n.div_ceil(3)..=n.div_ceil(2));
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(n, mm, |_, _| rng.gen_range(-1.0..1.0));
        let l = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = &l * l.transpose();
        let lr = DMatrix::from_fn(mm, mm, |_, _| rng.gen_range(-1.0..1.0));
        let r = &lr * lr.transpose() + DMatrix::identity(mm, mm);
        (a, b, q, r)
    }

    #[test]
    fn random_instances_satisfy_certificate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 0..50 {
            let (a, b, q, r) = random_instance(&mut rng);
            let s = solve_care(&a, &b, &q, &r).unwrap_or_else(|e| {
                let (re, _) = linalg::eigenvalues(&a).unwrap();
                panic!("{k} n={} m={} eig={re:?} {e:?}", a.nrows(), b.ncols())
            });
            check(&a, &b, &q, &r, &s);
        }
    }

    #[test]
    fn warm_start_matches_cold_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let (a, b, q, r) = random_instance(&mut rng);
            let cold = solve_care(&a, &b, &q, &r).unwrap();
            let warm = solve_care_with(&a, &b, &q, &r, Some(&cold.p), &CareOptions::default()).unwrap();
            assert_eq!(warm.iterations, 0);
            let bumped = &cold.p * 1.01;
            let warm = solve_care_with(&a, &b, &q, &r, Some(&bumped), &CareOptions::default()).unwrap();
            assert!(warm.iterations <= 4);
            assert!((&warm.p - &cold.p).amax() < 1e-7 * cold.p.amax().max(1.0));
            // a useless guess falls back to the cold start
            let bad = -DMatrix::<f64>::identity(a.nrows(), a.nrows()) * 100.0;
            let s = solve_care_with(&a, &b, &q, &r, Some(&bad), &CareOptions::default()).unwrap();
            check(&a, &b, &q, &r, &s);
        }
    }

    #[test]
    fn weakly_controllable_pairs_are_certified_or_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let n = rng.gen_range(6..=14);
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
            let q = DMatrix::identity(n, n);
            let r = m(1, 1, &[1.0]);
            match solve_care(&a, &b, &q, &r) {
                Ok(s) => check(&a, &b, &q, &r, &s),
                Err(e) => assert!(matches!(e, Error::CareFailure { .. }), "{e:?}"),
            }
        }
    }

    #[test]
    fn unstabilizable_pair_fails() {
        let a = m(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let err = solve_care(&a, &b, &DMatrix::identity(2, 2), &m(1, 1, &[1.0])).unwrap_err();
        assert!(matches!(err, Error::CareFailure { .. }), "{err:?}");
    }

    #[test]
    fn rejects_bad_weights() {
        let one = m(1, 1, &[1.0]);
        assert!(solve_care(&one, &one, &one, &m(1, 1, &[-1.0])).is_err());
        assert!(solve_care(&one, &m(2, 1, &[1.0, 1.0]), &one, &one).is_err());
    }

    #[test]
    fn regularization_shifts_q() {
        let a = m(1, 1, &[-1.0]);
        let b = m(1, 1, &[0.0]);
        let opts = CareOptions {
            regularization: 1.0,
            ..CareOptions::default()
        };
        let s = solve_care_with(&a, &b, &DMatrix::zeros(1, 1), &m(1, 1, &[1.0]), None, &opts).unwrap();
        assert!((s.p[(0, 0)] - 0.5).abs() < 1e-12);
    }
}
