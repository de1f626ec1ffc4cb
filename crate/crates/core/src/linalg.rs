//! Small dense kernels used by the Riccati solver.
//!
//! The lifted models are small (N around 14) but the state-dependent
//! controller re-solves a Riccati equation at every integration step, so the
//! real Schur factorization and the Bartels–Stewart Lyapunov solve are
//! written directly against column-major storage instead of going through
//! nalgebra's generic decompositions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Real Schur form `A = Z T Zᵀ` with `T` upper quasi-triangular.
#[derive(Debug, Clone)]
pub struct RealSchur {
    pub t: DMatrix<f64>,
    /// Orthogonal Schur vectors; `None` when only eigenvalues were requested.
    pub z: Option<DMatrix<f64>>,
    pub eig_re: Vec<f64>,
    pub eig_im: Vec<f64>,
    /// Diagonal blocks of `T` as `(start, size)` with size 1 or 2.
    pub blocks: Vec<(usize, usize)>,
}

impl RealSchur {
    pub fn spectral_abscissa(&self) -> f64 {
        self.eig_re.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_hurwitz(&self) -> bool {
        self.spectral_abscissa() < 0.0
    }
}

#[inline(always)]
fn ix(n: usize, i: usize, j: usize) -> usize {
    j * n + i
}

/// Householder reduction to upper Hessenberg form, optionally accumulating
/// the orthogonal similarity in `v`.
fn hessenberg(h: &mut [f64], v: Option<&mut [f64]>, n: usize) {
    if n < 3 {
        if let Some(v) = v {
            v.fill(0.0);
            for i in 0..n {
                v[ix(n, i, i)] = 1.0;
            }
        }
        return;
    }
    let high = n - 1;
    let mut ort = vec![0.0; n];
    for m in 1..high {
        let mut scale = 0.0;
        for i in m..=high {
            scale += h[ix(n, i, m - 1)].abs();
        }
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[ix(n, i, m - 1)] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;
        for j in m..n {
            let mut f = 0.0;
            for i in (m..=high).rev() {
                f += ort[i] * h[ix(n, i, j)];
            }
            f /= hh;
            for i in m..=high {
                h[ix(n, i, j)] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let mut f = 0.0;
            for j in (m..=high).rev() {
                f += ort[j] * h[ix(n, i, j)];
            }
            f /= hh;
            for j in m..=high {
                h[ix(n, i, j)] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[ix(n, m, m - 1)] = scale * g;
    }

    if let Some(v) = v {
        v.fill(0.0);
        for i in 0..n {
            v[ix(n, i, i)] = 1.0;
        }
        for m in (1..high).rev() {
            if h[ix(n, m, m - 1)] == 0.0 {
                continue;
            }
            for i in m + 1..=high {
                ort[i] = h[ix(n, i, m - 1)];
            }
            for j in m..=high {
                let mut g = 0.0;
                for i in m..=high {
                    g += ort[i] * v[ix(n, i, j)];
                }
                g = (g / ort[m]) / h[ix(n, m, m - 1)];
                for i in m..=high {
                    v[ix(n, i, j)] += g * ort[i];
                }
            }
        }
    }

    for j in 0..n {
        for i in j + 2..n {
            h[ix(n, i, j)] = 0.0;
        }
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix.
///
/// With `full` the whole matrix is updated so that `h` ends in real Schur
/// form; otherwise only the active window is touched, which is enough for
/// the eigenvalues.
#[allow(unused_assignments)]
fn hqr(
    h: &mut [f64],
    mut v: Option<&mut [f64]>,
    n_total: usize,
    full: bool,
    wr: &mut [f64],
    wi: &mut [f64],
) -> Result<()> {
    let nn = n_total;
    if nn == 0 {
        return Ok(());
    }
    let eps = f64::EPSILON;
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let (mut x, mut y, mut w);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[ix(nn, i, j)].abs();
        }
    }

    let mut n = nn as isize - 1;
    let mut iter = 0usize;
    while n >= 0 {
        let nu = n as usize;
        // Look for a single small subdiagonal element.
        let mut l = nu;
        while l > 0 {
            s = h[ix(nn, l - 1, l - 1)].abs() + h[ix(nn, l, l)].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[ix(nn, l, l - 1)].abs() <= eps * s {
                break;
            }
            l -= 1;
        }

        if l == nu {
            // One root.
            h[ix(nn, nu, nu)] += exshift;
            wr[nu] = h[ix(nn, nu, nu)];
            wi[nu] = 0.0;
            if nu > 0 {
                h[ix(nn, nu, nu - 1)] = 0.0;
            }
            n -= 1;
            iter = 0;
        } else if l + 1 == nu {
            // Two roots.
            w = h[ix(nn, nu, nu - 1)] * h[ix(nn, nu - 1, nu)];
            p = (h[ix(nn, nu - 1, nu - 1)] - h[ix(nn, nu, nu)]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[ix(nn, nu, nu)] += exshift;
            h[ix(nn, nu - 1, nu - 1)] += exshift;
            x = h[ix(nn, nu, nu)];
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                wr[nu - 1] = x + z;
                wr[nu] = wr[nu - 1];
                if z != 0.0 {
                    wr[nu] = x - w / z;
                }
                wi[nu - 1] = 0.0;
                wi[nu] = 0.0;
                if full {
                    x = h[ix(nn, nu, nu - 1)];
                    s = x.abs() + z.abs();
                    p = x / s;
                    q = z / s;
                    r = (p * p + q * q).sqrt();
                    p /= r;
                    q /= r;
                    for j in nu - 1..nn {
                        z = h[ix(nn, nu - 1, j)];
                        h[ix(nn, nu - 1, j)] = q * z + p * h[ix(nn, nu, j)];
                        h[ix(nn, nu, j)] = q * h[ix(nn, nu, j)] - p * z;
                    }
                    for i in 0..=nu {
                        z = h[ix(nn, i, nu - 1)];
                        h[ix(nn, i, nu - 1)] = q * z + p * h[ix(nn, i, nu)];
                        h[ix(nn, i, nu)] = q * h[ix(nn, i, nu)] - p * z;
                    }
                    if let Some(v) = v.as_deref_mut() {
                        for i in 0..nn {
                            z = v[ix(nn, i, nu - 1)];
                            v[ix(nn, i, nu - 1)] = q * z + p * v[ix(nn, i, nu)];
                            v[ix(nn, i, nu)] = q * v[ix(nn, i, nu)] - p * z;
                        }
                    }
                    h[ix(nn, nu, nu - 1)] = 0.0;
                }
            } else {
                wr[nu - 1] = x + p;
                wr[nu] = x + p;
                wi[nu - 1] = z;
                wi[nu] = -z;
            }
            if nu >= 2 {
                h[ix(nn, nu - 1, nu - 2)] = 0.0;
            }
            n -= 2;
            iter = 0;
        } else {
            x = h[ix(nn, nu, nu)];
            y = 0.0;
            w = 0.0;
            if l < nu {
                y = h[ix(nn, nu - 1, nu - 1)];
                w = h[ix(nn, nu, nu - 1)] * h[ix(nn, nu - 1, nu)];
            }
            if iter == 10 {
                exshift += x;
                for i in 0..=nu {
                    h[ix(nn, i, i)] -= x;
                }
                s = h[ix(nn, nu, nu - 1)].abs() + h[ix(nn, nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in 0..=nu {
                        h[ix(nn, i, i)] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::NoConvergence);
            }

            // Look for two consecutive small subdiagonal elements.
            let mut m = nu - 2;
            loop {
                z = h[ix(nn, m, m)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[ix(nn, m + 1, m)] + h[ix(nn, m, m + 1)];
                q = h[ix(nn, m + 1, m + 1)] - z - r - s;
                r = h[ix(nn, m + 2, m + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[ix(nn, m, m - 1)].abs() * (q.abs() + r.abs())
                    < eps
                        * (p.abs()
                            * (h[ix(nn, m - 1, m - 1)].abs()
                                + z.abs()
                                + h[ix(nn, m + 1, m + 1)].abs()))
                {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                h[ix(nn, i, i - 2)] = 0.0;
                if i > m + 2 {
                    h[ix(nn, i, i - 3)] = 0.0;
                }
            }

            let (col_lo, row_hi) = if full { (0, nn - 1) } else { (l, nu) };
            let mut k = m;
            while k < nu {
                let notlast = k != nu - 1;
                if k != m {
                    p = h[ix(nn, k, k - 1)];
                    q = h[ix(nn, k + 1, k - 1)];
                    r = if notlast { h[ix(nn, k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[ix(nn, k, k - 1)] = -s * x;
                    } else if l != m {
                        h[ix(nn, k, k - 1)] = -h[ix(nn, k, k - 1)];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;

                    for j in k..=row_hi {
                        let mut pp = h[ix(nn, k, j)] + q * h[ix(nn, k + 1, j)];
                        if notlast {
                            pp += r * h[ix(nn, k + 2, j)];
                            h[ix(nn, k + 2, j)] -= pp * z;
                        }
                        h[ix(nn, k, j)] -= pp * x;
                        h[ix(nn, k + 1, j)] -= pp * y;
                    }
                    let i_hi = nu.min(k + 3);
                    for i in col_lo..=i_hi {
                        let mut pp = x * h[ix(nn, i, k)] + y * h[ix(nn, i, k + 1)];
                        if notlast {
                            pp += z * h[ix(nn, i, k + 2)];
                            h[ix(nn, i, k + 2)] -= pp * r;
                        }
                        h[ix(nn, i, k)] -= pp;
                        h[ix(nn, i, k + 1)] -= pp * q;
                    }
                    if let Some(v) = v.as_deref_mut() {
                        for i in 0..nn {
                            let mut pp = x * v[ix(nn, i, k)] + y * v[ix(nn, i, k + 1)];
                            if notlast {
                                pp += z * v[ix(nn, i, k + 2)];
                                v[ix(nn, i, k + 2)] -= pp * r;
                            }
                            v[ix(nn, i, k)] -= pp;
                            v[ix(nn, i, k + 1)] -= pp * q;
                        }
                    }
                }
                k += 1;
            }
        }
    }
    Ok(())
}

fn schur_impl(a: &DMatrix<f64>, with_vectors: bool) -> Result<RealSchur> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::dims(n, a.ncols(), "schur: square matrix"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("schur: non-finite entry".into()));
    }
    let mut h = a.clone();
    let mut z = if with_vectors {
        Some(DMatrix::<f64>::zeros(n, n))
    } else {
        None
    };
    hessenberg(
        h.as_mut_slice(),
        z.as_mut().map(|m| m.as_mut_slice()),
        n,
    );
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    hqr(
        h.as_mut_slice(),
        z.as_mut().map(|m| m.as_mut_slice()),
        n,
        with_vectors,
        &mut wr,
        &mut wi,
    )?;

    let mut blocks = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n && wi[i] != 0.0 {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }
    if with_vectors {
        // Clean the strictly lower part outside the 2x2 blocks.
        for j in 0..n {
            for i in j + 1..n {
                let in_block = i == j + 1 && wi[j] != 0.0 && blocks.contains(&(j, 2));
                if !in_block {
                    h[(i, j)] = 0.0;
                }
            }
        }
    }
    Ok(RealSchur {
        t: h,
        z,
        eig_re: wr,
        eig_im: wi,
        blocks,
    })
}

/// Real Schur decomposition with Schur vectors.
pub fn real_schur(a: &DMatrix<f64>) -> Result<RealSchur> {
    schur_impl(a, true)
}

/// Eigenvalues only (real and imaginary parts).
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = schur_impl(a, false)?;
    Ok((s.eig_re, s.eig_im))
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> Result<f64> {
    let (re, _) = eigenvalues(a)?;
    Ok(re.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Solves `Tᵀ Y + Y T = C` for upper quasi-triangular `T`.
///
/// Block column by block column; `y` doubles as the workspace for the
/// partially reduced right-hand side.
fn quasi_triangular_lyapunov(
    t: &DMatrix<f64>,
    blocks: &[(usize, usize)],
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    let ts = t.as_slice();
    let mut y = c.clone();
    let ys = y.as_mut_slice();
    let mut rhs = [0.0f64; 4];
    let mut sys = [0.0f64; 16];
    for &(sj, qj) in blocks {
        // Remove the contribution of the finished columns: Y[:, ..sj] T[..sj, J].
        let (done, rest) = ys.split_at_mut(sj * n);
        for b in 0..qj {
            let col = &mut rest[b * n..(b + 1) * n];
            let tcol = &ts[(sj + b) * n..(sj + b) * n + sj];
            for (l, &tl) in tcol.iter().enumerate() {
                if tl != 0.0 {
                    let yl = &done[l * n..(l + 1) * n];
                    for (dst, &v) in col.iter_mut().zip(yl) {
                        *dst -= v * tl;
                    }
                }
            }
        }
        for &(si, pi) in blocks {
            for a in 0..pi {
                let tcol = &ts[(si + a) * n..(si + a) * n + si];
                for b in 0..qj {
                    let ycol = &rest[b * n..b * n + si];
                    let dot: f64 = tcol.iter().zip(ycol).map(|(p, q)| p * q).sum();
                    rhs[a * qj + b] = rest[b * n + si + a] - dot;
                }
            }
            let tii = ts[si * n + si];
            let tjj = ts[sj * n + sj];
            match (pi, qj) {
                (1, 1) => {
                    rhs[0] = solve_scalar(tii + tjj, rhs[0], tii.abs().max(tjj.abs()))?;
                }
                (2, 1) => {
                    // (T_IIᵀ + t_jj I) y = rhs
                    let m = [
                        tii + tjj,
                        ts[si * n + si + 1],
                        ts[(si + 1) * n + si],
                        ts[(si + 1) * n + si + 1] + tjj,
                    ];
                    solve_2x2(m, &mut rhs)?;
                }
                (1, 2) => {
                    // (T_JJᵀ + t_ii I) yᵀ = rhsᵀ
                    let m = [
                        tjj + tii,
                        ts[sj * n + sj + 1],
                        ts[(sj + 1) * n + sj],
                        ts[(sj + 1) * n + sj + 1] + tii,
                    ];
                    solve_2x2(m, &mut rhs)?;
                }
                _ => {
                    // Unknown (a, b) has index 2a + b. Equation (a', b'):
                    //   sum_a T[si+a, si+a'] Y[a, b'] + sum_b Y[a', b] T[sj+b, sj+b'].
                    let ti = |r: usize, c: usize| ts[(si + c) * n + si + r];
                    let tj = |r: usize, c: usize| ts[(sj + c) * n + sj + r];
                    for ap in 0..2 {
                        for bp in 0..2 {
                            let row = &mut sys[(2 * ap + bp) * 4..(2 * ap + bp) * 4 + 4];
                            row[bp] = ti(0, ap);
                            row[2 + bp] = ti(1, ap);
                            row[1 - bp] = 0.0;
                            row[3 - bp] = 0.0;
                            row[2 * ap] += tj(0, bp);
                            row[2 * ap + 1] += tj(1, bp);
                        }
                    }
                    solve_4x4(&mut sys, &mut rhs)?;
                }
            }
            for a in 0..pi {
                for b in 0..qj {
                    rest[b * n + si + a] = rhs[a * qj + b];
                }
            }
        }
    }
    Ok(y)
}

/// `C[:, j] = Σ_l A[:, l] · coef(l, j)`, the shared core of the small
/// products. Columns of `A` up to 16 rows are padded to a fixed width so the
/// inner loop has a constant trip count.
fn combine_columns(a: &DMatrix<f64>, n: usize, coef: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    let (m, k) = a.shape();
    let mut c = DMatrix::<f64>::zeros(m, n);
    if m == 0 || n == 0 {
        return c;
    }
    if m <= 8 {
        combine_padded::<8>(a.as_slice(), m, k, n, c.as_mut_slice(), coef);
    } else if m <= 16 {
        combine_padded::<16>(a.as_slice(), m, k, n, c.as_mut_slice(), coef);
    } else {
        let av = a.as_slice();
        for (j, cc) in c.as_mut_slice().chunks_exact_mut(m).enumerate() {
            for l in 0..k {
                let s = coef(l, j);
                if s != 0.0 {
                    for (dst, &v) in cc.iter_mut().zip(&av[l * m..(l + 1) * m]) {
                        *dst += v * s;
                    }
                }
            }
        }
    }
    c
}

fn combine_padded<const W: usize>(
    av: &[f64],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
    coef: impl Fn(usize, usize) -> f64,
) {
    let mut padded = vec![[0.0f64; W]; k];
    for (l, col) in padded.iter_mut().enumerate() {
        col[..m].copy_from_slice(&av[l * m..(l + 1) * m]);
    }
    for j in 0..n {
        let mut acc = [0.0f64; W];
        for (l, col) in padded.iter().enumerate() {
            let s = coef(l, j);
            for i in 0..W {
                acc[i] += col[i] * s;
            }
        }
        out[j * m..(j + 1) * m].copy_from_slice(&acc[..m]);
    }
}

/// `A B` for small dense matrices (plain loops, no packing).
pub fn mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.nrows(), "mul: inner dimensions");
    let k = b.nrows();
    let bv = b.as_slice();
    combine_columns(a, b.ncols(), |l, j| bv[j * k + l])
}

/// `Aᵀ B`.
pub fn mul_tn(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "mul_tn: inner dimensions");
    mul(&transpose(a), b)
}

/// `A Bᵀ` without forming the transpose.
pub fn mul_nt(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols(), "mul_nt: inner dimensions");
    let n = b.nrows();
    let bv = b.as_slice();
    combine_columns(a, n, |l, j| bv[l * n + j])
}

fn singular() -> Error {
    Error::Singular("Lyapunov operator: eigenvalues sum to zero".into())
}

fn solve_scalar(d: f64, r: f64, scale: f64) -> Result<f64> {
    if d.abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
        return Err(singular());
    }
    Ok(r / d)
}

/// Cramer's rule on a row-major 2x2 system.
fn solve_2x2(m: [f64; 4], b: &mut [f64; 4]) -> Result<()> {
    let det = m[0] * m[3] - m[1] * m[2];
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if det.abs() <= 1e-14 * (scale * scale).max(f64::MIN_POSITIVE) {
        return Err(singular());
    }
    let (b0, b1) = (b[0], b[1]);
    b[0] = (m[3] * b0 - m[1] * b1) / det;
    b[1] = (m[0] * b1 - m[2] * b0) / det;
    Ok(())
}

/// Gaussian elimination with partial pivoting on a row-major 4x4 system.
fn solve_4x4(m: &mut [f64; 16], b: &mut [f64; 4]) -> Result<()> {
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..4 {
        let mut piv = col;
        for r in col + 1..4 {
            if m[r * 4 + col].abs() > m[piv * 4 + col].abs() {
                piv = r;
            }
        }
        if m[piv * 4 + col].abs() <= 1e-14 * scale {
            return Err(singular());
        }
        if piv != col {
            for k in 0..4 {
                m.swap(col * 4 + k, piv * 4 + k);
            }
            b.swap(col, piv);
        }
        let d = m[col * 4 + col];
        for r in col + 1..4 {
            let f = m[r * 4 + col] / d;
            for k in col..4 {
                m[r * 4 + k] -= f * m[col * 4 + k];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..4).rev() {
        let mut acc = b[col];
        for k in col + 1..4 {
            acc -= m[col * 4 + k] * b[k];
        }
        b[col] = acc / m[col * 4 + col];
    }
    Ok(())
}


fn mirror_upper(c: &mut DMatrix<f64>) {
    let n = c.nrows();
    let v = c.as_mut_slice();
    for j in 0..n {
        for i in 0..j {
            v[i * n + j] = v[j * n + i];
        }
    }
}

/// Solves `Fᵀ X + X F + G = 0` given the real Schur form of `F`. Only the
/// symmetric part of `G` is used.
pub fn lyapunov_with_schur(schur: &RealSchur, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let u = schur
        .z
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("Schur vectors required".into()))?;
    let g = symmetrize(g);
    let mut c = mul_tn(u, &mul(&g, u));
    mirror_upper(&mut c);
    c.neg_mut();
    let y = quasi_triangular_lyapunov(&schur.t, &schur.blocks, &c)?;
    let mut x = mul_nt(&mul(u, &y), u);
    mirror_upper(&mut x);
    Ok(x)
}

/// Bartels–Stewart solve of `Fᵀ X + X F + G = 0` for symmetric `G`.
pub fn solve_lyapunov(f: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    if g.nrows() != n || g.ncols() != n {
        return Err(Error::dims(n, g.nrows(), "lyapunov: right-hand side"));
    }
    let schur = real_schur(f)?;
    lyapunov_with_schur(&schur, g)
}

/// `½(M + Mᵀ)` for square `M`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_sum(m, 0.5)
}

/// `s(M + Mᵀ)` for square `M`.
pub fn sym_sum(m: &DMatrix<f64>, s: f64) -> DMatrix<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "sym_sum: square matrix expected");
    let mut out = DMatrix::<f64>::zeros(n, n);
    let (src, dst) = (m.as_slice(), out.as_mut_slice());
    for j in 0..n {
        for i in 0..=j {
            let v = s * (src[j * n + i] + src[i * n + j]);
            dst[j * n + i] = v;
            dst[i * n + j] = v;
        }
    }
    out
}

/// Transpose through plain slices.
pub fn transpose(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::<f64>::zeros(c, r);
    let (src, dst) = (m.as_slice(), out.as_mut_slice());
    for j in 0..c {
        for i in 0..r {
            dst[i * c + j] = src[j * r + i];
        }
    }
    out
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let v = m.as_slice();
    let mut worst = 0.0f64;
    for j in 0..m.ncols().min(n) {
        for i in 0..j {
            worst = worst.max((v[j * n + i] - v[i * n + j]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// `xᵀ M x`
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// Converts a dense matrix into row-major nested vectors for serialization.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>], ncols_if_empty: usize) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(ncols_if_empty, |r| r.len());
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::dims(ncols, bad.len(), "row-major matrix rows"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
