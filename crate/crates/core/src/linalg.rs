//! Dense real-matrix kernels: spectral queries, pseudoinverses and the
//! discrete Lyapunov / Riccati solvers everything else is built on.
//!
//! Two Lyapunov orientations are exposed on purpose:
//!
//! - [`dlyap`] solves `X = Q + AᵀXA` (value / cost-to-go orientation),
//! - [`dlyap_cov`] solves `X = Q + AXAᵀ` (stationary covariance orientation).
//!
//! Both are Smith doubling iterations. [`dare`] runs the structured doubling
//! algorithm and polishes the result with Newton–Kleinman steps when the
//! residual is not yet at tolerance.

use nalgebra::linalg::{Schur, SVD};
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Dense row/column matrix of `f64`. Storage is nalgebra's column-major
/// layout; constructors taking row-major data go through [`mat_from_rows`].
pub type Mat = DMatrix<f64>;

const MAX_DOUBLINGS: usize = 64;
const DOUBLING_TOL: f64 = 1e-13;
const DARE_TOL: f64 = 1e-9;
const DARE_NK_STEPS: usize = 50;
const DEFAULT_MAX_GRAM_CONDITION: f64 = 1e12;

/// Build a matrix from row-major nested data.
pub fn mat_from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::dim("mat_from_rows", "no rows"));
    }
    let m = rows[0].len();
    if m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::dim("mat_from_rows", "ragged or empty rows"));
    }
    let out = Mat::from_fn(n, m, |i, j| rows[i][j]);
    ensure_finite(&out, "matrix literal")?;
    Ok(out)
}

pub fn ensure_finite(m: &Mat, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn ensure_square(m: &Mat, what: &'static str) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::dim(what, format!("expected square, got {}x{}", m.nrows(), m.ncols())))
    }
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Largest eigenvalue modulus, read off the real Schur form.
///
/// The QR iteration occasionally stalls on a finite input; the transpose and
/// a fixed Householder similarity share the spectrum and are tried next.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    ensure_square(m, "spectral_radius")?;
    ensure_finite(m, "spectral_radius")?;
    let n = m.nrows();
    if n == 1 {
        return Ok(m[(0, 0)].abs());
    }
    let v = Mat::from_fn(n, 1, |i, _| (i + 1) as f64);
    let h = Mat::identity(n, n) - &v * v.transpose() * (2.0 / v.norm_squared());
    let candidates = [m.clone(), m.transpose(), &h * m * &h];
    for c in candidates {
        if let Some(schur) = Schur::try_new(c, 1e-15, 10_000) {
            return Ok(schur
                .complex_eigenvalues()
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max));
        }
    }
    Err(Error::NoConvergence {
        solver: "real Schur decomposition",
        iterations: 10_000,
        residual: f64::NAN,
    })
}

fn singular_values(m: &Mat) -> Result<Vec<f64>> {
    ensure_finite(m, "singular values")?;
    let svd = SVD::try_new(m.clone(), false, false, 1e-15, 10_000).ok_or(Error::NoConvergence {
        solver: "singular value decomposition",
        iterations: 10_000,
        residual: f64::NAN,
    })?;
    Ok(svd.singular_values.iter().copied().collect())
}

/// Smallest of the `min(rows, cols)` singular values.
pub fn min_singular_value(m: &Mat) -> Result<f64> {
    Ok(singular_values(m)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// Spectral (operator 2-) norm.
pub fn spectral_norm(m: &Mat) -> Result<f64> {
    Ok(singular_values(m)?.into_iter().fold(0.0, f64::max))
}

/// Numerical rank with singular values below `rel_tol * σ_max` treated as zero.
pub fn rank(m: &Mat, rel_tol: f64) -> Result<usize> {
    let sv = singular_values(m)?;
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * top).count())
}

/// `Mᵀ(MMᵀ)⁻¹` for a matrix with full row rank.
pub fn pinv_full_row_rank(m: &Mat) -> Result<Mat> {
    pinv_full_row_rank_with(m, DEFAULT_MAX_GRAM_CONDITION)
}

/// As [`pinv_full_row_rank`] with an explicit cap on the condition number of `MMᵀ`.
pub fn pinv_full_row_rank_with(m: &Mat, max_gram_condition: f64) -> Result<Mat> {
    if m.nrows() > m.ncols() {
        return Err(Error::dim(
            "pinv_full_row_rank",
            format!("{}x{} has more rows than columns", m.nrows(), m.ncols()),
        ));
    }
    let gram_inv_m = gram_solve(m, &(m * m.transpose()), max_gram_condition, "pinv_full_row_rank")?;
    Ok(gram_inv_m.transpose())
}

/// `(MᵀM)⁻¹Mᵀ` for a matrix with full column rank.
pub fn left_inverse(m: &Mat) -> Result<Mat> {
    if m.nrows() < m.ncols() {
        return Err(Error::dim(
            "left_inverse",
            format!("{}x{} has fewer rows than columns", m.nrows(), m.ncols()),
        ));
    }
    let mt = m.transpose();
    gram_solve(&mt, &(&mt * m), DEFAULT_MAX_GRAM_CONDITION, "left_inverse")
}

// Solves gram · X = rhs after checking the conditioning of the Gram matrix.
fn gram_solve(rhs: &Mat, gram: &Mat, max_condition: f64, context: &'static str) -> Result<Mat> {
    let sv = singular_values(rhs)?;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if smin <= 1e-12 * smax.max(1.0) || (smax / smin).powi(2) > max_condition {
        return Err(Error::RankDeficient {
            context,
            sigma_min: smin,
        });
    }
    let chol = symmetrize(gram).cholesky().ok_or(Error::RankDeficient {
        context,
        sigma_min: smin,
    })?;
    Ok(chol.solve(rhs))
}

/// Symmetric PSD square root; negative eigenvalues (round-off) are clipped to zero.
pub fn psd_sqrt(m: &Mat) -> Result<Mat> {
    ensure_square(m, "psd_sqrt")?;
    ensure_finite(m, "psd_sqrt")?;
    let eig = symmetrize(m).symmetric_eigen();
    let d = Mat::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// True when `m` is symmetric to `tol` (relative) and its smallest eigenvalue
/// is at least `-tol·‖m‖` (PSD) or strictly positive (PD).
pub fn is_symmetric_psd(m: &Mat, tol: f64, strict: bool) -> bool {
    if !m.is_square() || m.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = m.norm().max(1e-300);
    if (m - m.transpose()).norm() > tol * scale {
        return false;
    }
    let lmin = symmetrize(m).symmetric_eigen().eigenvalues.min();
    if strict {
        lmin > 0.0
    } else {
        lmin >= -tol * scale
    }
}

/// Solves `X = Q + AᵀXA` for a Schur-stable `A`.
pub fn dlyap(a: &Mat, q: &Mat) -> Result<Mat> {
    check_lyapunov_inputs(a, q)?;
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::Unstable {
            context: "dlyap",
            rho,
        });
    }
    smith_doubling(a, q)
}

/// Solves `X = Q + AXAᵀ`; equal to `dlyap(Aᵀ, Q)`.
pub fn dlyap_cov(a: &Mat, q: &Mat) -> Result<Mat> {
    dlyap(&a.transpose(), q)
}

fn check_lyapunov_inputs(a: &Mat, q: &Mat) -> Result<()> {
    ensure_square(a, "dlyap: A")?;
    ensure_square(q, "dlyap: Q")?;
    if a.nrows() != q.nrows() {
        return Err(Error::dim(
            "dlyap",
            format!("A is {}x{}, Q is {}x{}", a.nrows(), a.ncols(), q.nrows(), q.ncols()),
        ));
    }
    ensure_finite(a, "dlyap: A")?;
    ensure_finite(q, "dlyap: Q")
}

/// Smith doubling for `X = Q + AᵀXA` without the up-front stability check.
/// Callers must already know `ρ(A) < 1`; divergence is still reported.
pub(crate) fn smith_doubling(a: &Mat, q: &Mat) -> Result<Mat> {
    let mut x = q.clone();
    let mut ak = a.clone();
    for it in 0..MAX_DOUBLINGS {
        let inc = ak.transpose() * &x * &ak;
        x += &inc;
        let step = inc.norm();
        let size = x.norm();
        if !size.is_finite() {
            return Err(Error::NoConvergence {
                solver: "Smith doubling",
                iterations: it + 1,
                residual: f64::INFINITY,
            });
        }
        if step <= DOUBLING_TOL * size || size == 0.0 {
            return Ok(symmetrize(&x));
        }
        ak = &ak * &ak;
    }
    let residual = (&x - q - a.transpose() * &x * a).norm();
    Err(Error::NoConvergence {
        solver: "Smith doubling",
        iterations: MAX_DOUBLINGS,
        residual,
    })
}

/// Frobenius residual of `P = Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA`.
pub fn dare_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> f64 {
    let bt_p = b.transpose() * p;
    let gain_rhs = &bt_p * a;
    let h = r + &bt_p * b;
    match h.clone().lu().solve(&gain_rhs) {
        Some(sol) => {
            let rhs = q + a.transpose() * p * a - a.transpose() * p * b * sol;
            (rhs - p).norm()
        }
        None => f64::INFINITY,
    }
}

/// State-feedback gain `K = −(R + BᵀPB)⁻¹BᵀPA`, the `u = Kx` convention used throughout.
pub fn riccati_gain(a: &Mat, b: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let bt_p = b.transpose() * p;
    let h = r + &bt_p * b;
    h.lu()
        .solve(&(&bt_p * a))
        .map(|k| -k)
        .ok_or_else(|| Error::InvalidInput("R + BᵀPB is singular".into()))
}

/// Stabilizing solution of the discrete algebraic Riccati equation.
pub fn dare(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<Mat> {
    ensure_square(a, "dare: A")?;
    let n = a.nrows();
    if b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::dim(
            "dare",
            format!(
                "A {}x{}, B {}x{}, Q {}x{}, R {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                q.nrows(),
                q.ncols(),
                r.nrows(),
                r.ncols()
            ),
        ));
    }
    for (m, name) in [(a, "dare: A"), (b, "dare: B"), (q, "dare: Q"), (r, "dare: R")] {
        ensure_finite(m, name)?;
    }
    if !is_symmetric_psd(r, 1e-12, true) {
        return Err(Error::InvalidInput("dare: R must be symmetric positive definite".into()));
    }
    let r_chol = symmetrize(r).cholesky().ok_or_else(|| {
        Error::InvalidInput("dare: R must be symmetric positive definite".into())
    })?;

    let mut p = structured_doubling(a, b, q, &r_chol.solve(&b.transpose()))?;
    let scale = |p: &Mat| p.norm().max(1e-300);
    let mut residual = dare_residual(a, b, q, r, &p);

    // Newton–Kleinman polishing from the doubling gain.
    let mut steps = 0;
    while residual > DARE_TOL * scale(&p) && steps < DARE_NK_STEPS {
        let k = riccati_gain(a, b, r, &p)?;
        let a_cl = a + b * &k;
        p = dlyap(&a_cl, &(q + k.transpose() * r * &k))?;
        residual = dare_residual(a, b, q, r, &p);
        steps += 1;
    }
    if residual > DARE_TOL * scale(&p) {
        return Err(Error::NoConvergence {
            solver: "dare",
            iterations: steps,
            residual,
        });
    }
    let k = riccati_gain(a, b, r, &p)?;
    let rho = spectral_radius(&(a + b * k))?;
    if rho >= 1.0 {
        return Err(Error::InvalidInput(format!(
            "dare: solution is not stabilizing (closed-loop spectral radius {rho}); \
             check stabilizability of (A, B) and detectability of (A, Q)"
        )));
    }
    Ok(p)
}

// SDA iteration for P = Q + AᵀP(I + GP)⁻¹A with G = BR⁻¹Bᵀ.
fn structured_doubling(a: &Mat, b: &Mat, q: &Mat, r_inv_bt: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let eye = Mat::identity(n, n);
    let mut ak = a.clone();
    let mut g = symmetrize(&(b * r_inv_bt));
    let mut h = symmetrize(q);
    for it in 0..MAX_DOUBLINGS {
        let lu = (&eye + &g * &h).lu();
        let w_inv_a = lu.solve(&ak).ok_or(Error::NoConvergence {
            solver: "structured doubling",
            iterations: it,
            residual: f64::NAN,
        })?;
        let w_inv_g = lu.solve(&g).expect("same factorization");
        let h_next = symmetrize(&(&h + ak.transpose() * &h * &w_inv_a));
        let g_next = symmetrize(&(&g + &ak * w_inv_g * ak.transpose()));
        let a_next = &ak * w_inv_a;
        let step = (&h_next - &h).norm();
        let size = h_next.norm();
        if !size.is_finite() {
            return Err(Error::NoConvergence {
                solver: "structured doubling",
                iterations: it + 1,
                residual: f64::INFINITY,
            });
        }
        h = h_next;
        g = g_next;
        ak = a_next;
        if step <= 1e-15 * size.max(1e-300) || ak.norm() < 1e-300 {
            break;
        }
    }
    Ok(h)
}
