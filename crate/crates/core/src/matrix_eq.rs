//! Stein, Sylvester-type, Lyapunov and discrete Riccati solvers plus the
//! spectral helpers the equilibrium code leans on.

use nalgebra::{DMatrix, Schur};
use num_complex::Complex64;
use serde::Serialize;

use crate::linalg::{complex_rank, inverse, psd_sqrt, symmetrize, to_complex};
use crate::{Error, Mat, Result};

/// Margin used for every "is Schur" decision.
pub const EPS_SCHUR: f64 = 1e-9;
/// Relative rank tolerance of the Hautus tests.
pub const HAUTUS_RANK_TOL: f64 = 1e-8;

type CMat = DMatrix<Complex64>;

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    /// (re, im) pairs sorted by modulus descending, then angle ascending.
    pub eigenvalues: Vec<(f64, f64)>,
    pub spectral_radius: f64,
    pub is_schur: bool,
}

pub fn eigenvalues(m: &Mat) -> Result<Vec<Complex64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(format!("spectrum of non-square {}x{} matrix", m.nrows(), m.ncols())));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigensolver);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 100_000).ok_or(Error::Eigensolver)?;
    let mut ev: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| {
        b.norm()
            .total_cmp(&a.norm())
            .then_with(|| a.arg().total_cmp(&b.arg()))
    });
    Ok(ev)
}

pub fn spectrum(m: &Mat) -> Result<SpectralReport> {
    let ev = eigenvalues(m)?;
    let spectral_radius = ev.first().map_or(0.0, |l| l.norm());
    Ok(SpectralReport {
        eigenvalues: ev.iter().map(|l| (l.re, l.im)).collect(),
        spectral_radius,
        is_schur: spectral_radius < 1.0 - EPS_SCHUR,
    })
}

pub fn spectral_radius(m: &Mat) -> Result<f64> {
    Ok(spectrum(m)?.spectral_radius)
}

pub fn ensure_schur(m: &Mat, context: &str) -> Result<()> {
    let rep = spectrum(m)?;
    if rep.is_schur {
        Ok(())
    } else {
        Err(Error::NotSchur {
            context: context.to_string(),
            radius: rep.spectral_radius,
        })
    }
}

fn complex_schur(m: &Mat) -> Result<(CMat, CMat)> {
    let s = Schur::try_new(to_complex(m), f64::EPSILON, 100_000).ok_or(Error::Eigensolver)?;
    Ok(s.unpack())
}

/// Factored form of the operator `X ↦ X − MᵀXN`, reusable across right-hand sides.
pub struct SteinOperator {
    m: Mat,
    n: Mat,
    u: CMat,
    t1: CMat,
    v: CMat,
    t2: CMat,
}

impl SteinOperator {
    pub fn new(m: &Mat, n: &Mat) -> Result<Self> {
        if !m.is_square() || !n.is_square() {
            return Err(Error::dim("Stein operator needs square factors"));
        }
        let (u, t1) = complex_schur(&m.transpose())?;
        let (v, t2) = complex_schur(n)?;
        for i in 0..t1.nrows() {
            for j in 0..t2.nrows() {
                let (a, b) = (t1[(i, i)], t2[(j, j)]);
                if (Complex64::new(1.0, 0.0) - a * b).norm() < 1e-12 {
                    return Err(Error::Resonance { lhs: a.norm(), rhs: b.norm() });
                }
            }
        }
        Ok(Self { m: m.clone(), n: n.clone(), u, t1, v, t2 })
    }

    fn apply_once(&self, c: &Mat) -> Mat {
        let (p, q) = (self.t1.nrows(), self.t2.nrows());
        let ct = self.u.adjoint() * to_complex(c) * &self.v;
        let mut y = CMat::zeros(p, q);
        // z.row(k) = y.row(k) * T2, cached for the rows already solved.
        let mut z = CMat::zeros(p, q);
        for i in (0..p).rev() {
            let mut rhs: Vec<Complex64> = (0..q).map(|j| ct[(i, j)]).collect();
            for k in (i + 1)..p {
                let t = self.t1[(i, k)];
                if t != Complex64::new(0.0, 0.0) {
                    for (j, r) in rhs.iter_mut().enumerate() {
                        *r += t * z[(k, j)];
                    }
                }
            }
            let tii = self.t1[(i, i)];
            for j in 0..q {
                let mut s = rhs[j];
                for l in 0..j {
                    s += tii * y[(i, l)] * self.t2[(l, j)];
                }
                y[(i, j)] = s / (Complex64::new(1.0, 0.0) - tii * self.t2[(j, j)]);
            }
            for j in 0..q {
                let mut s = Complex64::new(0.0, 0.0);
                for l in 0..=j {
                    s += y[(i, l)] * self.t2[(l, j)];
                }
                z[(i, j)] = s;
            }
        }
        (&self.u * y * self.v.adjoint()).map(|c| c.re)
    }

    /// Solves `X = MᵀXN + C` with one step of iterative refinement.
    pub fn solve(&self, c: &Mat) -> Result<Mat> {
        if c.nrows() != self.m.nrows() || c.ncols() != self.n.nrows() {
            return Err(Error::dim(format!(
                "Stein right-hand side is {}x{}, expected {}x{}",
                c.nrows(),
                c.ncols(),
                self.m.nrows(),
                self.n.nrows()
            )));
        }
        let x0 = self.apply_once(c);
        let r = c + self.m.transpose() * &x0 * &self.n - &x0;
        let x = x0 + self.apply_once(&r);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("Stein equation".into()));
        }
        Ok(x)
    }

    pub fn residual(&self, x: &Mat, c: &Mat) -> f64 {
        (x - self.m.transpose() * x * &self.n - c).norm()
    }
}

/// `X = MᵀXN + C`.
pub fn solve_sylvester_stein(m: &Mat, n: &Mat, c: &Mat) -> Result<Mat> {
    SteinOperator::new(m, n)?.solve(c)
}

/// `P = Q + AᵀP·Abar`.
pub fn solve_stein(a: &Mat, abar: &Mat, q: &Mat) -> Result<Mat> {
    solve_sylvester_stein(a, abar, q)
}

/// `P = Q + AbarᵀP·Abar` for Schur `Abar`.
pub fn solve_dlyap(abar: &Mat, q: &Mat) -> Result<Mat> {
    ensure_schur(abar, "Lyapunov equation")?;
    Ok(symmetrize(&solve_sylvester_stein(abar, abar, q)?))
}

pub fn stein_residual(a: &Mat, abar: &Mat, q: &Mat, p: &Mat) -> f64 {
    (p - q - a.transpose() * p * abar).norm()
}

/// Hautus test: rank [A − λI, B] = n for every eigenvalue with |λ| ≥ 1.
pub fn is_stabilizable(a: &Mat, b: &Mat) -> Result<bool> {
    let n = a.nrows();
    let ac = to_complex(a);
    let bc = to_complex(b);
    for lam in eigenvalues(a)? {
        if lam.norm() < 1.0 - EPS_SCHUR {
            continue;
        }
        let mut test = CMat::zeros(n, n + b.ncols());
        test.view_mut((0, 0), (n, n)).copy_from(&(&ac - CMat::identity(n, n) * lam));
        test.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
        if complex_rank(&test, HAUTUS_RANK_TOL) < n {
            return Ok(false);
        }
    }
    Ok(true)
}

/// (A, C) detectable, with `C` any square root of `Q`.
pub fn is_detectable(a: &Mat, q: &Mat) -> Result<bool> {
    let c = psd_sqrt(q);
    is_stabilizable(&a.transpose(), &c.transpose())
}

pub fn lqr_gain(a: &Mat, b: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let s = r + b.transpose() * p * b;
    Ok(-crate::linalg::solve(&s, &(b.transpose() * p * a), "LQR gain")?)
}

pub fn dare_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Result<f64> {
    let k = lqr_gain(a, b, r, p)?;
    Ok((p - q - a.transpose() * p * (a + b * k)).norm())
}

/// Stabilizing solution of `P = Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA` and the gain
/// `K = −(R + BᵀPB)⁻¹BᵀPA`.
pub fn solve_dare(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<(Mat, Mat)> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::dim("Riccati data"));
    }
    if !is_stabilizable(a, b)? {
        return Err(Error::Assumption("(A, B) is not stabilizable".into()));
    }
    if !is_detectable(a, q)? {
        return Err(Error::Assumption("(A, Q^(1/2)) is not detectable".into()));
    }

    // Structure-preserving doubling.
    let eye = Mat::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * inverse(r, "R")? * b.transpose();
    let mut hk = q.clone();
    let mut converged = false;
    let mut history = Vec::new();
    for _ in 0..100 {
        let w = &eye + &gk * &hk;
        let w_inv_a = crate::linalg::solve(&w, &ak, "doubling step")?;
        let w_inv_g = crate::linalg::solve(&w, &gk, "doubling step")?;
        let h_next = &hk + ak.transpose() * &hk * &w_inv_a;
        let g_next = &gk + &ak * w_inv_g * ak.transpose();
        let a_next = &ak * w_inv_a;
        let change = (&h_next - &hk).norm() / (1.0 + h_next.norm());
        history.push(change);
        hk = symmetrize(&h_next);
        gk = symmetrize(&g_next);
        ak = a_next;
        if change < 1e-15 || ak.norm() < 1e-300 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            solver: "doubling Riccati solver".into(),
            iterations: history.len(),
            residual: history.last().copied().unwrap_or(f64::NAN),
            history,
        });
    }

    // One policy-evaluation sweep cleans up rounding left by the doubling.
    let k = lqr_gain(a, b, r, &hk)?;
    let acl = a + b * &k;
    let p = solve_dlyap(&acl, &(q + k.transpose() * r * &k))?;
    let k = lqr_gain(a, b, r, &p)?;
    ensure_schur(&(a + b * &k), "LQR closed loop")?;
    Ok((p, k))
}
