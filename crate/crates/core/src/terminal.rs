//! Constraint-admissible invariant ellipsoids `{x : xᵀPx ≤ r}` for a stable
//! closed loop.

use nalgebra::SymmetricEigen;
use serde::Serialize;

use crate::game::ConstraintSpec;
use crate::linalg::{inverse, max_eig_sym, quad, vstack};
use crate::matrix_eq::solve_dlyap;
use crate::{Error, Mat, Result, Vector};

/// Slack on the level when deciding membership.
pub const MEMBERSHIP_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct TerminalSet {
    pub p_lyap: Mat,
    /// `None` when no constraint row limits the level.
    pub level: Option<f64>,
    pub closed_loop: Mat,
    pub gains: Vec<Mat>,
    /// Row normals `aⱼ` and bounds `gⱼ` the level was inscribed in.
    pub rows: Mat,
    pub bounds: Vector,
    pub binding_row: Option<usize>,
    /// `λ_max(ĀᵀPĀ − P)`.
    pub decrease_margin: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Membership {
    pub inside: bool,
    /// `max(0, ‖x‖_P − √r)`.
    pub distance: f64,
    pub euclidean_distance: f64,
}

/// State rows plus the input rows generated by `u = col(Kᵢ)x`.
fn admissibility_rows(spec: &ConstraintSpec, gains: &[Mat]) -> (Mat, Vector) {
    let n = spec.state.a.ncols();
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for j in 0..spec.state.rows() {
        rows.push((spec.state.a.row(j).iter().copied().collect(), spec.state.b[j]));
    }
    let mut push_nonzero = |row: Vec<f64>, bound: f64| {
        // A gain row that vanishes produces a constant input and never binds.
        if row.iter().any(|v| *v != 0.0) {
            rows.push((row, bound));
        }
    };
    for (k, bx) in gains.iter().zip(&spec.input_boxes) {
        for c in 0..k.nrows() {
            let kr: Vec<f64> = k.row(c).iter().copied().collect();
            if bx.upper[c].is_finite() {
                push_nonzero(kr.clone(), bx.upper[c]);
            }
            if bx.lower[c].is_finite() {
                push_nonzero(kr.iter().map(|v| -v).collect(), -bx.lower[c]);
            }
        }
    }
    if spec.coupling.rows() > 0 && !gains.is_empty() {
        let refs: Vec<&Mat> = gains.iter().collect();
        let gk = &spec.coupling.a * vstack(&refs);
        for j in 0..gk.nrows() {
            push_nonzero(gk.row(j).iter().copied().collect(), spec.coupling.b[j]);
        }
    }
    let a = Mat::from_fn(rows.len(), n, |r, c| rows[r].0[c]);
    let b = Vector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    (a, b)
}

/// `P = W + ĀᵀPĀ` (W = I unless given) and the largest level with
/// `{xᵀPx ≤ r}` inside every state and gain-generated input row.
pub fn compute_terminal_set(abar: &Mat, spec: &ConstraintSpec, gains: &[Mat], weight: Option<&Mat>) -> Result<TerminalSet> {
    let n = abar.nrows();
    let w = weight.cloned().unwrap_or_else(|| Mat::identity(n, n));
    let p = solve_dlyap(abar, &w)?;
    let p_inv = inverse(&p, "Lyapunov matrix")?;
    let (rows, bounds) = admissibility_rows(spec, gains);
    let mut level: Option<f64> = None;
    let mut binding_row = None;
    for j in 0..rows.nrows() {
        let a = rows.row(j).transpose();
        let denom = quad(&a, &p_inv);
        if denom <= 0.0 {
            return Err(Error::invalid("terminal set", format!("row {j} has a zero normal")));
        }
        let cand = bounds[j] * bounds[j] / denom;
        if bounds[j] <= 0.0 {
            return Err(Error::invalid("terminal set", format!("origin violates row {j}")));
        }
        if level.is_none_or(|l| cand < l) {
            level = Some(cand);
            binding_row = Some(j);
        }
    }
    let decrease_margin = max_eig_sym(&(abar.transpose() * &p * abar - &p));
    Ok(TerminalSet {
        p_lyap: p,
        level,
        closed_loop: abar.clone(),
        gains: gains.to_vec(),
        rows,
        bounds,
        binding_row,
        decrease_margin,
    })
}

impl TerminalSet {
    pub fn membership(&self, x: &Vector) -> Membership {
        let v = quad(x, &self.p_lyap);
        match self.level {
            None => Membership { inside: true, distance: 0.0, euclidean_distance: 0.0 },
            Some(r) => {
                let inside = v <= r + MEMBERSHIP_SLACK;
                let distance = (v.max(0.0).sqrt() - r.sqrt()).max(0.0);
                let euclidean_distance = if inside { 0.0 } else { self.euclidean_distance(x, r) };
                Membership { inside, distance, euclidean_distance }
            }
        }
    }

    /// Point of the boundary that touches row `j`.
    pub fn touching_point(&self, j: usize) -> Option<Vector> {
        let r = self.level?;
        let a = self.rows.row(j).transpose();
        let pa = inverse(&self.p_lyap, "Lyapunov matrix").ok()? * &a;
        let s = a.dot(&pa);
        Some(pa * (r / s).sqrt())
    }

    fn euclidean_distance(&self, x: &Vector, r: f64) -> f64 {
        if r <= 0.0 {
            return x.norm();
        }
        let eig = SymmetricEigen::new(self.p_lyap.clone());
        let xt = eig.eigenvectors.transpose() * x;
        let lam = &eig.eigenvalues;
        let excess = |nu: f64| -> f64 {
            (0..xt.len()).map(|k| lam[k] * (xt[k] / (1.0 + nu * lam[k])).powi(2)).sum::<f64>() - r
        };
        let mut hi = 1.0;
        while excess(hi) > 0.0 && hi < 1e300 {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if excess(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        let nu = hi;
        let zt = Vector::from_fn(xt.len(), |k, _| xt[k] / (1.0 + nu * lam[k]));
        (xt - zt).norm()
    }
}
