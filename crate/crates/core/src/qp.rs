//! Dense strictly convex QP `min ½zᵀHz + fᵀz  s.t.  Az ≤ b` by the
//! Goldfarb–Idnani dual active-set method.

use crate::linalg::solve;
use crate::{Error, Mat, Result, Vector};

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: Vector,
    /// One multiplier per row of `A`, zero for inactive rows.
    pub multipliers: Vector,
    pub active: Vec<usize>,
    pub iterations: usize,
}

/// Solves the QP. `H` must be symmetric positive definite. Returns
/// [`Error::Infeasible`] when the dual becomes unbounded.
pub fn solve_qp(h: &Mat, f: &Vector, a: &Mat, b: &Vector) -> Result<QpSolution> {
    let n = h.nrows();
    if a.ncols() != n || a.nrows() != b.len() || f.len() != n {
        return Err(Error::dim("QP data"));
    }
    let chol = h.clone().cholesky().ok_or_else(|| Error::Singular("QP Hessian is not positive definite".into()))?;
    let hinv = chol.inverse();
    let mut x = -(&hinv * f);
    let rows = a.nrows();
    let norms: Vec<f64> = (0..rows).map(|k| a.row(k).norm()).collect();
    for k in 0..rows {
        if norms[k] == 0.0 && b[k] < 0.0 {
            return Err(Error::Infeasible(format!("row {k} reads 0 ≤ {}", b[k])));
        }
    }

    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_iter = 50 * (rows + n) + 100;
    let mut iterations = 0;

    loop {
        // Most violated row, measured in normalized distance.
        let scale = 1.0 + x.amax();
        let mut pick = None;
        let mut worst = 1e-12 * scale;
        for k in 0..rows {
            if norms[k] == 0.0 || active.contains(&k) {
                continue;
            }
            let viol = (a.row(k).dot(&x.transpose()) - b[k]) / norms[k];
            if viol > worst {
                worst = viol;
                pick = Some(k);
            }
        }
        let Some(p) = pick else { break };

        let np = -a.row(p).transpose();
        let mut u_plus = u.clone();
        u_plus.push(0.0);
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::NoConvergence {
                    solver: "dual active-set QP".into(),
                    iterations,
                    residual: worst,
                    history: Vec::new(),
                });
            }
            let q = active.len();
            let hn = &hinv * &np;
            let (z, r) = if q == 0 {
                (hn, Vector::zeros(0))
            } else {
                let nmat = Mat::from_fn(n, q, |i, j| -a[(active[j], i)]);
                let hinv_n = &hinv * &nmat;
                let gram = nmat.transpose() * &hinv_n;
                let r = solve(&gram, &Mat::from_column_slice(q, 1, (hinv_n.transpose() * &np).as_slice()), "active-set Gram matrix")?;
                let r = Vector::from_column_slice(r.as_slice());
                (hn - &hinv_n * &r, r)
            };
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for j in 0..q {
                if r[j] > 1e-14 {
                    let ratio = u_plus[j] / r[j];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(j);
                    }
                }
            }
            let slack = np.dot(&x) + b[p];
            let zn = z.dot(&np);
            let t2 = if z.norm() > 1e-12 * (&hinv * &np).norm() && zn > 0.0 { -slack / zn } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(Error::Infeasible(format!("row {p} cannot be satisfied together with the active rows")));
            }
            for j in 0..q {
                u_plus[j] -= t * r[j];
            }
            u_plus[q] += t;
            if t2.is_finite() {
                x += &z * t;
            }
            if t2 <= t1 {
                active.push(p);
                u = u_plus;
                break;
            }
            let l = drop_at.expect("finite partial step has a blocking constraint");
            active.remove(l);
            u_plus.remove(l);
        }
    }

    let mut multipliers = Vector::zeros(rows);
    for (k, &row) in active.iter().enumerate() {
        multipliers[row] = u[k].max(0.0);
    }
    Ok(QpSolution { z: x, multipliers, active, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_onto_halfspace() {
        let h = Mat::identity(2, 2);
        let f = -Vector::from_vec(vec![2.0, 2.0]);
        let a = Mat::from_row_slice(1, 2, &[1.0, 1.0]);
        let b = Vector::from_vec(vec![1.0]);
        let s = solve_qp(&h, &f, &a, &b).unwrap();
        assert!((s.z - Vector::from_vec(vec![0.5, 0.5])).norm() < 1e-14);
        assert!((s.multipliers[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn infeasible_pair() {
        let h = Mat::identity(1, 1);
        let f = Vector::zeros(1);
        let a = Mat::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = Vector::from_vec(vec![-1.0, -1.0]);
        assert!(matches!(solve_qp(&h, &f, &a, &b), Err(Error::Infeasible(_))));
    }
}
