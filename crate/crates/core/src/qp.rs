//! Dense convex QP solver by operator splitting:
//!
//! ```text
//! minimize ½ xᵀPx + qᵀx   subject to   l ≤ Ax ≤ u
//! ```
//!
//! The iteration is the standard ADMM splitting on `(x, z = Ax)` with
//! over-relaxation, a per-row penalty vector, periodic penalty adaptation and
//! a final polishing pass that re-solves the KKT system on the guessed active
//! set. Infinite bounds are allowed. Rows of `A` are equilibrated internally.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{norm_inf, Cholesky, LinalgError, Matrix};
use crate::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("lower bound exceeds upper bound on row {0}")]
    InvertedBounds(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem<T> {
    pub p: Matrix<T>,
    pub q: Vec<T>,
    pub a: Matrix<T>,
    pub l: Vec<T>,
    pub u: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings<T> {
    pub eps_abs: T,
    pub eps_rel: T,
    pub max_iter: usize,
    pub rho: T,
    pub sigma: T,
    /// Over-relaxation parameter in (0, 2).
    pub relaxation: T,
    pub adapt_interval: usize,
    pub polish: bool,
}

impl<T: Real> Default for QpSettings<T> {
    fn default() -> Self {
        Self {
            eps_abs: T::lit(1e-9),
            eps_rel: T::lit(1e-9),
            max_iter: 20_000,
            rho: T::lit(0.1),
            sigma: T::lit(1e-6),
            relaxation: T::lit(1.6),
            adapt_interval: 25,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    /// Iteration cap hit; the best iterate seen is returned.
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution<T> {
    pub x: Vec<T>,
    /// Constraint multipliers; negative on active lower bounds, positive on
    /// active upper bounds.
    pub y: Vec<T>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: T,
    pub dual_residual: T,
    pub polished: bool,
}

struct Residuals<T> {
    prim: T,
    dual: T,
    prim_scale: T,
    dual_scale: T,
}

fn residuals<T: Real>(prob: &QpProblem<T>, x: &[T], z: &[T], y: &[T]) -> Residuals<T> {
    let ax = prob.a.mul_vec(x);
    let px = prob.p.mul_vec(x);
    let aty = prob.a.tr_mul_vec(y);
    let prim = ax.iter().zip(z).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
    let dual = (0..x.len()).fold(T::zero(), |m, i| m.max((px[i] + prob.q[i] + aty[i]).abs()));
    Residuals {
        prim,
        dual,
        prim_scale: norm_inf(&ax).max(norm_inf(z)),
        dual_scale: norm_inf(&px).max(norm_inf(&aty)).max(norm_inf(&prob.q)),
    }
}

fn clip<T: Real>(v: T, lo: T, hi: T) -> T {
    v.max(lo).min(hi)
}

impl<T: Real> QpProblem<T> {
    fn check(&self) -> Result<(), QpError> {
        let n = self.q.len();
        if !self.p.is_square() || self.p.rows() != n {
            return Err(QpError::Dimension(format!("P is {}x{}, q has {n}", self.p.rows(), self.p.cols())));
        }
        if self.a.cols() != n && self.a.rows() > 0 {
            return Err(QpError::Dimension(format!("A has {} columns, expected {n}", self.a.cols())));
        }
        let m = self.a.rows();
        if self.l.len() != m || self.u.len() != m {
            return Err(QpError::Dimension("bound vectors must match rows of A".into()));
        }
        if let Some(i) = (0..m).find(|&i| self.l[i] > self.u[i]) {
            return Err(QpError::InvertedBounds(i));
        }
        Ok(())
    }

    /// Max violation of `l ≤ Ax ≤ u`.
    pub fn constraint_violation(&self, x: &[T]) -> T {
        let ax = self.a.mul_vec(x);
        (0..ax.len()).fold(T::zero(), |m, i| m.max(self.l[i] - ax[i]).max(ax[i] - self.u[i]))
    }

    pub fn objective(&self, x: &[T]) -> T {
        let px = self.p.mul_vec(x);
        T::lit(0.5) * crate::linalg::dot(x, &px) + crate::linalg::dot(&self.q, x)
    }
}

pub fn solve_qp<T: Real>(prob: &QpProblem<T>, settings: &QpSettings<T>) -> Result<QpSolution<T>, QpError> {
    prob.check()?;
    let n = prob.q.len();
    let m = prob.a.rows();

    // row equilibration: Ã = E A with unit max-norm rows
    let mut e = vec![T::one(); m];
    for (i, ei) in e.iter_mut().enumerate() {
        let r = norm_inf(prob.a.row(i));
        if r > T::zero() {
            *ei = T::one() / r;
        }
    }
    let a_s = Matrix::from_fn(m, n, |i, j| prob.a[(i, j)] * e[i]);
    let l_s: Vec<T> = (0..m).map(|i| prob.l[i] * e[i]).collect();
    let u_s: Vec<T> = (0..m).map(|i| prob.u[i] * e[i]).collect();
    let scaled = QpProblem {
        p: prob.p.clone(),
        q: prob.q.clone(),
        a: a_s,
        l: l_s,
        u: u_s,
    };

    let rho_min = T::lit(1e-6);
    let rho_max = T::lit(1e6);
    let row_rho = |base: T, i: usize| -> T {
        let (lo, hi) = (scaled.l[i], scaled.u[i]);
        if lo == hi {
            (base * T::lit(1e3)).min(rho_max)
        } else if lo.is_infinite() && hi.is_infinite() {
            rho_min
        } else {
            base
        }
    };
    let mut rho = settings.rho;
    let mut rho_vec: Vec<T> = (0..m).map(|i| row_rho(rho, i)).collect();
    let factor = |rv: &[T]| -> Result<Cholesky<T>, QpError> {
        let mut k = scaled.p.clone();
        k.add_diagonal(settings.sigma);
        for i in 0..m {
            let row = scaled.a.row(i);
            for a in 0..n {
                if row[a] == T::zero() {
                    continue;
                }
                let f = rv[i] * row[a];
                for b in 0..n {
                    k[(a, b)] = k[(a, b)] + f * row[b];
                }
            }
        }
        Ok(k.cholesky()?)
    };
    let mut chol = factor(&rho_vec)?;

    let mut x = vec![T::zero(); n];
    let mut z: Vec<T> = (0..m).map(|i| clip(T::zero(), scaled.l[i], scaled.u[i])).collect();
    let mut y = vec![T::zero(); m];
    let alpha = settings.relaxation;

    let mut best: Option<(T, Vec<T>, Vec<T>, Vec<T>)> = None;
    let mut status = QpStatus::MaxIterations;
    let mut iterations = settings.max_iter;
    for iter in 1..=settings.max_iter {
        let mut rhs: Vec<T> = (0..n).map(|i| settings.sigma * x[i] - scaled.q[i]).collect();
        let w: Vec<T> = (0..m).map(|i| rho_vec[i] * z[i] - y[i]).collect();
        for (r, v) in rhs.iter_mut().zip(scaled.a.tr_mul_vec(&w)) {
            *r = *r + v;
        }
        let x_tilde = chol.solve(&rhs);
        let z_tilde = scaled.a.mul_vec(&x_tilde);
        for i in 0..n {
            x[i] = alpha * x_tilde[i] + (T::one() - alpha) * x[i];
        }
        for i in 0..m {
            let z_rel = alpha * z_tilde[i] + (T::one() - alpha) * z[i];
            let z_new = clip(z_rel + y[i] / rho_vec[i], scaled.l[i], scaled.u[i]);
            y[i] = y[i] + rho_vec[i] * (z_rel - z_new);
            z[i] = z_new;
        }

        let res = residuals(&scaled, &x, &z, &y);
        let eps_p = settings.eps_abs + settings.eps_rel * res.prim_scale;
        let eps_d = settings.eps_abs + settings.eps_rel * res.dual_scale;
        let merit = (res.prim / eps_p).max(res.dual / eps_d);
        if best.as_ref().is_none_or(|b| merit < b.0) {
            best = Some((merit, x.clone(), z.clone(), y.clone()));
        }
        if res.prim <= eps_p && res.dual <= eps_d {
            status = QpStatus::Solved;
            iterations = iter;
            break;
        }
        if settings.adapt_interval > 0 && iter % settings.adapt_interval == 0 {
            let tiny = T::lit(1e-30);
            let num = res.prim / res.prim_scale.max(tiny);
            let den = res.dual / res.dual_scale.max(tiny);
            let ratio = (num / den.max(tiny)).sqrt();
            if ratio.is_finite() && (ratio > T::lit(5.0) || ratio < T::lit(0.2)) {
                rho = (rho * ratio).max(rho_min).min(rho_max);
                rho_vec = (0..m).map(|i| row_rho(rho, i)).collect();
                chol = factor(&rho_vec)?;
            }
        }
    }
    if status == QpStatus::MaxIterations {
        let (_, bx, bz, by) = best.expect("at least one iteration");
        x = bx;
        z = bz;
        y = by;
    }

    let mut polished = false;
    if settings.polish {
        if let Some((px, py, sides)) = polish(&scaled, &x, &z, &y) {
            let before = residuals(&scaled, &x, &z, &y);
            let pz: Vec<T> = scaled.a.mul_vec(&px);
            let viol = scaled.constraint_violation(&px);
            let after = residuals(&scaled, &px, &pz, &py);
            let tol = T::lit(1e-9) * T::one().max(norm_inf(&py));
            let ok_sign = sides.iter().all(|&(row, side)| match side {
                Side::Lower => py[row] <= tol,
                Side::Upper => py[row] >= -tol,
                Side::Equal => true,
            });
            let feas_tol = settings.eps_abs + settings.eps_rel * after.prim_scale;
            if ok_sign && viol <= feas_tol && after.dual <= before.dual.max(settings.eps_abs) {
                x = px;
                z = (0..m).map(|i| clip(pz[i], scaled.l[i], scaled.u[i])).collect();
                y = py;
                polished = true;
                status = QpStatus::Solved;
            }
        }
    }

    let res = residuals(&scaled, &x, &z, &y);
    Ok(QpSolution {
        x,
        y: (0..m).map(|i| y[i] * e[i]).collect(),
        status,
        iterations,
        primal_residual: res.prim,
        dual_residual: res.dual,
        polished,
    })
}

/// Solve the equality-constrained KKT system on the active set implied by
/// `(z, y)`, with small regularisation and iterative refinement.
#[derive(Clone, Copy)]
enum Side {
    Lower,
    Upper,
    Equal,
}

type Polished<T> = (Vec<T>, Vec<T>, Vec<(usize, Side)>);

fn polish<T: Real>(prob: &QpProblem<T>, x: &[T], z: &[T], y: &[T]) -> Option<Polished<T>> {
    let n = x.len();
    let m = z.len();
    let mut active = Vec::new();
    let mut target = Vec::new();
    let mut sides = Vec::new();
    for i in 0..m {
        let (lo, hi) = (prob.l[i], prob.u[i]);
        let side = if lo == hi {
            Side::Equal
        } else if lo.is_finite() && z[i] - lo < -y[i] {
            Side::Lower
        } else if hi.is_finite() && hi - z[i] < y[i] {
            Side::Upper
        } else {
            continue;
        };
        active.push(i);
        target.push(if matches!(side, Side::Upper) { hi } else { lo });
        sides.push((i, side));
    }
    let k = active.len();
    let dim = n + k;
    let delta = T::lit(1e-9);
    let build = |reg: T| {
        let mut kkt = Matrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = prob.p[(i, j)];
            }
            kkt[(i, i)] = kkt[(i, i)] + reg;
        }
        for (r, &row) in active.iter().enumerate() {
            for j in 0..n {
                let a = prob.a[(row, j)];
                kkt[(n + r, j)] = a;
                kkt[(j, n + r)] = a;
            }
            kkt[(n + r, n + r)] = -reg;
        }
        kkt
    };
    let exact = build(T::zero());
    let regularised = build(delta);
    let mut rhs: Vec<T> = prob.q.iter().map(|&v| -v).collect();
    rhs.extend_from_slice(&target);
    let mut sol = regularised.solve(&rhs).ok()?;
    for _ in 0..5 {
        let r: Vec<T> = exact.mul_vec(&sol).iter().zip(&rhs).map(|(&a, &b)| b - a).collect();
        let corr = regularised.solve(&r).ok()?;
        for (s, c) in sol.iter_mut().zip(corr) {
            *s = *s + c;
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let px = sol[..n].to_vec();
    let mut py = vec![T::zero(); m];
    for (r, &row) in active.iter().enumerate() {
        py[row] = sol[n + r];
    }
    Some((px, py, sides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_qp(diag: f64, lin: [f64; 2]) -> QpProblem<f64> {
        QpProblem {
            p: Matrix::scaled_identity(2, diag),
            q: lin.to_vec(),
            a: Matrix::identity(2),
            l: vec![0.0, 0.0],
            u: vec![1.0, 1.0],
        }
    }

    #[test]
    fn solves_box_qp_exactly() {
        // minimize 2x² + 2y² − x − y on [0,1]² → x = y = 0.25
        let sol = solve_qp(&box_qp(4.0, [-1.0, -1.0]), &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        for &v in &sol.x {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn active_bound_has_signed_multiplier() {
        // minimize ½x² − 3x on [0,1] → x = 1 with y = 2 on the upper bound
        let prob = QpProblem {
            p: Matrix::<f64>::identity(1),
            q: vec![-3.0],
            a: Matrix::identity(1),
            l: vec![0.0],
            u: vec![1.0],
        };
        let sol = solve_qp(&prob, &QpSettings::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-10);
        assert!((sol.y[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn handles_equality_and_infinite_rows() {
        // minimize ½‖x‖² s.t. x0 + x1 = 1, x0 − x1 ≤ +∞
        let prob = QpProblem {
            p: Matrix::identity(2),
            q: vec![0.0, 0.0],
            a: Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
            l: vec![1.0, f64::NEG_INFINITY],
            u: vec![1.0, f64::INFINITY],
        };
        let sol = solve_qp(&prob, &QpSettings::default()).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-9 && (sol.x[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn rejects_inverted_bounds() {
        let mut prob = box_qp(1.0, [0.0, 0.0]);
        prob.l[1] = 2.0;
        assert_eq!(solve_qp(&prob, &QpSettings::default()), Err(QpError::InvertedBounds(1)));
    }

    #[test]
    fn iteration_cap_returns_best_iterate() {
        let settings = QpSettings {
            max_iter: 1,
            polish: false,
            ..QpSettings::default()
        };
        let sol = solve_qp(&box_qp(4.0, [-1.0, -1.0]), &settings).unwrap();
        assert_eq!(sol.status, QpStatus::MaxIterations);
        assert!(sol.x.iter().all(|v| v.is_finite()));
    }
}
