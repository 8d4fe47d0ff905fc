//! Operator side of the loop: objective and gradient, event mask, step sizes
//! and the linearized projected price update.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Bounds, DomainError, LoadProfile, PriceVector};
use crate::linalg::Matrix;
use crate::qp::{solve_qp, QpError, QpProblem, QpSettings, QpStatus};
use crate::Real;

/// Quadratic weight on the load-constraint slack when the linearized load
/// bounds exclude the current point.
pub const SLACK_WEIGHT: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid controller config: {0}")]
    Config(String),
    #[error("price outside bounds at step {0}")]
    PriceOutOfBounds(usize),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveMode {
    /// Exact daily peak with a first-index subgradient.
    #[default]
    Max,
    /// `log Σ exp(τ l_t)`, unnormalized.
    Lse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationPenalty {
    /// `b·Δcost²`
    #[default]
    Squared,
    /// `b·|Δcost|`
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum StepSchedule<T> {
    Constant { alpha: T },
    /// `α₀/(t+1)`
    Decaying { alpha0: T },
}

pub fn step_size<T: Real>(schedule: &StepSchedule<T>, t: usize) -> T {
    match *schedule {
        StepSchedule::Constant { alpha } => alpha,
        StepSchedule::Decaying { alpha0 } => alpha0 / T::lit((t + 1) as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct DsoConfig<T> {
    pub b: T,
    pub bounds: Bounds<T>,
    pub step: StepSchedule<T>,
    /// Excitation standard deviation.
    pub sigma_u: T,
    /// LSE temperature.
    pub tau: T,
    pub objective: ObjectiveMode,
    pub deviation: DeviationPenalty,
    pub mask_enabled: bool,
    pub mask_threshold: T,
    pub qp_tol: T,
    pub qp_max_iter: usize,
}

impl<T: Real> Default for DsoConfig<T> {
    fn default() -> Self {
        let bounds = Bounds::default();
        Self {
            b: T::lit(0.0002),
            bounds,
            step: StepSchedule::Constant { alpha: T::lit(5e-5) },
            sigma_u: T::lit(1e-3) * (bounds.p_max() - bounds.p_min()),
            tau: T::lit(10.0),
            objective: ObjectiveMode::Max,
            deviation: DeviationPenalty::Squared,
            mask_enabled: true,
            mask_threshold: T::zero(),
            qp_tol: T::lit(1e-9),
            qp_max_iter: 20_000,
        }
    }
}

impl<T: Real> DsoConfig<T> {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::Config(m.into()));
        if !(self.b >= T::zero()) {
            return bad("b must be nonnegative");
        }
        let a = match self.step {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::Decaying { alpha0 } => alpha0,
        };
        if !(a > T::zero()) || !a.is_finite() {
            return bad("step size must be positive");
        }
        if self.objective == ObjectiveMode::Lse && !(self.tau > T::zero()) {
            return bad("tau must be positive in lse mode");
        }
        if !(self.sigma_u >= T::zero()) {
            return bad("sigma_u must be nonnegative");
        }
        if !(self.mask_threshold >= T::zero()) {
            return bad("mask_threshold must be nonnegative");
        }
        if !(self.qp_tol > T::zero()) || self.qp_max_iter == 0 {
            return bad("qp_tol and qp_max_iter must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue<T> {
    pub value: T,
    pub peak_term: T,
    /// Weighted deviation term, `b·Δcost²` or `b·|Δcost|`.
    pub deviation_term: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradient<T> {
    pub grad_p: Vec<T>,
    pub grad_l: Vec<T>,
}

fn check_lengths<T: Real>(p: &[T], l: &[T], p_ref: &[T]) -> Result<(), ControllerError> {
    if p.len() != l.len() || p_ref.len() != l.len() {
        return Err(ControllerError::Dimension(format!(
            "price {}, load {}, reference {}",
            p.len(),
            l.len(),
            p_ref.len()
        )));
    }
    Ok(())
}

fn cost_deviation<T: Real>(p: &[T], l: &[T], p_ref: &[T]) -> T {
    p.iter().zip(p_ref).zip(l).map(|((&a, &r), &x)| (a - r) * x).sum()
}

/// `log Σ exp(τ l_t)` with the max shifted out.
pub fn log_sum_exp<T: Real>(l: &[T], tau: T) -> T {
    let m = l.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let s: T = l.iter().map(|&v| (tau * (v - m)).exp()).sum();
    tau * m + s.ln()
}

pub fn dso_objective<T: Real>(
    p: &PriceVector<T>,
    l_agg: &LoadProfile<T>,
    config: &DsoConfig<T>,
    p_ref: &PriceVector<T>,
) -> Result<ObjectiveValue<T>, ControllerError> {
    let (p, l, r) = (p.values(), l_agg.values(), p_ref.values());
    check_lengths(p, l, r)?;
    let peak_term = match config.objective {
        ObjectiveMode::Max => l_agg.max(),
        ObjectiveMode::Lse => log_sum_exp(l, config.tau),
    };
    let dc = cost_deviation(p, l, r);
    let deviation_term = match config.deviation {
        DeviationPenalty::Squared => config.b * dc * dc,
        DeviationPenalty::Absolute => config.b * dc.abs(),
    };
    Ok(ObjectiveValue {
        value: peak_term + deviation_term,
        peak_term,
        deviation_term,
    })
}

/// Partial gradients of the objective in price and in load.
pub fn dso_gradient<T: Real>(
    p: &PriceVector<T>,
    l_agg: &LoadProfile<T>,
    config: &DsoConfig<T>,
    p_ref: &PriceVector<T>,
) -> Result<ObjectiveGradient<T>, ControllerError> {
    let (pv, l, r) = (p.values(), l_agg.values(), p_ref.values());
    check_lengths(pv, l, r)?;
    let n = l.len();
    let mut grad_l = vec![T::zero(); n];
    match config.objective {
        ObjectiveMode::Max => grad_l[l_agg.argmax()] = T::one(),
        ObjectiveMode::Lse => {
            let m = l_agg.max();
            let e: Vec<T> = l.iter().map(|&v| (config.tau * (v - m)).exp()).collect();
            let s: T = e.iter().copied().sum();
            for (g, ei) in grad_l.iter_mut().zip(e) {
                *g = config.tau * ei / s;
            }
        }
    }
    let dc = cost_deviation(pv, l, r);
    let coef = match config.deviation {
        DeviationPenalty::Squared => T::lit(2.0) * config.b * dc,
        DeviationPenalty::Absolute => {
            if dc > T::zero() {
                config.b
            } else if dc < T::zero() {
                -config.b
            } else {
                T::zero()
            }
        }
    };
    for j in 0..n {
        grad_l[j] = grad_l[j] + coef * (pv[j] - r[j]);
    }
    let grad_p = l.iter().map(|&v| coef * v).collect();
    Ok(ObjectiveGradient { grad_p, grad_l })
}

/// `mask_t = l_t > threshold`.
pub fn event_mask<T: Real>(l_agg: &LoadProfile<T>, threshold: T) -> Vec<bool> {
    l_agg.values().iter().map(|&v| v > threshold).collect()
}

/// `N(0, σ²I)` draw of length `n`.
pub fn sample_excitation<T: Real, R: Rng + ?Sized>(n: usize, sigma: T, rng: &mut R) -> Vec<T>
where
    StandardNormal: Distribution<T>,
{
    (0..n).map(|_| sigma * StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LopFlag {
    /// Linearized load bounds excluded the current point; slack was used.
    LoadConstraintSoftened,
    /// Inner QP hit its iteration cap; best iterate used.
    QpNoConvergence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LopOutcome<T> {
    /// Projected direction.
    pub w: Vec<T>,
    pub p_next: PriceVector<T>,
    pub flags: Vec<LopFlag>,
    pub qp_iterations: usize,
    pub primal_residual: T,
    pub dual_residual: T,
}

/// One linearized projected step.
///
/// Solves `min ‖w − w*‖²`, `w* = −(∇_p + Hᵀ∇_l)`, subject to
/// `p_min ≤ p + αw ≤ p_max` and `0 ≤ l + αHw ≤ l_max`, then returns
/// `Π[p + α(mask∘w) + excitation]`. The QP is posed in `Δ = αw`.
#[allow(clippy::too_many_arguments)]
pub fn lop_step<T: Real>(
    p: &PriceVector<T>,
    l_agg: &LoadProfile<T>,
    h: &Matrix<T>,
    grad: &ObjectiveGradient<T>,
    config: &DsoConfig<T>,
    mask: &[bool],
    alpha: T,
    excitation: &[T],
) -> Result<LopOutcome<T>, ControllerError> {
    let n = p.len();
    let (pv, l) = (p.values(), l_agg.values());
    if l.len() != n
        || h.rows() != n
        || h.cols() != n
        || grad.grad_p.len() != n
        || grad.grad_l.len() != n
        || mask.len() != n
        || excitation.len() != n
    {
        return Err(ControllerError::Dimension(format!("lop_step inputs must all have length {n}")));
    }
    if !h.is_finite() {
        return Err(ControllerError::Dimension("sensitivity matrix is not finite".into()));
    }
    if !(alpha > T::zero()) {
        return Err(ControllerError::Config("step size must be positive".into()));
    }
    let bounds = &config.bounds;
    if let Some(i) = (0..n).find(|&i| pv[i] < bounds.p_min() || pv[i] > bounds.p_max()) {
        return Err(ControllerError::PriceOutOfBounds(i));
    }

    let ht_gl = h.tr_mul_vec(&grad.grad_l);
    let target: Vec<T> = (0..n).map(|j| -alpha * (grad.grad_p[j] + ht_gl[j])).collect();
    let soften = l.iter().any(|&v| v < T::zero() || v > bounds.l_max());
    let nv = if soften { 2 * n } else { n };

    let two = T::lit(2.0);
    let p_mat = Matrix::from_fn(nv, nv, |i, j| match (i == j, i < n) {
        (true, true) => two,
        (true, false) => two * T::lit(SLACK_WEIGHT),
        _ => T::zero(),
    });
    let mut q = vec![T::zero(); nv];
    for j in 0..n {
        q[j] = -two * target[j];
    }
    // rows 0..n: price box, rows n..2n: linearized load
    let a = Matrix::from_fn(2 * n, nv, |i, j| {
        if i < n {
            if i == j {
                T::one()
            } else {
                T::zero()
            }
        } else if j < n {
            h[(i - n, j)]
        } else if j - n == i - n {
            -T::one()
        } else {
            T::zero()
        }
    });
    let mut lo = Vec::with_capacity(2 * n);
    let mut hi = Vec::with_capacity(2 * n);
    for j in 0..n {
        lo.push(bounds.p_min() - pv[j]);
        hi.push(bounds.p_max() - pv[j]);
    }
    for j in 0..n {
        lo.push(-l[j]);
        hi.push(bounds.l_max() - l[j]);
    }
    let prob = QpProblem {
        p: p_mat,
        q,
        a,
        l: lo,
        u: hi,
    };
    let settings = QpSettings {
        eps_abs: config.qp_tol,
        eps_rel: config.qp_tol,
        max_iter: config.qp_max_iter,
        ..QpSettings::default()
    };
    let sol = solve_qp(&prob, &settings)?;

    let mut flags = Vec::new();
    if soften {
        flags.push(LopFlag::LoadConstraintSoftened);
    }
    if sol.status == QpStatus::MaxIterations {
        flags.push(LopFlag::QpNoConvergence);
    }
    // the box rows are hard; clip away solver tolerance
    let delta: Vec<T> = (0..n).map(|j| sol.x[j].max(prob.l[j]).min(prob.u[j])).collect();
    let w: Vec<T> = delta.iter().map(|&d| d / alpha).collect();
    let stepped: Vec<T> = (0..n)
        .map(|j| {
            let d = if mask[j] { delta[j] } else { T::zero() };
            pv[j] + d + excitation[j]
        })
        .collect();
    let p_next = PriceVector::new(bounds.project(&stepped))?;
    Ok(LopOutcome {
        w,
        p_next,
        flags,
        qp_iterations: sol.iterations,
        primal_residual: sol.primal_residual,
        dual_residual: sol.dual_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> PriceVector<f64> {
        PriceVector::new(v.to_vec()).unwrap()
    }

    fn lp(v: &[f64]) -> LoadProfile<f64> {
        LoadProfile::new(v.to_vec()).unwrap()
    }

    #[test]
    fn constant_load_at_reference_has_zero_deviation() {
        let cfg = DsoConfig::<f64>::default();
        let p = pv(&[0.2, 0.3, 0.1]);
        let v = dso_objective(&p, &lp(&[4.0; 3]), &cfg, &p).unwrap();
        assert_eq!((v.value, v.peak_term, v.deviation_term), (4.0, 4.0, 0.0));
        assert_eq!(cfg.b, 0.0002);
    }

    #[test]
    fn lse_value_and_bracket() {
        let cfg = DsoConfig {
            objective: ObjectiveMode::Lse,
            ..DsoConfig::<f64>::default()
        };
        let p = pv(&[0.1; 3]);
        let v = dso_objective(&p, &lp(&[1.0, 0.0, 0.0]), &cfg, &p).unwrap();
        let expected = (10f64.exp() + 2.0).ln();
        assert!((v.value - expected).abs() < 1e-12);
        assert!((v.value - 10.000091).abs() < 1e-6);
        assert!(v.value >= 10.0 && v.value <= 10.0 + 3f64.ln());
        // large loads must not overflow
        let big = dso_objective(&p, &lp(&[1e4, 0.0, 1e4]), &cfg, &p).unwrap();
        assert!((big.value - (1e5 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn zero_weight_leaves_only_the_peak_subgradient() {
        let cfg = DsoConfig {
            b: 0.0,
            ..DsoConfig::<f64>::default()
        };
        let g = dso_gradient(&pv(&[0.3, 0.5]), &lp(&[1.0, 3.0]), &cfg, &pv(&[0.1, 0.1])).unwrap();
        assert_eq!(g.grad_p, vec![0.0, 0.0]);
        assert_eq!(g.grad_l, vec![0.0, 1.0]);
        let tie = dso_gradient(&pv(&[0.3, 0.5]), &lp(&[5.0, 5.0]), &cfg, &pv(&[0.1, 0.1])).unwrap();
        assert_eq!(tie.grad_l, vec![1.0, 0.0]);
    }

    #[test]
    fn lse_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = DsoConfig {
            objective: ObjectiveMode::Lse,
            b: 0.05,
            ..DsoConfig::<f64>::default()
        };
        let n = 12;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
        let l: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let g = dso_gradient(&pv(&p), &lp(&l), &cfg, &pv(&r)).unwrap();
        let f = |p: &[f64], l: &[f64]| dso_objective(&pv(p), &lp(l), &cfg, &pv(&r)).unwrap().value;
        let h = 1e-6;
        for j in 0..n {
            let (mut a, mut b) = (l.clone(), l.clone());
            a[j] += h;
            b[j] -= h;
            let fd = (f(&p, &a) - f(&p, &b)) / (2.0 * h);
            assert!((fd - g.grad_l[j]).abs() <= 1e-6 * fd.abs().max(1.0), "l {j}: {fd} vs {}", g.grad_l[j]);
            let (mut a, mut b) = (p.clone(), p.clone());
            a[j] += h;
            b[j] -= h;
            let fd = (f(&a, &l) - f(&b, &l)) / (2.0 * h);
            assert!((fd - g.grad_p[j]).abs() <= 1e-6 * fd.abs().max(1.0), "p {j}: {fd} vs {}", g.grad_p[j]);
        }
    }

    #[test]
    fn deviation_gradient_uses_price_difference() {
        let cfg = DsoConfig {
            b: 0.5,
            ..DsoConfig::<f64>::default()
        };
        let p = pv(&[0.3, 0.1]);
        let g = dso_gradient(&p, &lp(&[2.0, 1.0]), &cfg, &p).unwrap();
        // zero deviation at the reference: only the peak subgradient survives
        assert_eq!(g.grad_l, vec![1.0, 0.0]);
        let g = dso_gradient(&pv(&[0.4, 0.1]), &lp(&[2.0, 1.0]), &cfg, &p).unwrap();
        // Δcost = 0.2, coef = 2·0.5·0.2
        assert!((g.grad_l[0] - (1.0 + 0.2 * 0.1)).abs() < 1e-15);
        assert!(g.grad_l[1].abs() < 1e-15);
        assert!((g.grad_p[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn step_schedules() {
        let c = StepSchedule::Constant { alpha: 5e-5 };
        assert_eq!(step_size(&c, 0), 5e-5);
        assert_eq!(step_size(&c, 1000), 5e-5);
        let d = StepSchedule::Decaying { alpha0: 1.0_f64 };
        assert_eq!(step_size(&d, 0), 1.0);
        assert!((step_size(&d, 9) - 0.1).abs() < 1e-15);
        let s: f64 = (0..1_000_000).map(|t| step_size(&d, t).powi(2)).sum();
        assert!(s < std::f64::consts::PI.powi(2) / 6.0);
    }

    #[test]
    fn mask_marks_positive_load() {
        assert_eq!(event_mask(&lp(&[0.0; 4]), 0.0), vec![false; 4]);
        let mut l = vec![0.0; 96];
        for v in &mut l[24..72] {
            *v = 3.0;
        }
        let m = event_mask(&lp(&l), 0.0);
        assert!(m.iter().enumerate().all(|(i, &b)| b == (24..72).contains(&i)));
    }

    fn one_d(p: f64, l: f64, h: f64, w_ideal: f64, l_max: f64) -> LopOutcome<f64> {
        let cfg = DsoConfig {
            bounds: Bounds::new(0.001, 1.0, l_max).unwrap(),
            ..DsoConfig::<f64>::default()
        };
        // grad_l = 0, grad_p = −w_ideal
        let grad = ObjectiveGradient {
            grad_p: vec![-w_ideal],
            grad_l: vec![0.0],
        };
        lop_step(&pv(&[p]), &lp(&[l]), &Matrix::from_rows(&[vec![h]]).unwrap(), &grad, &cfg, &[true], 0.01, &[0.0]).unwrap()
    }

    #[test]
    fn stationary_input_gives_zero_step() {
        let out = one_d(0.4, 10.0, -50.0, 0.0, 750.0);
        assert!(out.w[0].abs() < 1e-9);
        assert_eq!(out.p_next.values(), &[0.4]);
    }

    #[test]
    fn price_box_blocks_upward_step() {
        let out = one_d(1.0, 10.0, -50.0, 3.0, 750.0);
        assert!(out.w[0].abs() < 1e-9);
        assert_eq!(out.p_next.values(), &[1.0]);
    }

    #[test]
    fn load_cap_blocks_price_cut() {
        let out = one_d(0.4, 750.0, -50.0, -2.0, 750.0);
        assert!(out.w[0].abs() < 1e-9, "{:?}", out.w);
        let out = one_d(0.4, 750.0, -50.0, 2.0, 750.0);
        assert!((out.w[0] - 2.0).abs() < 1e-9);
        assert!(out.flags.is_empty());
    }

    #[test]
    fn overloaded_point_is_softened_and_stays_in_box() {
        let out = one_d(0.4, 800.0, -50.0, -2.0, 750.0);
        assert!(out.flags.contains(&LopFlag::LoadConstraintSoftened));
        assert!(out.p_next.values()[0] >= 0.001 && out.p_next.values()[0] <= 1.0);
    }

    #[test]
    fn masked_steps_are_fixed_points() {
        let cfg = DsoConfig::<f64>::default();
        let grad = ObjectiveGradient {
            grad_p: vec![1.0, -1.0, 0.5],
            grad_l: vec![0.0; 3],
        };
        let p = pv(&[0.2, 0.3, 0.4]);
        let out = lop_step(&p, &lp(&[1.0, 0.0, 1.0]), &Matrix::zeros(3, 3), &grad, &cfg, &[true, false, true], 0.01, &[0.0; 3])
            .unwrap();
        assert_eq!(out.p_next.values()[1], 0.3);
        assert!(out.p_next.values()[0] < 0.2);
    }

    #[test]
    fn excitation_is_projected() {
        let cfg = DsoConfig::<f64>::default();
        let grad = ObjectiveGradient {
            grad_p: vec![0.0; 2],
            grad_l: vec![0.0; 2],
        };
        let out = lop_step(&pv(&[0.5, 0.999]), &lp(&[1.0, 1.0]), &Matrix::zeros(2, 2), &grad, &cfg, &[true; 2], 0.01, &[0.1, 0.1])
            .unwrap();
        assert!((out.p_next.values()[0] - 0.6).abs() < 1e-12);
        assert_eq!(out.p_next.values()[1], 1.0);
    }

    #[test]
    fn excitation_sampler_is_seeded() {
        let a: Vec<f64> = sample_excitation(5, 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        let b: Vec<f64> = sample_excitation(5, 0.1, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        let z: Vec<f64> = sample_excitation(5, 0.0, &mut ChaCha8Rng::seed_from_u64(4));
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(DsoConfig::<f64>::default().validate().is_ok());
        let bad = DsoConfig {
            b: -1.0,
            ..DsoConfig::<f64>::default()
        };
        assert!(bad.validate().is_err());
        let bad = DsoConfig {
            step: StepSchedule::Constant { alpha: 0.0 },
            ..DsoConfig::<f64>::default()
        };
        assert!(bad.validate().is_err());
        let cfg: DsoConfig<f64> = serde_json::from_str(r#"{"b":0.001,"objective":"lse"}"#).unwrap();
        assert_eq!(cfg.objective, ObjectiveMode::Lse);
        assert!(serde_json::from_str::<DsoConfig<f64>>(r#"{"bogus":1}"#).is_err());
    }
}
