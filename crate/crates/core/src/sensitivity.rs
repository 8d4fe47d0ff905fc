//! Online estimate of the price-to-aggregate-load Jacobian.
//!
//! The state is `s = vec(H)` (columns stacked) under a random-walk model
//! `s⁺ = s + w_p`, measured through `Δl = (Δpᵀ ⊗ I) s + w_m`. With isotropic
//! noise and a covariance of the form `A ⊗ I`, the Kalman recursion stays in
//! that family, so the default representation keeps only the `n × n` factor
//! `A`. The full `n² × n²` covariance is kept for small `n` as a reference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{fleet_response, AgentMode, FleetError};
use crate::domain::{Bounds, FleetScenario, PriceVector};
use crate::linalg::{dot, LinalgError, Matrix};
use crate::Real;

/// Largest `n` for which the full covariance is allowed.
pub const FULL_MODE_MAX_N: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("innovation covariance is not positive ({0})")]
    NumericBreakdown(String),
    #[error("need at least two days of history, got {0}")]
    InsufficientData(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite measurement")]
    NonFinite,
    #[error("full covariance mode supports n <= {FULL_MODE_MAX_N}, got {0}")]
    FullModeTooLarge(usize),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "matrix")]
pub enum Covariance<T> {
    /// Full covariance of `vec(H)`, `n² × n²`.
    Full(Matrix<T>),
    /// Factor `A` with covariance `A ⊗ I`.
    Factored(Matrix<T>),
}

impl<T: Real> Covariance<T> {
    /// Smallest eigenvalue of the stored matrix.
    pub fn min_eigenvalue(&self) -> T {
        match self {
            Covariance::Full(m) | Covariance::Factored(m) => m.min_eigenvalue(),
        }
    }

    /// Expand to the full `n² × n²` covariance.
    pub fn to_full(&self, n: usize) -> Matrix<T> {
        match self {
            Covariance::Full(m) => m.clone(),
            Covariance::Factored(a) => Matrix::from_fn(n * n, n * n, |r, c| {
                let (jr, ir) = (r / n, r % n);
                let (jc, ic) = (c / n, c % n);
                if ir == ic {
                    a[(jr, jc)]
                } else {
                    T::zero()
                }
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    #[default]
    Factored,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEstimate<T> {
    /// Current Jacobian estimate, kW per unit price.
    pub h: Matrix<T>,
    pub covariance: Covariance<T>,
    /// Measurement noise variance (multiple of identity).
    pub sigma_m: T,
    /// Process noise variance (multiple of identity).
    pub sigma_p: T,
}

impl<T: Real> SensitivityEstimate<T> {
    /// Estimate with prior covariance `sigma0 · I`.
    pub fn new(h: Matrix<T>, sigma0: T, sigma_m: T, sigma_p: T, mode: CovarianceMode) -> Result<Self, SensitivityError> {
        if !h.is_square() {
            return Err(SensitivityError::Dimension(format!("H is {}x{}", h.rows(), h.cols())));
        }
        if !h.is_finite() {
            return Err(SensitivityError::NonFinite);
        }
        let n = h.rows();
        let covariance = match mode {
            CovarianceMode::Factored => Covariance::Factored(Matrix::scaled_identity(n, sigma0)),
            CovarianceMode::Full => {
                if n > FULL_MODE_MAX_N {
                    return Err(SensitivityError::FullModeTooLarge(n));
                }
                Covariance::Full(Matrix::scaled_identity(n * n, sigma0))
            }
        };
        Ok(Self {
            h,
            covariance,
            sigma_m,
            sigma_p,
        })
    }

    pub fn n(&self) -> usize {
        self.h.rows()
    }
}

/// One Kalman step with price change `dp` and load change `dl`.
///
/// A zero `dp` carries no information: the estimate is kept and only the
/// process noise is added.
pub fn kalman_update<T: Real>(est: &SensitivityEstimate<T>, dp: &[T], dl: &[T]) -> Result<SensitivityEstimate<T>, SensitivityError> {
    let n = est.n();
    if dp.len() != n || dl.len() != n {
        return Err(SensitivityError::Dimension(format!(
            "dp has {}, dl has {}, estimate has {n}",
            dp.len(),
            dl.len()
        )));
    }
    if dp.iter().chain(dl).any(|v| !v.is_finite()) {
        return Err(SensitivityError::NonFinite);
    }
    let informative = dp.iter().any(|&v| v != T::zero());
    let mut out = est.clone();
    match &est.covariance {
        Covariance::Factored(a) => {
            let mut a_next = a.clone();
            if informative {
                let a_dp = a.mul_vec(dp);
                let innov = est.sigma_m + dot(dp, &a_dp);
                if !(innov > T::zero()) {
                    return Err(SensitivityError::NumericBreakdown(format!("{innov}")));
                }
                let resid: Vec<T> = est.h.mul_vec(dp).iter().zip(dl).map(|(&hp, &l)| l - hp).collect();
                out.h.rank_one_update(T::one() / innov, &resid, &a_dp);
                a_next.rank_one_update(-T::one() / innov, &a_dp, &a_dp);
            }
            a_next.add_diagonal(est.sigma_p);
            out.covariance = Covariance::Factored(a_next);
        }
        Covariance::Full(sigma) => {
            let nn = n * n;
            // P = dpᵀ ⊗ I, so (P)_{i, j·n + i} = dp_j
            let p_mat = Matrix::from_fn(n, nn, |i, c| if c % n == i { dp[c / n] } else { T::zero() });
            let mut sigma_next = sigma.clone();
            if informative {
                let sigma_pt = sigma.matmul(&p_mat.transpose());
                let mut innov = p_mat.matmul(&sigma_pt);
                innov.add_diagonal(est.sigma_m);
                let chol = innov.cholesky().map_err(|e| SensitivityError::NumericBreakdown(e.to_string()))?;
                // K = Σ Pᵀ S⁻¹  (S symmetric, so K = (S⁻¹ P Σ)ᵀ)
                let k_t = chol.solve_matrix(&sigma_pt.transpose());
                let gain = k_t.transpose();
                let s = vec_cols(&est.h);
                let resid: Vec<T> = p_mat.mul_vec(&s).iter().zip(dl).map(|(&ps, &l)| l - ps).collect();
                let corr = gain.mul_vec(&resid);
                let s_next: Vec<T> = s.iter().zip(&corr).map(|(&a, &b)| a + b).collect();
                out.h = unvec_cols(&s_next, n);
                let kp = gain.matmul(&p_mat);
                let i_kp = Matrix::identity(nn).sub(&kp);
                sigma_next = i_kp.matmul(sigma);
            }
            sigma_next.add_diagonal(est.sigma_p);
            out.covariance = Covariance::Full(sigma_next);
        }
    }
    Ok(out)
}

fn vec_cols<T: Real>(h: &Matrix<T>) -> Vec<T> {
    let n = h.rows();
    (0..n * n).map(|k| h[(k % n, k / n)]).collect()
}

fn unvec_cols<T: Real>(s: &[T], n: usize) -> Matrix<T> {
    Matrix::from_fn(n, n, |i, j| s[j * n + i])
}

/// Least-squares Jacobian from day-over-day history:
/// `argmin_H ‖ΔL − ΔP Hᵀ‖²_F + ridge·‖H‖²_F`, rows of `ΔP`, `ΔL` being days.
///
/// `ridge = None` uses `1e-8 · trace(ΔPᵀΔP) / n` (floored at `1e-12`).
pub fn warm_start<T: Real>(dp_hist: &Matrix<T>, dl_hist: &Matrix<T>, ridge: Option<T>) -> Result<Matrix<T>, SensitivityError> {
    if dp_hist.rows() == 0 {
        return Err(SensitivityError::InsufficientData(dp_hist.rows() + 1));
    }
    if (dp_hist.rows(), dp_hist.cols()) != (dl_hist.rows(), dl_hist.cols()) {
        return Err(SensitivityError::Dimension(format!(
            "dp history {}x{}, dl history {}x{}",
            dp_hist.rows(),
            dp_hist.cols(),
            dl_hist.rows(),
            dl_hist.cols()
        )));
    }
    let n = dp_hist.cols();
    let mut gram = dp_hist.gram();
    let ridge = ridge.unwrap_or_else(|| (T::lit(1e-8) * gram.trace() / T::lit(n as f64)).max(T::lit(1e-12)));
    gram.add_diagonal(ridge);
    let rhs = dp_hist.transpose().matmul(dl_hist);
    let x = gram.cholesky()?.solve_matrix(&rhs);
    Ok(x.transpose())
}

/// Day-over-day price and aggregate-load differences.
#[derive(Debug, Clone, PartialEq)]
pub struct History<T> {
    pub dp: Matrix<T>,
    pub dl: Matrix<T>,
}

/// Simulate `days` days of `p_ref + ε`, `ε ~ N(0, σ²I)` clipped to the price
/// box, on the nominal fleet and record only aggregate differences.
pub fn collect_warmstart_history(
    scenario: &FleetScenario<f64>,
    p_ref: &PriceVector<f64>,
    bounds: &Bounds<f64>,
    sigma: f64,
    days: usize,
    seed: u64,
    mode: &AgentMode<f64>,
) -> Result<History<f64>, SensitivityError> {
    if days < 2 {
        return Err(SensitivityError::InsufficientData(days));
    }
    let n = scenario.steps();
    p_ref.check_len(n).map_err(|e| SensitivityError::Dimension(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| SensitivityError::Dimension(e.to_string()))?;
    let mut prices = Vec::with_capacity(days);
    let mut loads = Vec::with_capacity(days);
    for _ in 0..days {
        let p: Vec<f64> = p_ref
            .values()
            .iter()
            .map(|&v| {
                let eps = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                bounds.clamp_price(v + eps)
            })
            .collect();
        let l = fleet_response(&p, scenario, mode)?;
        prices.push(p);
        loads.push(l.into_inner());
    }
    let diff = |rows: &[Vec<f64>]| Matrix::from_fn(days - 1, n, |d, j| rows[d + 1][j] - rows[d][j]);
    Ok(History {
        dp: diff(&prices),
        dl: diff(&loads),
    })
}
