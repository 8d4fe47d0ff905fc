//! Per-vehicle charging response and fleet aggregation.
//!
//! Each EV minimises `pᵀl + 0.01·lᵀl` subject to `cᵀl = d` and
//! `0 ≤ l ≤ l_max`. Stationarity on the window reads
//! `p_j + 0.02·l_j + λ + γ_j − μ_j = 0`, so for a fixed equality multiplier
//! `λ` the load is a clipped affine function of the price and the problem
//! reduces to a scalar root find on the monotone map `λ ↦ Σ_j l_j(λ)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{EvSession, FleetScenario, LoadProfile};
use crate::linalg::Matrix;
use crate::Real;

/// Half-quadratic weight of the charging objective.
pub const QUAD_WEIGHT: f64 = 0.01;
/// `∂/∂l` of the quadratic term: `2 × QUAD_WEIGHT`.
pub const STATIONARITY_COEF: f64 = 0.02;
/// Entries within this distance of a bound count as clipped.
pub const ACTIVE_TOL: f64 = 1e-9;

const BISECTION_MAX_ITER: usize = 300;
const BISECTION_REL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("infeasible session: demand {demand} exceeds window capacity {capacity}")]
    InfeasibleSession { demand: f64, capacity: f64 },
    #[error("non-finite price input")]
    NonFiniteInput,
    #[error("price has {price} steps but session has {session}")]
    Length { price: usize, session: usize },
    #[error("penalty solve did not converge in {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },
    #[error("penalty weights must be positive")]
    InvalidPenalty,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("session {index}: {source}")]
pub struct FleetError {
    pub index: usize,
    #[source]
    pub source: AgentError,
}

/// Primal-dual solution of one charging problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSolution<T> {
    pub load: LoadProfile<T>,
    /// Multiplier of `cᵀl = d`.
    pub eq_dual: T,
    /// Multipliers of `l ≥ 0`.
    pub lower_duals: Vec<T>,
    /// Multipliers of `l ≤ l_max`.
    pub upper_duals: Vec<T>,
}

/// Largest absolute violation of each KKT block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals<T> {
    pub bounds: T,
    pub demand: T,
    pub stationarity: T,
    pub complementarity: T,
    pub dual_sign: T,
}

impl<T: Real> KktResiduals<T> {
    pub fn max(&self) -> T {
        self.bounds
            .max(self.demand)
            .max(self.stationarity)
            .max(self.complementarity)
            .max(self.dual_sign)
    }
}

impl<T: Real> AgentSolution<T> {
    pub fn kkt_residuals(&self, price: &[T], session: &EvSession<T>) -> KktResiduals<T> {
        let k = T::lit(STATIONARITY_COEF);
        let l = self.load.values();
        let cap = session.power_cap();
        let mut r = KktResiduals {
            bounds: T::zero(),
            demand: T::zero(),
            stationarity: T::zero(),
            complementarity: T::zero(),
            dual_sign: T::zero(),
        };
        let mut delivered = T::zero();
        for (j, &avail) in session.availability().iter().enumerate() {
            let (mu, gamma) = (self.lower_duals[j], self.upper_duals[j]);
            r.bounds = r.bounds.max(-l[j]).max(l[j] - cap[j]);
            r.dual_sign = r.dual_sign.max(-mu).max(-gamma);
            r.complementarity = r.complementarity.max((mu * l[j]).abs()).max((gamma * (cap[j] - l[j])).abs());
            if avail {
                delivered = delivered + l[j];
                let st = price[j] + k * l[j] + self.eq_dual - mu + gamma;
                r.stationarity = r.stationarity.max(st.abs());
            } else {
                r.bounds = r.bounds.max(l[j].abs());
            }
        }
        r.demand = (delivered - session.demand()).abs();
        r
    }
}

fn check_inputs<T: Real>(price: &[T], session: &EvSession<T>) -> Result<(), AgentError> {
    if price.len() != session.len() {
        return Err(AgentError::Length {
            price: price.len(),
            session: session.len(),
        });
    }
    if price.iter().any(|v| !v.is_finite()) {
        return Err(AgentError::NonFiniteInput);
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Clip {
    Lower,
    Free,
    Upper,
}

/// Exact minimiser of the charging problem, with duals.
pub fn solve_ev_exact<T: Real>(price: &[T], session: &EvSession<T>) -> Result<AgentSolution<T>, AgentError> {
    check_inputs(price, session)?;
    let n = session.len();
    let d = session.demand();
    let capacity = session.window_capacity();
    let window = session.window();
    let caps: Vec<T> = window.iter().map(|&j| session.power_cap()[j]).collect();
    let prices: Vec<T> = window.iter().map(|&j| price[j]).collect();
    let tol = T::lit(BISECTION_REL_TOL) * T::one().max(d);
    if d > capacity + tol || (window.is_empty() && d > T::zero()) {
        return Err(AgentError::InfeasibleSession {
            demand: d.to_f64().unwrap_or(f64::NAN),
            capacity: capacity.to_f64().unwrap_or(f64::NAN),
        });
    }
    let mut load = vec![T::zero(); n];
    let mut lower = vec![T::zero(); n];
    let mut upper = vec![T::zero(); n];
    if window.is_empty() {
        return Ok(AgentSolution {
            load: LoadProfile::new(load).expect("zero load"),
            eq_dual: T::zero(),
            lower_duals: lower,
            upper_duals: upper,
        });
    }

    let k = T::lit(STATIONARITY_COEF);
    let at = |lam: T| -> Vec<T> {
        prices
            .iter()
            .zip(&caps)
            .map(|(&p, &c)| ((-p - lam) / k).max(T::zero()).min(c))
            .collect()
    };
    let total = |lam: T| -> T { at(lam).into_iter().sum() };

    // every load is at its cap below `lo` and zero above `hi`
    let p_max = prices.iter().copied().fold(T::neg_infinity(), T::max);
    let p_min = prices.iter().copied().fold(T::infinity(), T::min);
    let cap_max = caps.iter().copied().fold(T::zero(), T::max);
    let mut lo = -p_max - k * cap_max - T::one();
    let mut hi = -p_min + T::one();
    let mut s_lo = total(lo);
    let mut s_hi = total(hi);
    debug_assert!(s_lo >= capacity - tol && s_hi == T::zero());
    let mut lam = T::lit(0.5) * (lo + hi);
    for _ in 0..BISECTION_MAX_ITER {
        lam = T::lit(0.5) * (lo + hi);
        let s = total(lam);
        debug_assert!(s_lo + tol >= s && s + tol >= s_hi, "demand map must be nonincreasing in the multiplier");
        if (s - d).abs() <= tol {
            break;
        }
        if s > d {
            lo = lam;
            s_lo = s;
        } else {
            hi = lam;
            s_hi = s;
        }
        if hi - lo <= T::epsilon() * T::one().max(lo.abs().max(hi.abs())) {
            break;
        }
    }

    // Snap to the active set found by bisection and recompute the multiplier
    // in closed form so the demand constraint holds to rounding error.
    let classify = |l: &[T]| -> Vec<Clip> {
        l.iter()
            .zip(&caps)
            .map(|(&v, &c)| {
                if v <= T::zero() {
                    Clip::Lower
                } else if v >= c {
                    Clip::Upper
                } else {
                    Clip::Free
                }
            })
            .collect()
    };
    let mut clips = classify(&at(lam));
    for _ in 0..8 {
        let free: Vec<usize> = (0..clips.len()).filter(|&i| clips[i] == Clip::Free).collect();
        if free.is_empty() {
            // multiplier is only pinned to an interval; stay inside it
            let mut lb = T::neg_infinity();
            let mut ub = T::infinity();
            for (i, c) in clips.iter().enumerate() {
                match c {
                    Clip::Lower => lb = lb.max(-prices[i]),
                    Clip::Upper => ub = ub.min(-prices[i] - k * caps[i]),
                    Clip::Free => {}
                }
            }
            if lb <= ub {
                lam = lam.max(lb).min(ub);
            }
            break;
        }
        let at_cap: T = (0..clips.len()).filter(|&i| clips[i] == Clip::Upper).map(|i| caps[i]).sum();
        let p_free: T = free.iter().map(|&i| prices[i]).sum();
        let cand = (-p_free - k * (d - at_cap)) / T::lit(free.len() as f64);
        let next = classify(&at(cand));
        lam = cand;
        if next == clips {
            break;
        }
        clips = next;
    }

    for (i, &j) in window.iter().enumerate() {
        load[j] = match clips[i] {
            Clip::Lower => T::zero(),
            Clip::Upper => caps[i],
            Clip::Free => ((-prices[i] - lam) / k).max(T::zero()).min(caps[i]),
        };
    }
    // hand the rounding remainder of the demand to the last free entry
    if let Some(i) = (0..clips.len()).rev().find(|&i| clips[i] == Clip::Free) {
        let j = window[i];
        let others: T = window.iter().filter(|&&m| m != j).map(|&m| load[m]).sum();
        let rest = d - others;
        if rest >= T::zero() && rest <= caps[i] && (rest - load[j]).abs() <= tol {
            load[j] = rest;
        }
    }
    for (i, &j) in window.iter().enumerate() {
        let l = load[j];
        let r = prices[i] + k * l + lam;
        if caps[i] <= T::zero() {
            lower[j] = r.max(T::zero());
            upper[j] = (-r).max(T::zero());
        } else {
            match clips[i] {
                Clip::Lower => lower[j] = r.max(T::zero()),
                Clip::Upper => upper[j] = (-r).max(T::zero()),
                Clip::Free => {}
            }
        }
    }
    Ok(AgentSolution {
        load: LoadProfile::new(load).expect("finite load"),
        eq_dual: lam,
        lower_duals: lower,
        upper_duals: upper,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyOptions<T> {
    pub rho_eq: T,
    pub rho_ineq: T,
    /// Stop when the gradient's max-norm falls below this.
    pub tol: T,
    #[serde(default = "default_penalty_iter")]
    pub max_iter: usize,
}

fn default_penalty_iter() -> usize {
    100_000
}

impl<T: Real> PenaltyOptions<T> {
    pub fn new(rho_eq: T, rho_ineq: T, tol: T) -> Self {
        Self {
            rho_eq,
            rho_ineq,
            tol,
            max_iter: default_penalty_iter(),
        }
    }
}

/// Approximate minimiser of the smooth-penalty charging problem
/// `pᵀl + 0.01·lᵀl + ρ_eq(cᵀl − d)² + ρ_ineq(‖(−l)₊‖² + ‖(l − l_max)₊‖²)`.
///
/// Off-window caps are taken as zero. The objective is piecewise quadratic,
/// so the search direction is the generalized Newton step (diagonal plus a
/// rank-one term, inverted by Sherman–Morrison) under Armijo backtracking.
pub fn solve_ev_penalty<T: Real>(
    price: &[T],
    session: &EvSession<T>,
    opts: &PenaltyOptions<T>,
) -> Result<LoadProfile<T>, AgentError> {
    check_inputs(price, session)?;
    if !(opts.rho_eq > T::zero() && opts.rho_ineq > T::zero()) {
        return Err(AgentError::InvalidPenalty);
    }
    let n = session.len();
    let two = T::lit(2.0);
    let k = T::lit(STATIONARITY_COEF);
    let q = T::lit(QUAD_WEIGHT);
    let c: Vec<T> = session.availability().iter().map(|&a| if a { T::one() } else { T::zero() }).collect();
    let cap: Vec<T> = session
        .availability()
        .iter()
        .zip(session.power_cap())
        .map(|(&a, &v)| if a { v } else { T::zero() })
        .collect();
    let d = session.demand();
    let (re, ri) = (opts.rho_eq, opts.rho_ineq);

    let objective = |l: &[T]| -> T {
        let mut f = T::zero();
        let mut cl = T::zero();
        for j in 0..n {
            f = f + price[j] * l[j] + q * l[j] * l[j];
            let below = (-l[j]).max(T::zero());
            let above = (l[j] - cap[j]).max(T::zero());
            f = f + ri * (below * below + above * above);
            cl = cl + c[j] * l[j];
        }
        f + re * (cl - d) * (cl - d)
    };
    let gradient = |l: &[T]| -> Vec<T> {
        let resid = crate::linalg::dot(&c, l) - d;
        (0..n)
            .map(|j| {
                let viol = l[j].min(T::zero()) + (l[j] - cap[j]).max(T::zero());
                price[j] + k * l[j] + two * re * resid * c[j] + two * ri * viol
            })
            .collect()
    };

    let mut l = vec![T::zero(); n];
    let mut f = objective(&l);
    for iter in 0..opts.max_iter {
        let g = gradient(&l);
        let gnorm = crate::linalg::norm_inf(&g);
        if gnorm < opts.tol {
            return Ok(LoadProfile::new(l).expect("finite load"));
        }
        // generalized Hessian D + 2ρ_eq c cᵀ
        let diag: Vec<T> = (0..n)
            .map(|j| {
                let active = l[j] < T::zero() || l[j] > cap[j];
                k + if active { two * ri } else { T::zero() }
            })
            .collect();
        let dinv_g: Vec<T> = g.iter().zip(&diag).map(|(&a, &b)| a / b).collect();
        let dinv_c: Vec<T> = c.iter().zip(&diag).map(|(&a, &b)| a / b).collect();
        let denom = T::one() + two * re * crate::linalg::dot(&c, &dinv_c);
        let coef = two * re * crate::linalg::dot(&c, &dinv_g) / denom;
        let dir: Vec<T> = dinv_g.iter().zip(&dinv_c).map(|(&a, &b)| -(a - coef * b)).collect();
        let slope = crate::linalg::dot(&g, &dir);
        let mut t = T::one();
        let mut accepted = false;
        while t > T::lit(1e-20) {
            let trial: Vec<T> = l.iter().zip(&dir).map(|(&a, &b)| a + t * b).collect();
            let ft = objective(&trial);
            if ft <= f + T::lit(1e-4) * t * slope {
                l = trial;
                f = ft;
                accepted = true;
                break;
            }
            t = t * T::lit(0.5);
        }
        if !accepted {
            return Err(AgentError::NoConvergence {
                iterations: iter,
                grad_norm: gnorm.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    let gnorm = crate::linalg::norm_inf(&gradient(&l));
    if gnorm < opts.tol {
        return Ok(LoadProfile::new(l).expect("finite load"));
    }
    Err(AgentError::NoConvergence {
        iterations: opts.max_iter,
        grad_norm: gnorm.to_f64().unwrap_or(f64::NAN),
    })
}

/// Lower-level model used to generate the fleet response.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub enum AgentMode<T> {
    #[default]
    Exact,
    Penalty(PenaltyOptions<T>),
}

fn solve_load<T: Real>(price: &[T], session: &EvSession<T>, mode: &AgentMode<T>) -> Result<LoadProfile<T>, AgentError> {
    match mode {
        AgentMode::Exact => solve_ev_exact(price, session).map(|s| s.load),
        AgentMode::Penalty(opts) => solve_ev_penalty(price, session, opts),
    }
}

fn sum_in_order<T: Real>(n: usize, parts: Vec<Result<Vec<T>, FleetError>>) -> Result<Vec<T>, FleetError> {
    let mut acc = vec![T::zero(); n];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part?) {
            *a = *a + v;
        }
    }
    Ok(acc)
}

/// Aggregate load of the fleet at `price`. Sessions are solved in parallel
/// and summed in index order.
pub fn fleet_response<T: Real>(
    price: &[T],
    scenario: &FleetScenario<T>,
    mode: &AgentMode<T>,
) -> Result<LoadProfile<T>, FleetError> {
    let n = scenario.steps();
    let parts: Vec<Result<Vec<T>, FleetError>> = scenario
        .sessions
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            solve_load(price, s, mode)
                .map(LoadProfile::into_inner)
                .map_err(|source| FleetError { index, source })
        })
        .collect();
    Ok(LoadProfile::new(sum_in_order(n, parts)?).expect("finite aggregate"))
}

/// Per-session local sensitivity: free set and whether any entry sits on a
/// bound with a vanishing multiplier.
struct SessionSensitivity<T> {
    load: Vec<T>,
    free: Vec<usize>,
    degenerate: bool,
}

fn session_sensitivity<T: Real>(price: &[T], session: &EvSession<T>) -> Result<SessionSensitivity<T>, AgentError> {
    let sol = solve_ev_exact(price, session)?;
    let tol = T::lit(ACTIVE_TOL);
    let cap = session.power_cap();
    let l = sol.load.values();
    let mut free = Vec::new();
    let mut degenerate = false;
    for j in session.window() {
        let near_lower = l[j] <= tol;
        let near_upper = l[j] >= cap[j] - tol;
        if near_lower || near_upper {
            let mult = if near_lower { sol.lower_duals[j] } else { sol.upper_duals[j] };
            if mult <= tol {
                degenerate = true;
            }
        } else {
            free.push(j);
        }
    }
    Ok(SessionSensitivity {
        load: sol.load.into_inner(),
        free,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetJacobian<T> {
    /// `∂l_agg/∂p`, row = load step, column = price step.
    pub matrix: Matrix<T>,
    /// Sessions with a weakly active bound; their contribution is one-sided.
    pub degenerate_sessions: Vec<usize>,
}

impl<T> FleetJacobian<T> {
    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_sessions.is_empty()
    }
}

/// Exact `∂l_agg/∂p` by implicit differentiation of the exact solver.
///
/// On a session's free set `F` the response is `−(1/0.02)(I − 𝟙𝟙ᵀ/|F|)`;
/// clipped entries do not respond.
pub fn fleet_jacobian<T: Real>(price: &[T], scenario: &FleetScenario<T>) -> Result<FleetJacobian<T>, FleetError> {
    let n = scenario.steps();
    let parts: Vec<Result<SessionSensitivity<T>, FleetError>> = scenario
        .sessions
        .par_iter()
        .enumerate()
        .map(|(index, s)| session_sensitivity(price, s).map_err(|source| FleetError { index, source }))
        .collect();
    let inv_k = T::one() / T::lit(STATIONARITY_COEF);
    let mut matrix = Matrix::zeros(n, n);
    let mut degenerate_sessions = Vec::new();
    for (idx, part) in parts.into_iter().enumerate() {
        let sens = part?;
        if sens.degenerate {
            degenerate_sessions.push(idx);
        }
        if sens.free.is_empty() {
            continue;
        }
        let share = T::one() / T::lit(sens.free.len() as f64);
        for &a in &sens.free {
            for &b in &sens.free {
                let delta = if a == b { T::one() } else { T::zero() };
                matrix[(a, b)] = matrix[(a, b)] - inv_k * (delta - share);
            }
        }
    }
    Ok(FleetJacobian {
        matrix,
        degenerate_sessions,
    })
}

/// Aggregate load together with `Jᵀg` for the fleet Jacobian `J`, without
/// forming `J`. The session blocks are symmetric, so this is also `Jg`.
pub fn fleet_vjp<T: Real>(
    price: &[T],
    scenario: &FleetScenario<T>,
    g: &[T],
) -> Result<(LoadProfile<T>, Vec<T>, bool), FleetError> {
    let n = scenario.steps();
    let inv_k = T::one() / T::lit(STATIONARITY_COEF);
    let parts: Vec<Result<(Vec<T>, Vec<T>, bool), FleetError>> = scenario
        .sessions
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let sens = session_sensitivity(price, s).map_err(|source| FleetError { index, source })?;
            let mut jg = vec![T::zero(); n];
            if !sens.free.is_empty() {
                let mean = sens.free.iter().map(|&j| g[j]).sum::<T>() / T::lit(sens.free.len() as f64);
                for &j in &sens.free {
                    jg[j] = -inv_k * (g[j] - mean);
                }
            }
            Ok((sens.load, jg, sens.degenerate))
        })
        .collect();
    let mut load = vec![T::zero(); n];
    let mut prod = vec![T::zero(); n];
    let mut degenerate = false;
    for part in parts {
        let (l, jg, deg) = part?;
        degenerate |= deg;
        for j in 0..n {
            load[j] = load[j] + l[j];
            prod[j] = prod[j] + jg[j];
        }
    }
    Ok((LoadProfile::new(load).expect("finite aggregate"), prod, degenerate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{DemandNoise, TimeGrid};
    use proptest::prelude::*;

    fn session(avail: &[u8], demand: f64, caps: &[f64]) -> EvSession<f64> {
        EvSession::new(avail.iter().map(|&a| a == 1).collect(), demand, caps.to_vec()).unwrap()
    }

    #[test]
    fn single_step_window_takes_all_demand() {
        let s = session(&[0, 1, 0, 0], 5.0, &[0.0, 10.0, 0.0, 0.0]);
        let sol = solve_ev_exact(&[0.3, 0.7, 0.1, 0.2], &s).unwrap();
        assert_eq!(sol.load.values(), &[0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_price_splits_equally() {
        let s = session(&[1, 1, 1, 1], 8.0, &[10.0; 4]);
        let sol = solve_ev_exact(&[0.2; 4], &s).unwrap();
        for &v in sol.load.values() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_step_example_hits_cap_and_duals() {
        let s = session(&[1, 1], 10.0, &[8.0, 8.0]);
        let sol = solve_ev_exact(&[0.1, 0.3], &s).unwrap();
        let l = sol.load.values();
        assert!((l[0] - 8.0).abs() < 1e-12 && (l[1] - 2.0).abs() < 1e-12);
        assert!((sol.eq_dual + 0.34).abs() < 1e-12);
        assert!((sol.upper_duals[0] - 0.08).abs() < 1e-12);
        assert_eq!(sol.upper_duals[1], 0.0);
        assert!(sol.kkt_residuals(&[0.1, 0.3], &s).max() < 1e-12);
    }

    #[test]
    fn infeasible_and_non_finite_inputs_error() {
        let s = session(&[1, 1], 10.0, &[4.0, 4.0]);
        assert!(matches!(solve_ev_exact(&[0.1, 0.1], &s), Err(AgentError::InfeasibleSession { .. })));
        let ok = session(&[1, 1], 1.0, &[4.0, 4.0]);
        assert_eq!(solve_ev_exact(&[f64::NAN, 0.1], &ok), Err(AgentError::NonFiniteInput));
        assert!(matches!(solve_ev_exact(&[0.1], &ok), Err(AgentError::Length { .. })));
    }

    #[test]
    fn negative_prices_expand_the_bracket() {
        let s = session(&[1, 1, 1], 1.0, &[50.0; 3]);
        let p = [-20.0, -20.5, -19.0];
        let sol = solve_ev_exact(&p, &s).unwrap();
        assert!(sol.kkt_residuals(&p, &s).max() < 1e-9);
    }

    #[test]
    fn zero_demand_gives_zero_load_with_valid_duals() {
        let s = session(&[1, 1, 1], 0.0, &[5.0; 3]);
        let p = [0.2, 0.1, 0.4];
        let sol = solve_ev_exact(&p, &s).unwrap();
        assert!(sol.load.values().iter().all(|&v| v == 0.0));
        assert!(sol.kkt_residuals(&p, &s).max() < 1e-12);
    }

    #[test]
    fn exact_solver_runs_in_single_precision() {
        let s = EvSession::new(vec![true, true], 10.0f32, vec![8.0, 8.0]).unwrap();
        let sol = solve_ev_exact(&[0.1f32, 0.3], &s).unwrap();
        assert!((sol.load.values()[0] - 8.0).abs() < 1e-4);
        assert!((sol.load.values()[1] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn penalty_solution_approaches_exact() {
        let s = session(&[1, 1], 10.0, &[8.0, 8.0]);
        let opts = PenaltyOptions::new(1e6, 1e6, 1e-7);
        let l = solve_ev_penalty(&[0.1, 0.3], &s, &opts).unwrap();
        assert!((l.values()[0] - 8.0).abs() < 1e-3, "{:?}", l);
        assert!((l.values()[1] - 2.0).abs() < 1e-3, "{:?}", l);
    }

    #[test]
    fn penalty_zero_demand_is_zero() {
        let s = session(&[1, 0], 0.0, &[5.0, 0.0]);
        let opts = PenaltyOptions::new(1e6, 1e6, 1e-9);
        let l = solve_ev_penalty(&[0.0, 0.0], &s, &opts).unwrap();
        assert!(l.values().iter().all(|v| v.abs() < 1e-9));
        let l = solve_ev_penalty(&[0.3, 0.2], &s, &opts).unwrap();
        assert!(l.values().iter().all(|v| v.abs() < 1e-6), "{l:?}");
        assert_eq!(
            solve_ev_penalty(&[0.3, 0.2], &s, &PenaltyOptions::new(0.0, 1.0, 1e-9)),
            Err(AgentError::InvalidPenalty)
        );
    }

    #[test]
    fn penalty_iteration_cap_reports_no_convergence() {
        let s = session(&[1, 1], 10.0, &[8.0, 8.0]);
        let mut opts = PenaltyOptions::new(1e6, 1e6, 1e-12);
        opts.max_iter = 1;
        assert!(matches!(solve_ev_penalty(&[0.1, 0.3], &s, &opts), Err(AgentError::NoConvergence { .. })));
    }

    fn fleet(sessions: Vec<EvSession<f64>>, n: usize) -> FleetScenario<f64> {
        FleetScenario::new(TimeGrid::with_steps(n).unwrap(), sessions, DemandNoise::default()).unwrap()
    }

    #[test]
    fn identical_sessions_double_the_response() {
        let s = session(&[0, 1, 1, 1], 6.0, &[0.0, 4.0, 4.0, 4.0]);
        let p = [0.1, 0.2, 0.25, 0.15];
        let single = solve_ev_exact(&p, &s).unwrap().load;
        let agg = fleet_response(&p, &fleet(vec![s.clone(), s], 4), &AgentMode::Exact).unwrap();
        for (a, b) in agg.values().iter().zip(single.values()) {
            assert_eq!(*a, 2.0 * b);
        }
        let empty = fleet_response(&p, &fleet(vec![], 4), &AgentMode::Exact).unwrap();
        assert!(empty.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fleet_error_carries_session_index() {
        let ok = session(&[1, 1], 1.0, &[4.0, 4.0]);
        let bad = session(&[1, 1], 100.0, &[4.0, 4.0]);
        let err = fleet_response(&[0.1, 0.2], &fleet(vec![ok, bad], 2), &AgentMode::Exact).unwrap_err();
        assert_eq!(err.index, 1);
    }

    #[test]
    fn two_step_jacobian_matches_closed_form() {
        let s = session(&[1, 1, 0, 0], 4.0, &[10.0, 10.0, 0.0, 0.0]);
        let jac = fleet_jacobian(&[0.2, 0.25, 0.3, 0.3], &fleet(vec![s], 4)).unwrap();
        let m = &jac.matrix;
        assert!((m[(0, 0)] + 25.0).abs() < 1e-12 && (m[(0, 1)] - 25.0).abs() < 1e-12);
        assert!((m[(1, 0)] - 25.0).abs() < 1e-12 && (m[(1, 1)] + 25.0).abs() < 1e-12);
        assert_eq!(m[(2, 2)], 0.0);
        assert!(!jac.is_degenerate());
    }

    #[test]
    fn saturated_session_has_zero_jacobian() {
        let s = session(&[1, 1], 16.0, &[8.0, 8.0]);
        let jac = fleet_jacobian(&[0.1, 0.3], &fleet(vec![s], 2)).unwrap();
        assert_eq!(jac.matrix.max_abs(), 0.0);
    }

    #[test]
    fn vjp_matches_dense_jacobian() {
        let sessions = vec![
            session(&[1, 1, 1, 0], 5.0, &[3.0, 3.0, 3.0, 0.0]),
            session(&[0, 1, 1, 1], 2.0, &[0.0, 4.0, 4.0, 4.0]),
        ];
        let sc = fleet(sessions, 4);
        let p = [0.12, 0.2, 0.18, 0.3];
        let g = [1.0, -0.5, 0.25, 2.0];
        let jac = fleet_jacobian(&p, &sc).unwrap();
        let (load, prod, _) = fleet_vjp(&p, &sc, &g).unwrap();
        let dense = jac.matrix.tr_mul_vec(&g);
        for (a, b) in prod.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(load, fleet_response(&p, &sc, &AgentMode::Exact).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn kkt_holds_on_random_sessions(
            prices in prop::collection::vec(0.001f64..1.0, 8),
            caps in prop::collection::vec(0.5f64..11.0, 8),
            start in 0usize..6,
            len in 1usize..=8,
            frac in 0.0f64..1.0,
        ) {
            let end = (start + len).min(8);
            let avail: Vec<bool> = (0..8).map(|j| j >= start && j < end).collect();
            let caps: Vec<f64> = caps.iter().zip(&avail).map(|(&c, &a)| if a { c } else { 0.0 }).collect();
            let s0 = EvSession::new(avail, 0.0, caps).unwrap();
            let s = s0.with_demand(frac * s0.window_capacity()).unwrap();
            let sol = solve_ev_exact(&prices, &s).unwrap();
            prop_assert!(sol.kkt_residuals(&prices, &s).max() < 1e-8);
        }
    }
}
