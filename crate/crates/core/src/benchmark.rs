//! Full-information offline benchmark: the leader knows every session and
//! descends the reduced objective `Φ(p) = f(p, l(p))` through the exact fleet
//! response, from several starts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{fleet_response, fleet_vjp, AgentMode, FleetError};
use crate::controller::{dso_gradient, dso_objective, ControllerError, DsoConfig, ObjectiveMode};
use crate::domain::{DomainError, FleetScenario, LoadProfile, PriceVector};
use crate::linalg::norm_inf;
use crate::simkit::{DayRecord, SimError};
use crate::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchmarkError {
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct BenchmarkOptions<T> {
    pub max_iter: usize,
    /// Stop once `‖p_{t+1} − p_t‖∞` falls below this.
    pub tol: T,
    /// First step moves the largest price entry by this much; sets `α₀`.
    pub initial_move: T,
    /// Spread of the random starts around `p_ref`.
    pub start_sigma: T,
    /// Backtracking iterations run after the diminishing-step phase when
    /// the objective is smooth. Zero disables the phase.
    pub refine_max_iter: usize,
    /// Refinement stops once the projected gradient is this small.
    pub stationarity_tol: T,
}

impl<T: Real> Default for BenchmarkOptions<T> {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: T::lit(1e-7),
            initial_move: T::lit(0.05),
            start_sigma: T::lit(0.02),
            refine_max_iter: 10_000,
            stationarity_tol: T::lit(1e-8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome<T> {
    pub objective: T,
    pub iterations: usize,
    pub converged: bool,
    /// Infinity norm of the projected reduced gradient at the returned point.
    pub projected_grad_norm: T,
    /// Some session had a weakly active bound at the returned point.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct BenchmarkResult<T> {
    pub price: PriceVector<T>,
    pub predicted_load: LoadProfile<T>,
    pub objective: T,
    pub starts: usize,
    pub best_start_index: usize,
    pub per_start: Vec<StartOutcome<T>>,
}

/// Value and gradient of the reduced objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedGradient<T> {
    pub value: T,
    pub gradient: Vec<T>,
    pub load: LoadProfile<T>,
    pub degenerate: bool,
}

/// `Φ(p)` and `∇_p f + Jᵀ∇_l f` with the exact fleet Jacobian `J`.
pub fn reduced_gradient<T: Real>(
    price: &PriceVector<T>,
    scenario: &FleetScenario<T>,
    config: &DsoConfig<T>,
    p_ref: &PriceVector<T>,
) -> Result<ReducedGradient<T>, BenchmarkError> {
    let load = fleet_response(price.values(), scenario, &AgentMode::Exact)?;
    let value = dso_objective(price, &load, config, p_ref)?.value;
    let grad = dso_gradient(price, &load, config, p_ref)?;
    let (_, jg, degenerate) = fleet_vjp(price.values(), scenario, &grad.grad_l)?;
    let gradient = grad.grad_p.iter().zip(jg).map(|(&a, b)| a + b).collect();
    Ok(ReducedGradient {
        value,
        gradient,
        load,
        degenerate,
    })
}

fn projected_norm<T: Real>(p: &[T], g: &[T], lo: T, hi: T) -> T {
    let pg: Vec<T> = p
        .iter()
        .zip(g)
        .map(|(&pj, &gj)| {
            if (pj <= lo && gj > T::zero()) || (pj >= hi && gj < T::zero()) {
                T::zero()
            } else {
                gj
            }
        })
        .collect();
    norm_inf(&pg)
}

fn descend<T: Real>(
    start: PriceVector<T>,
    scenario: &FleetScenario<T>,
    config: &DsoConfig<T>,
    p_ref: &PriceVector<T>,
    opts: &BenchmarkOptions<T>,
) -> Result<(PriceVector<T>, StartOutcome<T>), BenchmarkError> {
    let bounds = config.bounds;
    let mut p = start;
    let mut rg = reduced_gradient(&p, scenario, config, p_ref)?;
    let g0 = norm_inf(&rg.gradient);
    let mut best = (rg.value, p.clone(), rg.gradient.clone(), rg.degenerate);
    let mut iterations = 0;
    let mut converged = g0 == T::zero();
    if !converged {
        let alpha0 = opts.initial_move / g0;
        for t in 0..opts.max_iter {
            let a = alpha0 / T::lit((t + 1) as f64);
            let next: Vec<T> = p.values().iter().zip(&rg.gradient).map(|(&pj, &gj)| pj - a * gj).collect();
            let next = PriceVector::new(bounds.project(&next))?;
            let moved = p.values().iter().zip(next.values()).fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()));
            p = next;
            iterations = t + 1;
            rg = reduced_gradient(&p, scenario, config, p_ref)?;
            if rg.value < best.0 {
                best = (rg.value, p.clone(), rg.gradient.clone(), rg.degenerate);
            }
            if moved < opts.tol {
                converged = true;
                break;
            }
        }
    }
    if config.objective == ObjectiveMode::Lse && opts.refine_max_iter > 0 {
        best = refine(best, scenario, config, p_ref, opts)?;
    }
    let (objective, price, grad, degenerate) = best;
    let projected_grad_norm = projected_norm(price.values(), &grad, bounds.p_min(), bounds.p_max());
    Ok((
        price,
        StartOutcome {
            objective,
            iterations,
            converged,
            projected_grad_norm,
            degenerate,
        },
    ))
}

type Iterate<T> = (T, PriceVector<T>, Vec<T>, bool);

/// Spectral projected gradient (Barzilai–Borwein steps, nonmonotone
/// Armijo test over the last ten values) on the smooth objective.
fn refine<T: Real>(
    start: Iterate<T>,
    scenario: &FleetScenario<T>,
    config: &DsoConfig<T>,
    p_ref: &PriceVector<T>,
    opts: &BenchmarkOptions<T>,
) -> Result<Iterate<T>, BenchmarkError> {
    const MEMORY: usize = 10;
    let bounds = config.bounds;
    let (mut value, mut p, mut grad, mut degenerate) = start;
    let mut best = (value, p.clone(), grad.clone(), degenerate);
    let mut history = vec![value];
    let mut step = T::one() / norm_inf(&grad).max(T::one());
    let c = T::lit(1e-4);
    // Φ is a sum of many terms; decreases below this are rounding noise
    let noise = T::lit(1e-13) * (T::one() + value.abs());
    let (s_min, s_max) = (T::lit(1e-12), T::lit(1e12));
    for _ in 0..opts.refine_max_iter {
        if projected_norm(p.values(), &grad, bounds.p_min(), bounds.p_max()) <= opts.stationarity_tol {
            break;
        }
        let reference = history.iter().copied().fold(T::neg_infinity(), T::max);
        let mut t = step;
        let mut accepted = None;
        while t > T::lit(1e-20) {
            let cand: Vec<T> = p.values().iter().zip(&grad).map(|(&pj, &gj)| pj - t * gj).collect();
            let cand = PriceVector::new(bounds.project(&cand))?;
            let moved: T = p.values().iter().zip(cand.values()).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if moved == T::zero() {
                break;
            }
            let rg = reduced_gradient(&cand, scenario, config, p_ref)?;
            if rg.value <= reference - c * moved / t + noise {
                accepted = Some((cand, rg));
                break;
            }
            t = t * T::lit(0.5);
        }
        let Some((cand, rg)) = accepted else { break };
        let s: Vec<T> = cand.values().iter().zip(p.values()).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = rg.gradient.iter().zip(&grad).map(|(&a, &b)| a - b).collect();
        let sy: T = s.iter().zip(&y).map(|(&a, &b)| a * b).sum();
        let ss: T = s.iter().map(|&a| a * a).sum();
        step = if sy > T::zero() { (ss / sy).max(s_min).min(s_max) } else { s_max.min(t * T::lit(10.0)) };
        value = rg.value;
        p = cand;
        grad = rg.gradient;
        degenerate = rg.degenerate;
        history.push(value);
        if history.len() > MEMORY {
            history.remove(0);
        }
        if value <= best.0 + noise {
            best = (value, p.clone(), grad.clone(), degenerate);
        }
    }
    Ok(best)
}

pub fn solve_benchmark<T: Real>(
    scenario: &FleetScenario<T>,
    p_ref: &PriceVector<T>,
    config: &DsoConfig<T>,
    starts: usize,
    seed: u64,
) -> Result<BenchmarkResult<T>, BenchmarkError>
where
    StandardNormal: Distribution<T>,
{
    solve_benchmark_with(scenario, p_ref, config, starts, seed, &BenchmarkOptions::default())
}

/// Multi-start projected descent. Start 0 is `p_ref`; the others add
/// `N(0, start_sigma²I)` and clip. The lowest objective wins, ties going to
/// the lowest start index.
pub fn solve_benchmark_with<T: Real>(
    scenario: &FleetScenario<T>,
    p_ref: &PriceVector<T>,
    config: &DsoConfig<T>,
    starts: usize,
    seed: u64,
    opts: &BenchmarkOptions<T>,
) -> Result<BenchmarkResult<T>, BenchmarkError>
where
    StandardNormal: Distribution<T>,
{
    if starts == 0 {
        return Err(BenchmarkError::InvalidArgument("at least one start is required".into()));
    }
    config.validate()?;
    p_ref.check_len(scenario.steps())?;
    let bounds = config.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut initial = vec![PriceVector::new(bounds.project(p_ref.values()))?];
    for _ in 1..starts {
        let p: Vec<T> = p_ref
            .values()
            .iter()
            .map(|&v| {
                let z: T = StandardNormal.sample(&mut rng);
                v + opts.start_sigma * z
            })
            .collect();
        initial.push(PriceVector::new(bounds.project(&p))?);
    }
    let outcomes = initial
        .into_par_iter()
        .map(|p0| descend(p0, scenario, config, p_ref, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best_idx = 0;
    for (i, (_, o)) in outcomes.iter().enumerate() {
        if o.objective < outcomes[best_idx].1.objective {
            best_idx = i;
        }
    }
    let price = outcomes[best_idx].0.clone();
    let predicted_load = fleet_response(price.values(), scenario, &AgentMode::Exact)?;
    let objective = outcomes[best_idx].1.objective;
    Ok(BenchmarkResult {
        price,
        predicted_load,
        objective,
        starts,
        best_start_index: best_idx,
        per_start: outcomes.into_iter().map(|(_, o)| o).collect(),
    })
}

/// Metrics of the fleet at the reference tariff on nominal demand.
pub fn reference_baseline(
    scenario: &FleetScenario<f64>,
    p_ref: &PriceVector<f64>,
    config: &DsoConfig<f64>,
) -> Result<DayRecord, SimError> {
    p_ref.check_len(scenario.steps())?;
    let l_agg = fleet_response(p_ref.values(), scenario, &AgentMode::Exact)?;
    let obj = dso_objective(p_ref, &l_agg, config, p_ref)?;
    Ok(DayRecord {
        day: 0,
        price: p_ref.clone(),
        peak_kw: l_agg.max(),
        objective: obj.value,
        deviation_term: obj.deviation_term,
        daily_cost: l_agg.dot(p_ref.values()),
        demand: scenario.total_demand(),
        l_agg,
        flags: vec![],
    })
}
