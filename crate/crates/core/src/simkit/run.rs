//! Closed-loop and fixed-price day loops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::generator::sample_day;
use super::{DayFlag, DayRecord, Method, RunTrace, SimError};
use crate::agent::{fleet_response, AgentMode};
use crate::controller::{dso_gradient, dso_objective, event_mask, lop_step, sample_excitation, step_size, DsoConfig, LopFlag};
use crate::domain::{FleetScenario, LoadProfile, PriceVector};
use crate::linalg::Matrix;
use crate::sensitivity::{kalman_update, CovarianceMode, SensitivityEstimate};

/// Sensitivity-learning noise levels and the day-one probe size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OslConfig {
    /// Initial covariance scale, `Σ₀ = sigma0·I`.
    pub sigma0: f64,
    /// Measurement noise.
    pub sigma_m: f64,
    /// Process noise.
    pub sigma_p: f64,
    pub covariance: CovarianceMode,
    /// Standard deviation of the day-one price perturbation.
    pub init_sigma: f64,
}

impl Default for OslConfig {
    fn default() -> Self {
        Self {
            sigma0: 1e3,
            sigma_m: 100.0,
            sigma_p: 100.0,
            covariance: CovarianceMode::Factored,
            init_sigma: 0.01,
        }
    }
}

/// Random streams of one run. Demand draws come from the scenario's own
/// noise seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunSeeds {
    pub demand: u64,
    /// Day-one probe.
    pub init: u64,
    pub excitation: u64,
    /// Extra start perturbation used by the experiment suite.
    pub perturbation: u64,
}

impl RunSeeds {
    pub fn from_base(base: u64, scenario: &FleetScenario<f64>) -> Self {
        Self {
            demand: scenario.demand_noise.seed,
            init: base,
            excitation: base.wrapping_add(0x9e37_79b9_7f4a_7c15),
            perturbation: base.wrapping_add(0x3c6e_f372_fe94_f82a),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OfoSetup<'a> {
    /// The plant actually responding to prices.
    pub scenario: &'a FleetScenario<f64>,
    pub p_ref: &'a PriceVector<f64>,
    pub dso: &'a DsoConfig<f64>,
    pub osl: &'a OslConfig,
    pub h0: &'a Matrix<f64>,
    pub days: usize,
    pub agent: AgentMode<f64>,
}

fn measure(
    day: usize,
    price: PriceVector<f64>,
    scenario: &FleetScenario<f64>,
    dso: &DsoConfig<f64>,
    p_ref: &PriceVector<f64>,
    agent: &AgentMode<f64>,
    mut flags: Vec<DayFlag>,
) -> Result<DayRecord, SimError> {
    let today = sample_day(scenario, day as u64);
    let l_agg = fleet_response(price.values(), &today, agent)?;
    let obj = dso_objective(&price, &l_agg, dso, p_ref)?;
    let peak_kw = l_agg.max();
    if peak_kw > dso.bounds.l_max() {
        flags.push(DayFlag::LoadLimitExceeded);
    }
    Ok(DayRecord {
        day,
        daily_cost: l_agg.dot(price.values()),
        price,
        peak_kw,
        objective: obj.value,
        deviation_term: obj.deviation_term,
        demand: today.total_demand(),
        l_agg,
        flags,
    })
}

fn normal_offset(n: usize, sigma: f64, seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    sample_excitation(n, sigma, &mut rng)
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Online loop: two probing days, then one Kalman update and one projected
/// step per day.
pub fn run_ofo(setup: &OfoSetup<'_>, seeds: &RunSeeds) -> Result<RunTrace, SimError> {
    run_perturbed(setup, seeds, 0, 0.0)
}

fn run_perturbed(setup: &OfoSetup<'_>, seeds: &RunSeeds, run_index: usize, extra_sigma: f64) -> Result<RunTrace, SimError> {
    let OfoSetup {
        scenario,
        p_ref,
        dso,
        osl,
        h0,
        days,
        agent,
    } = *setup;
    if days < 2 {
        return Err(SimError::InvalidArgument(format!("at least two days are required, got {days}")));
    }
    dso.validate()?;
    let n = scenario.steps();
    p_ref.check_len(n)?;
    let bounds = dso.bounds;

    let start = |k: u64, probe: f64| -> Result<PriceVector<f64>, SimError> {
        let eps = normal_offset(n, probe, seeds.init, k);
        let extra = normal_offset(n, extra_sigma, seeds.perturbation, k);
        let p: Vec<f64> = (0..n).map(|j| p_ref.values()[j] + eps[j] + extra[j]).collect();
        Ok(PriceVector::new(bounds.project(&p))?)
    };
    let mut records = Vec::with_capacity(days);
    records.push(measure(0, start(0, 0.0)?, scenario, dso, p_ref, &agent, vec![])?);
    records.push(measure(1, start(1, osl.init_sigma)?, scenario, dso, p_ref, &agent, vec![])?);

    let mut est = SensitivityEstimate::new(h0.clone(), osl.sigma0, osl.sigma_m, osl.sigma_p, osl.covariance)?;
    let mut exc_rng = ChaCha8Rng::seed_from_u64(seeds.excitation);
    for day in 2..days {
        let (prev, last) = (&records[day - 2], &records[day - 1]);
        let dp = diff(last.price.values(), prev.price.values());
        let dl = diff(last.l_agg.values(), prev.l_agg.values());
        est = kalman_update(&est, &dp, &dl)?;
        let mask = if dso.mask_enabled {
            event_mask(&last.l_agg, dso.mask_threshold)
        } else {
            vec![true; n]
        };
        let grad = dso_gradient(&last.price, &last.l_agg, dso, p_ref)?;
        let alpha = step_size(&dso.step, day - 2);
        let excitation = sample_excitation(n, dso.sigma_u, &mut exc_rng);
        let mut flags = Vec::new();
        let price = match lop_step(&last.price, &last.l_agg, &est.h, &grad, dso, &mask, alpha, &excitation) {
            Ok(out) => {
                for f in out.flags {
                    flags.push(match f {
                        LopFlag::LoadConstraintSoftened => DayFlag::LoadConstraintSoftened,
                        LopFlag::QpNoConvergence => DayFlag::QpNoConvergence,
                    });
                }
                out.p_next
            }
            Err(_) => {
                flags.push(DayFlag::StepFailed);
                last.price.clone()
            }
        };
        records.push(measure(day, price, scenario, dso, p_ref, &agent, flags)?);
    }
    Ok(RunTrace {
        method: Method::Ofo,
        run_index,
        seeds: RunSeeds {
            demand: scenario.demand_noise.seed,
            ..*seeds
        },
        config: json!({
            "dso": dso,
            "osl": osl,
            "agent": agent,
            "days": days,
            "extra_sigma": extra_sigma,
        }),
        records,
    })
}

/// The nominal run plus `n_runs − 1` runs whose two start prices carry an
/// extra `N(0, extra_sigma²I)` offset. Run `r` uses perturbation seed
/// `seeds.perturbation ^ r`; every other stream is shared.
pub fn run_experiment_suite(
    setup: &OfoSetup<'_>,
    seeds: &RunSeeds,
    n_runs: usize,
    extra_sigma: f64,
) -> Result<Vec<RunTrace>, SimError> {
    if n_runs == 0 {
        return Err(SimError::InvalidArgument("n_runs must be at least 1".into()));
    }
    (0..n_runs)
        .into_par_iter()
        .map(|r| {
            let s = RunSeeds {
                perturbation: seeds.perturbation ^ r as u64,
                ..*seeds
            };
            run_perturbed(setup, &s, r, if r == 0 { 0.0 } else { extra_sigma })
        })
        .collect()
}

/// Evaluate a fixed tariff every day on fresh demand draws.
pub fn run_fixed_price(
    scenario: &FleetScenario<f64>,
    p_ref: &PriceVector<f64>,
    price: &PriceVector<f64>,
    dso: &DsoConfig<f64>,
    days: usize,
    method: Method,
    agent: AgentMode<f64>,
) -> Result<RunTrace, SimError> {
    price.check_len(scenario.steps())?;
    let records = (0..days)
        .map(|d| measure(d, price.clone(), scenario, dso, p_ref, &agent, vec![]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunTrace {
        method,
        run_index: 0,
        seeds: RunSeeds {
            demand: scenario.demand_noise.seed,
            ..RunSeeds::default()
        },
        config: json!({ "dso": dso, "agent": agent, "days": days }),
        records,
    })
}

/// Largest relative gap between delivered and requested energy over a trace.
pub fn conservation_error(trace: &RunTrace) -> f64 {
    trace
        .records
        .iter()
        .map(|r| (LoadProfile::total(&r.l_agg) - r.demand).abs() / r.demand.max(1e-300))
        .fold(0.0, f64::max)
}
