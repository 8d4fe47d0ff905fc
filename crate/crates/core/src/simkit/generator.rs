//! Synthetic workplace fleets, daily demand draws and the two-peak tariff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{DemandNoise, EvSession, FleetScenario, NoiseFamily, PriceVector, TimeGrid};

/// Session distribution. Hours are on the 0–24 clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetParams {
    pub arrival_mean_h: f64,
    pub arrival_sd_h: f64,
    pub departure_mean_h: f64,
    pub departure_sd_h: f64,
    pub earliest_h: f64,
    pub latest_h: f64,
    pub min_dwell_h: f64,
    /// kW, constant inside the window.
    pub power_cap: f64,
    /// Mean demand range in kW-intervals on a 15-minute grid.
    pub demand_min: f64,
    pub demand_max: f64,
    /// Largest share of the window capacity a nominal demand may take.
    pub max_fill: f64,
    /// Lognormal day-to-day demand spread.
    pub demand_sigma: f64,
}

impl Default for FleetParams {
    fn default() -> Self {
        Self {
            arrival_mean_h: 8.0,
            arrival_sd_h: 1.0,
            departure_mean_h: 17.0,
            departure_sd_h: 1.5,
            earliest_h: 6.0,
            latest_h: 24.0,
            min_dwell_h: 1.0,
            power_cap: 11.0,
            demand_min: 8.0,
            demand_max: 40.0,
            max_fill: 0.8,
            demand_sigma: 0.1,
        }
    }
}

pub fn generate_workplace_fleet(count: usize, grid: TimeGrid, seed: u64) -> FleetScenario<f64> {
    generate_fleet_with(count, grid, seed, &FleetParams::default())
}

pub fn generate_fleet_with(count: usize, grid: TimeGrid, seed: u64, params: &FleetParams) -> FleetScenario<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arrival = Normal::new(params.arrival_mean_h, params.arrival_sd_h).expect("valid arrival law");
    let departure = Normal::new(params.departure_mean_h, params.departure_sd_h).expect("valid departure law");
    let n = grid.steps();
    let h = grid.hours_per_step();
    let basis = 15.0 / grid.minutes_per_step() as f64;
    let latest_start = params.latest_h - params.min_dwell_h;
    let mut sessions = Vec::with_capacity(count);
    for _ in 0..count {
        let a: f64 = arrival.sample(&mut rng).clamp(params.earliest_h, latest_start);
        let d: f64 = departure.sample(&mut rng).clamp(a + params.min_dwell_h, params.latest_h);
        let start = ((a / h).ceil() as usize).min(n - 1);
        let end = ((d / h).floor() as usize).clamp(start + 1, n);
        let capacity = params.power_cap * (end - start) as f64;
        let mean = rng.random_range(params.demand_min..=params.demand_max) * basis;
        let demand = mean.min(params.max_fill * capacity);
        sessions.push(EvSession::with_window(n, start, end, demand, params.power_cap).expect("generated window is valid"));
    }
    let noise = DemandNoise {
        family: if params.demand_sigma > 0.0 { NoiseFamily::Lognormal } else { NoiseFamily::None },
        sigma: params.demand_sigma,
        seed: seed ^ 0x5eed_d3a4_d000_0001,
    };
    FleetScenario::new(grid, sessions, noise).expect("sessions match the grid")
}

/// Fleet with the demands drawn for `day`. Each session's demand is scaled
/// by a mean-one lognormal factor and clipped to its window capacity. Draws
/// depend only on the noise seed and the day.
pub fn sample_day(scenario: &FleetScenario<f64>, day: u64) -> FleetScenario<f64> {
    let noise = scenario.demand_noise;
    if noise.family == NoiseFamily::None || noise.sigma <= 0.0 {
        return scenario.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(day);
    let s = noise.sigma;
    let sessions = scenario
        .sessions
        .iter()
        .map(|sess| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let factor = (s * z - 0.5 * s * s).exp();
            let d = (sess.demand() * factor).min(sess.window_capacity());
            sess.with_demand(d).expect("scaled demand is finite")
        })
        .collect();
    FleetScenario {
        grid: scenario.grid,
        sessions,
        demand_noise: noise,
    }
}

const BASE: f64 = 0.12;
const MORNING: (f64, f64, f64) = (7.0, 9.0, 0.25);
const EVENING: (f64, f64, f64) = (18.0, 21.0, 0.28);
const RAMP_H: f64 = 1.0;

fn plateau(hour: f64, (start, end, level): (f64, f64, f64)) -> f64 {
    let rise = |x: f64| 0.5 - 0.5 * (std::f64::consts::PI * x).cos();
    let lift = level - BASE;
    if hour >= start && hour <= end {
        lift
    } else if hour > start - RAMP_H && hour < start {
        lift * rise((hour - start + RAMP_H) / RAMP_H)
    } else if hour > end && hour < end + RAMP_H {
        lift * rise((end + RAMP_H - hour) / RAMP_H)
    } else {
        0.0
    }
}

/// Two-peak tariff sampled at step midpoints: base 0.12, 0.25 over 07–09,
/// 0.28 over 18–21, raised-cosine ramps of one hour.
pub fn generate_reference_tariff(grid: TimeGrid) -> PriceVector<f64> {
    let values = (0..grid.steps())
        .map(|i| {
            let hour = grid.hour_of(i) + 0.5 * grid.hours_per_step();
            BASE + plateau(hour, MORNING) + plateau(hour, EVENING)
        })
        .collect();
    PriceVector::new(values).expect("finite tariff")
}
