//! Value types shared by every other module: the daily time grid, price and
//! load vectors, charging sessions, fleet scenarios and operating bounds.
//!
//! Energy is carried in kW-intervals (power summed over steps), so a session's
//! demand constraint reads `availability · load = demand` with no step-length
//! factor. [`TimeGrid::kwh`] converts for reporting.

pub mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

pub const MINUTES_PER_DAY: usize = 1440;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("time grid {steps} x {minutes} min does not cover 1440 minutes")]
    GridSpan { steps: usize, minutes: usize },
    #[error("{what} contains a non-finite value at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("{what} is empty")]
    Empty { what: &'static str },
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    Length { what: String, got: usize, expected: usize },
    #[error("negative {what}: {value}")]
    Negative { what: &'static str, value: f64 },
    #[error("invalid bounds: {0}")]
    Bounds(String),
}

/// Fixed-resolution day: `steps_per_day * minutes_per_step == 1440`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", deny_unknown_fields)]
pub struct TimeGrid {
    steps_per_day: usize,
    minutes_per_step: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    steps_per_day: usize,
    minutes_per_step: usize,
}

impl TryFrom<RawGrid> for TimeGrid {
    type Error = DomainError;
    fn try_from(r: RawGrid) -> Result<Self, DomainError> {
        TimeGrid::new(r.steps_per_day, r.minutes_per_step)
    }
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            steps_per_day: 96,
            minutes_per_step: 15,
        }
    }
}

impl TimeGrid {
    pub fn new(steps_per_day: usize, minutes_per_step: usize) -> Result<Self, DomainError> {
        if steps_per_day == 0 || minutes_per_step == 0 || steps_per_day * minutes_per_step != MINUTES_PER_DAY {
            return Err(DomainError::GridSpan {
                steps: steps_per_day,
                minutes: minutes_per_step,
            });
        }
        Ok(Self {
            steps_per_day,
            minutes_per_step,
        })
    }

    /// Grid with `steps` equal intervals; `steps` must divide 1440.
    pub fn with_steps(steps: usize) -> Result<Self, DomainError> {
        if steps == 0 || MINUTES_PER_DAY % steps != 0 {
            return Err(DomainError::GridSpan { steps, minutes: 0 });
        }
        Self::new(steps, MINUTES_PER_DAY / steps)
    }

    pub fn steps(&self) -> usize {
        self.steps_per_day
    }

    pub fn minutes_per_step(&self) -> usize {
        self.minutes_per_step
    }

    pub fn hours_per_step(&self) -> f64 {
        self.minutes_per_step as f64 / 60.0
    }

    /// Index of the step containing clock time `hour` (fractional hours).
    pub fn step_at(&self, hour: f64) -> usize {
        let s = (hour * 60.0 / self.minutes_per_step as f64).floor();
        (s.max(0.0) as usize).min(self.steps_per_day - 1)
    }

    /// Clock time (hours) at the start of step `i`.
    pub fn hour_of(&self, i: usize) -> f64 {
        (i * self.minutes_per_step) as f64 / 60.0
    }

    pub fn kwh(&self, kw_intervals: f64) -> f64 {
        kw_intervals * self.hours_per_step()
    }
}

macro_rules! finite_series {
    ($name:ident, $what:literal) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(try_from = "Vec<T>", into = "Vec<T>", bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
        pub struct $name<T>(Vec<T>);

        impl<T: Real> $name<T> {
            pub fn new(values: Vec<T>) -> Result<Self, DomainError> {
                if values.is_empty() {
                    return Err(DomainError::Empty { what: $what });
                }
                if let Some(index) = values.iter().position(|v| !v.is_finite()) {
                    return Err(DomainError::NonFinite { what: $what, index });
                }
                Ok(Self(values))
            }

            pub fn constant(n: usize, v: T) -> Self {
                Self::new(vec![v; n]).expect("constant series must be finite and nonempty")
            }

            pub fn values(&self) -> &[T] {
                &self.0
            }

            pub fn into_inner(self) -> Vec<T> {
                self.0
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn max(&self) -> T {
                self.0.iter().copied().fold(T::neg_infinity(), T::max)
            }

            pub fn min(&self) -> T {
                self.0.iter().copied().fold(T::infinity(), T::min)
            }

            /// First index attaining the maximum.
            pub fn argmax(&self) -> usize {
                let mut best = 0;
                for (i, &v) in self.0.iter().enumerate() {
                    if v > self.0[best] {
                        best = i;
                    }
                }
                best
            }

            pub fn dot(&self, other: &[T]) -> T {
                crate::linalg::dot(&self.0, other)
            }

            pub fn check_len(&self, expected: usize) -> Result<(), DomainError> {
                if self.0.len() != expected {
                    return Err(DomainError::Length {
                        what: $what.into(),
                        got: self.0.len(),
                        expected,
                    });
                }
                Ok(())
            }
        }

        impl<T: Real> TryFrom<Vec<T>> for $name<T> {
            type Error = DomainError;
            fn try_from(v: Vec<T>) -> Result<Self, DomainError> {
                Self::new(v)
            }
        }

        impl<T> From<$name<T>> for Vec<T> {
            fn from(v: $name<T>) -> Vec<T> {
                v.0
            }
        }
    };
}

finite_series!(PriceVector, "price vector");
finite_series!(LoadProfile, "load profile");

impl<T: Real> LoadProfile<T> {
    pub fn zeros(n: usize) -> Self {
        Self(vec![T::zero(); n])
    }

    pub fn total(&self) -> T {
        self.0.iter().copied().sum()
    }
}

/// One vehicle's charging requirement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "RawSession<T>",
    into = "RawSession<T>",
    bound = "T: Real + Serialize + for<'a> Deserialize<'a>"
)]
pub struct EvSession<T> {
    availability: Vec<bool>,
    demand: T,
    power_cap: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSession<T> {
    availability: Vec<u8>,
    demand: T,
    power_cap: Vec<T>,
}

impl<T: Real> TryFrom<RawSession<T>> for EvSession<T> {
    type Error = DomainError;
    fn try_from(r: RawSession<T>) -> Result<Self, DomainError> {
        let mut availability = Vec::with_capacity(r.availability.len());
        for (i, &a) in r.availability.iter().enumerate() {
            match a {
                0 => availability.push(false),
                1 => availability.push(true),
                _ => {
                    return Err(DomainError::Length {
                        what: format!("availability[{i}] = {a} (must be 0 or 1)"),
                        got: a as usize,
                        expected: 1,
                    })
                }
            }
        }
        EvSession::new(availability, r.demand, r.power_cap)
    }
}

impl<T: Real> From<EvSession<T>> for RawSession<T> {
    fn from(s: EvSession<T>) -> Self {
        RawSession {
            availability: s.availability.iter().map(|&a| a as u8).collect(),
            demand: s.demand,
            power_cap: s.power_cap,
        }
    }
}

impl<T: Real> EvSession<T> {
    pub fn new(availability: Vec<bool>, demand: T, power_cap: Vec<T>) -> Result<Self, DomainError> {
        if availability.len() != power_cap.len() {
            return Err(DomainError::Length {
                what: "power_cap".into(),
                got: power_cap.len(),
                expected: availability.len(),
            });
        }
        if !demand.is_finite() {
            return Err(DomainError::NonFinite {
                what: "demand",
                index: 0,
            });
        }
        if demand < T::zero() {
            return Err(DomainError::Negative {
                what: "demand",
                value: demand.to_f64().unwrap_or(f64::NAN),
            });
        }
        if let Some(index) = power_cap.iter().position(|v| !v.is_finite()) {
            return Err(DomainError::NonFinite {
                what: "power_cap",
                index,
            });
        }
        if let Some(c) = power_cap.iter().find(|&&v| v < T::zero()) {
            return Err(DomainError::Negative {
                what: "power_cap",
                value: c.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self {
            availability,
            demand,
            power_cap,
        })
    }

    /// Session available on steps `start..end` with a constant cap.
    pub fn with_window(n: usize, start: usize, end: usize, demand: T, cap: T) -> Result<Self, DomainError> {
        if start > end || end > n {
            return Err(DomainError::Length {
                what: format!("window {start}..{end}"),
                got: end,
                expected: n,
            });
        }
        let availability: Vec<bool> = (0..n).map(|i| (start..end).contains(&i)).collect();
        let power_cap = availability.iter().map(|&a| if a { cap } else { T::zero() }).collect();
        Self::new(availability, demand, power_cap)
    }

    pub fn len(&self) -> usize {
        self.availability.len()
    }

    pub fn is_empty(&self) -> bool {
        self.availability.is_empty()
    }

    pub fn availability(&self) -> &[bool] {
        &self.availability
    }

    pub fn demand(&self) -> T {
        self.demand
    }

    pub fn power_cap(&self) -> &[T] {
        &self.power_cap
    }

    /// Indices of available steps, ascending.
    pub fn window(&self) -> Vec<usize> {
        self.availability
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    /// Largest energy deliverable inside the window.
    pub fn window_capacity(&self) -> T {
        self.availability
            .iter()
            .zip(&self.power_cap)
            .filter(|(a, _)| **a)
            .map(|(_, &c)| c)
            .sum()
    }

    pub fn with_demand(&self, demand: T) -> Result<Self, DomainError> {
        Self::new(self.availability.clone(), demand, self.power_cap.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    /// Demands are used as given every day.
    #[default]
    None,
    /// Mean-one multiplicative lognormal factor per session and day.
    Lognormal,
}

/// Day-to-day demand law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandNoise {
    pub family: NoiseFamily,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for DemandNoise {
    fn default() -> Self {
        Self {
            family: NoiseFamily::None,
            sigma: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct FleetScenario<T> {
    pub grid: TimeGrid,
    pub sessions: Vec<EvSession<T>>,
    #[serde(default)]
    pub demand_noise: DemandNoise,
}

impl<T: Real> FleetScenario<T> {
    pub fn new(grid: TimeGrid, sessions: Vec<EvSession<T>>, demand_noise: DemandNoise) -> Result<Self, DomainError> {
        for (i, s) in sessions.iter().enumerate() {
            if s.len() != grid.steps() {
                return Err(DomainError::Length {
                    what: format!("session {i}"),
                    got: s.len(),
                    expected: grid.steps(),
                });
            }
        }
        Ok(Self {
            grid,
            sessions,
            demand_noise,
        })
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn total_demand(&self) -> T {
        self.sessions.iter().map(EvSession::demand).sum()
    }
}

/// Price box and aggregate load cap, uniform over the day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBounds<T>", into = "RawBounds<T>", bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct Bounds<T> {
    p_min: T,
    p_max: T,
    l_max: T,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBounds<T> {
    p_min: T,
    p_max: T,
    l_max: T,
}

impl<T: Real> TryFrom<RawBounds<T>> for Bounds<T> {
    type Error = DomainError;
    fn try_from(r: RawBounds<T>) -> Result<Self, DomainError> {
        Bounds::new(r.p_min, r.p_max, r.l_max)
    }
}

impl<T: Real> From<Bounds<T>> for RawBounds<T> {
    fn from(b: Bounds<T>) -> Self {
        RawBounds {
            p_min: b.p_min,
            p_max: b.p_max,
            l_max: b.l_max,
        }
    }
}

impl<T: Real> Default for Bounds<T> {
    /// 0.001..1.0 price box and a 750 kW aggregate cap.
    fn default() -> Self {
        Self {
            p_min: T::lit(0.001),
            p_max: T::lit(1.0),
            l_max: T::lit(750.0),
        }
    }
}

impl<T: Real> Bounds<T> {
    pub fn new(p_min: T, p_max: T, l_max: T) -> Result<Self, DomainError> {
        if !(p_min.is_finite() && p_max.is_finite() && l_max.is_finite()) {
            return Err(DomainError::Bounds("non-finite bound".into()));
        }
        if !(T::zero() < p_min && p_min < p_max) {
            return Err(DomainError::Bounds(format!("need 0 < p_min < p_max, got {p_min} and {p_max}")));
        }
        if !(l_max > T::zero()) {
            return Err(DomainError::Bounds(format!("need l_max > 0, got {l_max}")));
        }
        Ok(Self { p_min, p_max, l_max })
    }

    pub fn p_min(&self) -> T {
        self.p_min
    }

    pub fn p_max(&self) -> T {
        self.p_max
    }

    pub fn l_max(&self) -> T {
        self.l_max
    }

    pub fn with_l_max(self, l_max: T) -> Result<Self, DomainError> {
        Self::new(self.p_min, self.p_max, l_max)
    }

    pub fn clamp_price(&self, v: T) -> T {
        v.max(self.p_min).min(self.p_max)
    }

    /// Componentwise projection onto the price box.
    pub fn project(&self, p: &[T]) -> Vec<T> {
        p.iter().map(|&v| self.clamp_price(v)).collect()
    }

    pub fn contains_price(&self, p: &[T]) -> bool {
        p.iter().all(|&v| v >= self.p_min && v <= self.p_max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub sessions: usize,
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Lists every violated scenario invariant; an empty list means the scenario
/// is usable as-is.
pub fn validate_scenario<T: Real>(scenario: &FleetScenario<T>, bounds: &Bounds<T>) -> ValidationReport {
    let n = scenario.steps();
    let mut issues = Vec::new();
    let slack = T::lit(1e-9);
    let mut step_capacity = vec![T::zero(); n];
    for (i, s) in scenario.sessions.iter().enumerate() {
        if s.len() != n {
            issues.push(format!("session {i}: length {} does not match grid of {n} steps", s.len()));
            continue;
        }
        let cap = s.window_capacity();
        if s.demand() > T::zero() && !s.availability().iter().any(|&a| a) {
            issues.push(format!("infeasible session {i}: positive demand {} with an empty window", s.demand()));
        } else if s.demand() > cap + slack * T::one().max(cap) {
            issues.push(format!(
                "infeasible session {i}: demand {} exceeds window capacity {cap}",
                s.demand()
            ));
        }
        for (j, (&a, &c)) in s.availability().iter().zip(s.power_cap()).enumerate() {
            if a {
                step_capacity[j] = step_capacity[j] + c;
            }
        }
    }
    let deliverable: T = step_capacity.iter().map(|&c| c.min(bounds.l_max())).sum();
    let total = scenario.total_demand();
    if total > deliverable + slack * T::one().max(deliverable) {
        issues.push(format!(
            "fleet: total demand {total} exceeds deliverable energy {deliverable} under aggregate cap {}",
            bounds.l_max()
        ));
    }
    ValidationReport {
        sessions: scenario.sessions.len(),
        issues,
    }
}
