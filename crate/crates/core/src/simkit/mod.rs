//! Scenario generation, the day-by-day closed loop, experiment protocol,
//! metrics and trace files. Everything here is `f64`.

pub mod generator;
pub mod persist;
pub mod report;
pub mod run;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::FleetError;
use crate::controller::ControllerError;
use crate::domain::io::IoError;
use crate::domain::{DomainError, EvSession, FleetScenario, LoadProfile, PriceVector};
use crate::sensitivity::SensitivityError;

pub use generator::{generate_reference_tariff, generate_workplace_fleet, sample_day, FleetParams};
pub use persist::{read_trace, write_plot_data, write_trace};
pub use report::{compute_report, cost_comparison, table_ratios, CostComparison, Report, TableRatios};
pub use run::{run_experiment_suite, run_fixed_price, run_ofo, OfoSetup, OslConfig, RunSeeds};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Sensitivity(#[from] SensitivityError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("session {session} cannot meet its demand after shifting by {shift} steps")]
    InfeasibleAfterShift { session: usize, shift: i64 },
    #[error("report window of {window} days exceeds trace length {days}")]
    WindowTooLong { window: usize, days: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ofo,
    Benchmark,
    Reference,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ofo => "ofo",
            Method::Benchmark => "benchmark",
            Method::Reference => "reference",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DayFlag {
    LoadConstraintSoftened,
    QpNoConvergence,
    /// Controller step failed; the previous price was reused.
    StepFailed,
    /// Measured aggregate load exceeded `l_max`.
    LoadLimitExceeded,
}

impl DayFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            DayFlag::LoadConstraintSoftened => "load_softened",
            DayFlag::QpNoConvergence => "qp_no_convergence",
            DayFlag::StepFailed => "step_failed",
            DayFlag::LoadLimitExceeded => "load_limit_exceeded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            DayFlag::LoadConstraintSoftened,
            DayFlag::QpNoConvergence,
            DayFlag::StepFailed,
            DayFlag::LoadLimitExceeded,
        ]
        .into_iter()
        .find(|f| f.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub day: usize,
    pub price: PriceVector<f64>,
    pub l_agg: LoadProfile<f64>,
    pub objective: f64,
    pub peak_kw: f64,
    pub deviation_term: f64,
    /// `pᵀl_agg`
    pub daily_cost: f64,
    /// Demand actually requested that day, for conservation checks.
    pub demand: f64,
    pub flags: Vec<DayFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub method: Method,
    pub run_index: usize,
    pub seeds: RunSeeds,
    /// Snapshot of whatever configuration produced the run.
    pub config: serde_json::Value,
    pub records: Vec<DayRecord>,
}

impl RunTrace {
    pub fn peaks(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.peak_kw).collect()
    }

    /// Mean daily peak over the last `window` days.
    pub fn tail_mean_peak(&self, window: usize) -> Result<f64, SimError> {
        let days = self.records.len();
        if window == 0 || window > days {
            return Err(SimError::WindowTooLong { window, days });
        }
        Ok(self.records[days - window..].iter().map(|r| r.peak_kw).sum::<f64>() / window as f64)
    }
}

/// Availability delay by `shift_steps` (negative values advance).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MismatchSpec {
    pub shift_steps: i64,
}

/// Shift every session's availability and caps by `spec.shift_steps`.
///
/// Entries pushed past either end of the day are dropped; the demand stays
/// the same and must still fit the shifted window.
pub fn apply_mismatch(scenario: &FleetScenario<f64>, spec: MismatchSpec) -> Result<FleetScenario<f64>, SimError> {
    let n = scenario.steps() as i64;
    let k = spec.shift_steps;
    if k.abs() >= n {
        return Err(SimError::InvalidArgument(format!("shift {k} must be smaller than the {n}-step day")));
    }
    let mut sessions = Vec::with_capacity(scenario.sessions.len());
    for (i, s) in scenario.sessions.iter().enumerate() {
        let mut avail = vec![false; n as usize];
        let mut cap = vec![0.0; n as usize];
        for j in 0..n {
            let src = j - k;
            if (0..n).contains(&src) {
                avail[j as usize] = s.availability()[src as usize];
                cap[j as usize] = s.power_cap()[src as usize];
            }
        }
        let shifted = EvSession::new(avail, s.demand(), cap)?;
        if shifted.demand() > 0.0 && shifted.window_capacity() < shifted.demand() * (1.0 - 1e-12) {
            return Err(SimError::InfeasibleAfterShift { session: i, shift: k });
        }
        sessions.push(shifted);
    }
    Ok(FleetScenario::new(scenario.grid, sessions, scenario.demand_noise)?)
}
