//! Experiment config file. TOML or JSON, chosen by extension; every section
//! and key is optional and unknown keys are rejected. Relative paths are
//! resolved against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use ofo_core::benchmark::BenchmarkOptions;
use ofo_core::controller::DsoConfig;
use ofo_core::domain::io::{read_matrix, read_scenario, read_sessions_csv, read_tariff};
use ofo_core::domain::{DemandNoise, FleetScenario, NoiseFamily, PriceVector, TimeGrid};
use ofo_core::linalg::Matrix;
use ofo_core::simkit::{generate_reference_tariff, FleetParams, Method, OslConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Scenario JSON or session CSV. Generated when absent.
    pub path: Option<PathBuf>,
    /// Tariff CSV. The synthetic two-peak tariff when absent.
    pub tariff: Option<PathBuf>,
    pub evs: usize,
    pub steps: usize,
    pub seed: u64,
    pub fleet: FleetParams,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            path: None,
            tariff: None,
            evs: 336,
            steps: 96,
            seed: 7,
            fleet: FleetParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmStartSpec {
    /// Precomputed `H₀` CSV; skips the history simulation.
    pub h0: Option<PathBuf>,
    pub days: usize,
    pub sigma: f64,
    pub seed: u64,
    pub ridge: Option<f64>,
}

impl Default for WarmStartSpec {
    fn default() -> Self {
        Self {
            h0: None,
            days: 60,
            sigma: 0.01,
            seed: 7,
            ridge: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub method: Method,
    pub days: usize,
    pub runs: usize,
    /// Window delay applied to the simulated plant, in steps.
    pub mismatch: i64,
    pub perturbation_sigma: f64,
    pub seed: u64,
    /// Fixed price for the benchmark method; solved when absent.
    pub price: Option<PathBuf>,
    /// Report window, days.
    pub window: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            method: Method::Ofo,
            days: 121,
            runs: 4,
            mismatch: 0,
            perturbation_sigma: 0.02,
            seed: 7,
            price: None,
            window: 14,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub starts: usize,
    pub seed: u64,
    pub options: BenchmarkOptions<f64>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            starts: 4,
            seed: 7,
            options: BenchmarkOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub scenario: ScenarioSpec,
    pub dso: DsoConfig<f64>,
    pub osl: OslConfig,
    pub warmstart: WarmStartSpec,
    pub experiment: ExperimentSpec,
    pub benchmark: BenchmarkSpec,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfigFile {
    pub fn parse(text: &str, json: bool) -> Result<Self, CliError> {
        if json {
            serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
        } else {
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
        }
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = Self::parse(&text, json).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.scenario.path);
        resolve(base, &mut cfg.scenario.tariff);
        resolve(base, &mut cfg.warmstart.h0);
        resolve(base, &mut cfg.experiment.price);
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Every referenced input file must exist.
    pub fn check_paths(&self) -> Result<(), CliError> {
        let paths = [
            &self.scenario.path,
            &self.scenario.tariff,
            &self.warmstart.h0,
            &self.experiment.price,
        ];
        for p in paths.into_iter().flatten() {
            if !p.is_file() {
                return Err(CliError::Usage(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dso.validate()?;
        TimeGrid::with_steps(self.scenario.steps)?;
        if self.experiment.runs == 0 {
            return Err(CliError::Usage("runs must be at least 1".into()));
        }
        if self.experiment.days < 2 {
            return Err(CliError::Usage("an experiment needs at least 2 days".into()));
        }
        if self.benchmark.starts == 0 {
            return Err(CliError::Usage("benchmark needs at least one start".into()));
        }
        if !(self.warmstart.sigma >= 0.0) {
            return Err(CliError::Usage("warm-start sigma must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        Ok(TimeGrid::with_steps(self.scenario.steps)?)
    }

    pub fn load_scenario(&self) -> Result<FleetScenario<f64>, CliError> {
        let grid = self.grid()?;
        let sc = match &self.scenario.path {
            Some(p) if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) => {
                let noise = DemandNoise {
                    family: NoiseFamily::Lognormal,
                    sigma: self.scenario.fleet.demand_sigma,
                    seed: self.scenario.seed,
                };
                read_sessions_csv(p, grid, noise)?
            }
            Some(p) => read_scenario(p)?,
            None => ofo_core::simkit::generator::generate_fleet_with(self.scenario.evs, grid, self.scenario.seed, &self.scenario.fleet),
        };
        Ok(sc)
    }

    pub fn load_tariff(&self, grid: TimeGrid) -> Result<PriceVector<f64>, CliError> {
        let p = match &self.scenario.tariff {
            Some(path) => read_tariff(path)?,
            None => generate_reference_tariff(grid),
        };
        p.check_len(grid.steps())?;
        Ok(p)
    }

    pub fn load_h0(&self, n: usize) -> Result<Option<Matrix<f64>>, CliError> {
        let Some(path) = &self.warmstart.h0 else {
            return Ok(None);
        };
        let h = read_matrix(path)?;
        if h.rows() != n {
            return Err(CliError::Usage(format!("{}: H0 is {}x{}, grid has {n} steps", path.display(), h.rows(), h.cols())));
        }
        Ok(Some(h))
    }
}
