//! Scenario and tariff files.
//!
//! * Scenario JSON: `{grid, sessions: [{availability, demand, power_cap}], demand_noise: {family, sigma, seed}}`.
//! * Session CSV: one session per row, `start,end,demand,power_cap`, window `start..end`.
//! * Tariff CSV: `step,price`.
//! * Matrix CSV (sensitivity estimates): `row,s0,..,s{n-1}`, one row per output step.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use super::{DemandNoise, DomainError, EvSession, FleetScenario, PriceVector, TimeGrid};
use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid data: {0}")]
    Domain(#[from] DomainError),
    #[error("{0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Float formatting used in every CSV output: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn scenario_to_json(scenario: &FleetScenario<f64>) -> Result<String, IoError> {
    Ok(serde_json::to_string_pretty(scenario)?)
}

pub fn scenario_from_json(text: &str) -> Result<FleetScenario<f64>, IoError> {
    let sc: FleetScenario<f64> = serde_json::from_str(text)?;
    // re-run the constructor for the cross-field length check
    Ok(FleetScenario::new(sc.grid, sc.sessions, sc.demand_noise)?)
}

pub fn write_scenario(path: &Path, scenario: &FleetScenario<f64>) -> Result<(), IoError> {
    fs::write(path, scenario_to_json(scenario)?).map_err(io_err(path))
}

pub fn read_scenario(path: &Path) -> Result<FleetScenario<f64>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    scenario_from_json(&text)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionRow {
    start: usize,
    end: usize,
    demand: f64,
    power_cap: f64,
}

/// Load sessions from CSV rows `start,end,demand,power_cap`.
pub fn sessions_from_csv<R: Read>(reader: R, grid: TimeGrid, noise: DemandNoise) -> Result<FleetScenario<f64>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut sessions = Vec::new();
    for (i, row) in rdr.deserialize::<SessionRow>().enumerate() {
        let row = row?;
        let s = EvSession::with_window(grid.steps(), row.start, row.end, row.demand, row.power_cap)
            .map_err(|e| IoError::Format(format!("row {i}: {e}")))?;
        sessions.push(s);
    }
    Ok(FleetScenario::new(grid, sessions, noise)?)
}

pub fn read_sessions_csv(path: &Path, grid: TimeGrid, noise: DemandNoise) -> Result<FleetScenario<f64>, IoError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    sessions_from_csv(f, grid, noise)
}

pub fn tariff_to_csv(price: &PriceVector<f64>) -> String {
    let mut out = String::from("step,price\n");
    for (i, &p) in price.values().iter().enumerate() {
        out.push_str(&format!("{i},{}\n", fmt_f64(p)));
    }
    out
}

pub fn tariff_from_csv<R: Read>(reader: R) -> Result<PriceVector<f64>, IoError> {
    #[derive(Deserialize)]
    struct Row {
        step: usize,
        price: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut values = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        if row.step != values.len() {
            return Err(IoError::Format(format!("tariff step {} out of order", row.step)));
        }
        values.push(row.price);
    }
    Ok(PriceVector::new(values)?)
}

pub fn write_tariff(path: &Path, price: &PriceVector<f64>) -> Result<(), IoError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(tariff_to_csv(price).as_bytes()).map_err(io_err(path))
}

pub fn read_tariff(path: &Path) -> Result<PriceVector<f64>, IoError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    tariff_from_csv(f)
}

pub fn matrix_to_csv(m: &Matrix<f64>) -> String {
    let mut out = String::from("row");
    for j in 0..m.cols() {
        out.push_str(&format!(",s{j}"));
    }
    out.push('\n');
    for i in 0..m.rows() {
        out.push_str(&i.to_string());
        for &v in m.row(i) {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv<R: Read>(reader: R) -> Result<Matrix<f64>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let cols = rdr.headers()?.len().saturating_sub(1);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.get(0).and_then(|s| s.parse::<usize>().ok()) != Some(i) {
            return Err(IoError::Format(format!("matrix row {i} out of order")));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| IoError::Format(format!("matrix row {i}: {e}")))?;
        if row.len() != cols || row.iter().any(|v| !v.is_finite()) {
            return Err(IoError::Format(format!("matrix row {i}: expected {cols} finite values")));
        }
        rows.push(row);
    }
    if rows.len() != cols {
        return Err(IoError::Format(format!("matrix is {}x{cols}, expected square", rows.len())));
    }
    Matrix::from_rows(&rows).map_err(|e| IoError::Format(e.to_string()))
}

pub fn write_matrix(path: &Path, m: &Matrix<f64>) -> Result<(), IoError> {
    fs::write(path, matrix_to_csv(m)).map_err(io_err(path))
}

pub fn read_matrix(path: &Path) -> Result<Matrix<f64>, IoError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    matrix_from_csv(f)
}
