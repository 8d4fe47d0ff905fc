//! Trace directories:
//!
//! * `meta.json`: method, run index, seeds, config snapshot, daily demand.
//! * `days.csv`: `day,peak_kw,objective,deviation,daily_cost,qp_flag`.
//! * `prices.csv`, `loads.csv`: one row per day, `day,s0,..,s{n-1}`.
//!
//! Floats are written with 17 significant digits, so a read-back trace is
//! bit-identical to the one written.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DayFlag, DayRecord, Method, RunSeeds, RunTrace, SimError};
use crate::domain::io::{fmt_f64, IoError};
use crate::domain::{LoadProfile, PriceVector};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceMeta {
    method: Method,
    run_index: usize,
    seeds: RunSeeds,
    config: serde_json::Value,
    days: usize,
    daily_demand: Vec<f64>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| {
        SimError::Io(IoError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn write(path: &Path, text: &str) -> Result<(), SimError> {
    fs::write(path, text).map_err(io(path))
}

fn matrix_csv(rows: &[&[f64]]) -> String {
    let n = rows.first().map_or(0, |r| r.len());
    let mut out = String::from("day");
    for j in 0..n {
        out.push_str(&format!(",s{j}"));
    }
    out.push('\n');
    for (d, row) in rows.iter().enumerate() {
        out.push_str(&d.to_string());
        for &v in row.iter() {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    out
}

pub fn write_trace(dir: &Path, trace: &RunTrace) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let meta = TraceMeta {
        method: trace.method,
        run_index: trace.run_index,
        seeds: trace.seeds,
        config: trace.config.clone(),
        days: trace.records.len(),
        daily_demand: trace.records.iter().map(|r| r.demand).collect(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(IoError::from)?;
    write(&dir.join("meta.json"), &json)?;

    let mut days = String::from("day,peak_kw,objective,deviation,daily_cost,qp_flag\n");
    for r in &trace.records {
        let flags: Vec<&str> = r.flags.iter().map(|f| f.as_str()).collect();
        days.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.day,
            fmt_f64(r.peak_kw),
            fmt_f64(r.objective),
            fmt_f64(r.deviation_term),
            fmt_f64(r.daily_cost),
            flags.join(";")
        ));
    }
    write(&dir.join("days.csv"), &days)?;
    let prices: Vec<&[f64]> = trace.records.iter().map(|r| r.price.values()).collect();
    write(&dir.join("prices.csv"), &matrix_csv(&prices))?;
    let loads: Vec<&[f64]> = trace.records.iter().map(|r| r.l_agg.values()).collect();
    write(&dir.join("loads.csv"), &matrix_csv(&loads))
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>, SimError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(IoError::from)?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| IoError::Format(format!("{}: {e}", path.display())))?;
        rows.push(vals);
    }
    Ok(rows)
}

#[derive(Deserialize)]
struct DayRow {
    day: usize,
    peak_kw: f64,
    objective: f64,
    deviation: f64,
    daily_cost: f64,
    qp_flag: String,
}

pub fn read_trace(dir: &Path) -> Result<RunTrace, SimError> {
    let meta_path = dir.join("meta.json");
    let meta: TraceMeta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(io(&meta_path))?).map_err(IoError::from)?;
    let days_path = dir.join("days.csv");
    let text = fs::read_to_string(&days_path).map_err(io(&days_path))?;
    let rows = csv::Reader::from_reader(text.as_bytes())
        .deserialize::<DayRow>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(IoError::from)?;
    let prices = read_matrix(&dir.join("prices.csv"))?;
    let loads = read_matrix(&dir.join("loads.csv"))?;
    if rows.len() != meta.days || prices.len() != meta.days || loads.len() != meta.days || meta.daily_demand.len() != meta.days {
        return Err(IoError::Format(format!("{}: inconsistent day counts", dir.display())).into());
    }
    let mut records = Vec::with_capacity(meta.days);
    for (((row, p), l), demand) in rows.into_iter().zip(prices).zip(loads).zip(meta.daily_demand) {
        let flags = row
            .qp_flag
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| DayFlag::parse(s).ok_or_else(|| IoError::Format(format!("unknown flag {s}"))))
            .collect::<Result<Vec<_>, _>>()?;
        records.push(DayRecord {
            day: row.day,
            price: PriceVector::new(p)?,
            l_agg: LoadProfile::new(l)?,
            objective: row.objective,
            peak_kw: row.peak_kw,
            deviation_term: row.deviation,
            daily_cost: row.daily_cost,
            demand,
            flags,
        });
    }
    Ok(RunTrace {
        method: meta.method,
        run_index: meta.run_index,
        seeds: meta.seeds,
        config: meta.config,
        records,
    })
}

/// Tidy `method,run,day,metric,value` rows for plotting.
pub fn plot_data_csv(traces: &[RunTrace]) -> String {
    let mut out = String::from("method,run,day,metric,value\n");
    for t in traces {
        for r in &t.records {
            for (metric, v) in [
                ("peak_kw", r.peak_kw),
                ("objective", r.objective),
                ("deviation", r.deviation_term),
                ("daily_cost", r.daily_cost),
            ] {
                out.push_str(&format!("{},{},{},{metric},{}\n", t.method.as_str(), t.run_index, r.day, fmt_f64(v)));
            }
        }
    }
    out
}

pub fn write_plot_data(path: &Path, traces: &[RunTrace]) -> Result<(), SimError> {
    write(path, &plot_data_csv(traces))
}
