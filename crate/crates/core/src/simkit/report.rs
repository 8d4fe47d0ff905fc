//! Summary metrics over run traces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Method, RunTrace, SimError};
use crate::domain::io::fmt_f64;

/// Peak ratios, all as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableRatios {
    /// `(P_ref − P_bench)/P_ref`
    pub bench_reduction: f64,
    /// `(P_ref − P_ofo)/P_ref`
    pub ofo_reduction: f64,
    /// `(P_ofo − P_bench)/P_bench`
    pub gap_to_bench: f64,
    /// `(P_ofo − P_bench)/P_ref`
    pub gap_over_ref: f64,
}

pub fn table_ratios(p_ref: f64, p_bench: f64, p_ofo: f64) -> TableRatios {
    TableRatios {
        bench_reduction: (p_ref - p_bench) / p_ref,
        ofo_reduction: (p_ref - p_ofo) / p_ref,
        gap_to_bench: (p_ofo - p_bench) / p_bench,
        gap_over_ref: (p_ofo - p_bench) / p_ref,
    }
}

/// Daily cost savings, all as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    /// `(C_ref − C_ofo)/C_ref`
    pub ofo_saving: f64,
    /// `(C_ref − C_bench)/C_ref`
    pub bench_saving: f64,
    /// `(C_bench − C_ofo)/C_bench`
    pub ofo_vs_bench: f64,
}

pub fn cost_comparison(c_ref: f64, c_ofo: f64, c_bench: f64) -> CostComparison {
    CostComparison {
        ofo_saving: (c_ref - c_ofo) / c_ref,
        bench_saving: (c_ref - c_bench) / c_ref,
        ofo_vs_bench: (c_bench - c_ofo) / c_bench,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    /// Window-mean peak averaged over runs.
    pub tail_mean_peak: f64,
    pub tail_min: f64,
    pub tail_max: f64,
    /// Last-day cost averaged over runs.
    pub last_day_cost: f64,
    /// `(P_ref − P)/P_ref` when a reference trace is present.
    pub reduction_vs_reference: Option<f64>,
}

/// Per-day envelope of the daily peak across runs of one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub method: Method,
    pub day: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub window: usize,
    pub methods: Vec<MethodSummary>,
    pub ratios: Option<TableRatios>,
    pub costs: Option<CostComparison>,
    pub bands: Vec<BandPoint>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn compute_report(traces: &[RunTrace], window: usize) -> Result<Report, SimError> {
    if traces.is_empty() {
        return Err(SimError::InvalidArgument("no traces to report on".into()));
    }
    let mut groups: BTreeMap<Method, Vec<&RunTrace>> = BTreeMap::new();
    for t in traces {
        groups.entry(t.method).or_default().push(t);
    }
    let mut methods = Vec::new();
    let mut bands = Vec::new();
    for (&method, runs) in &groups {
        let tails = runs.iter().map(|t| t.tail_mean_peak(window)).collect::<Result<Vec<_>, _>>()?;
        let last_costs: Vec<f64> = runs.iter().map(|t| t.records.last().expect("window checked").daily_cost).collect();
        methods.push(MethodSummary {
            method,
            runs: runs.len(),
            tail_mean_peak: mean(&tails),
            tail_min: tails.iter().copied().fold(f64::INFINITY, f64::min),
            tail_max: tails.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            last_day_cost: mean(&last_costs),
            reduction_vs_reference: None,
        });
        let days = runs.iter().map(|t| t.records.len()).min().unwrap_or(0);
        for day in 0..days {
            let peaks: Vec<f64> = runs.iter().map(|t| t.records[day].peak_kw).collect();
            bands.push(BandPoint {
                method,
                day,
                mean: mean(&peaks),
                min: peaks.iter().copied().fold(f64::INFINITY, f64::min),
                max: peaks.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    let find = |m: Method| methods.iter().find(|s| s.method == m).cloned();
    let (reference, bench, ofo) = (find(Method::Reference), find(Method::Benchmark), find(Method::Ofo));
    if let Some(r) = &reference {
        for s in &mut methods {
            s.reduction_vs_reference = Some((r.tail_mean_peak - s.tail_mean_peak) / r.tail_mean_peak);
        }
    }
    let (ratios, costs) = match (&reference, &bench, &ofo) {
        (Some(r), Some(b), Some(o)) => (
            Some(table_ratios(r.tail_mean_peak, b.tail_mean_peak, o.tail_mean_peak)),
            Some(cost_comparison(r.last_day_cost, o.last_day_cost, b.last_day_cost)),
        ),
        _ => (None, None),
    };
    Ok(Report {
        window,
        methods,
        ratios,
        costs,
        bands,
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut out = format!("last-{}-day mean daily peak\n", self.window);
        for s in &self.methods {
            out.push_str(&format!(
                "  {:<10} {:>10.2} kW  (runs {}, range {:.2}..{:.2})",
                s.method.as_str(),
                s.tail_mean_peak,
                s.runs,
                s.tail_min,
                s.tail_max
            ));
            if let Some(r) = s.reduction_vs_reference.filter(|_| s.method != Method::Reference) {
                out.push_str(&format!("  reduction {}", pct(r)));
            }
            out.push('\n');
        }
        if let Some(r) = &self.ratios {
            out.push_str(&format!(
                "gap to benchmark {}, gap relative to reference {}\n",
                pct(r.gap_to_bench),
                pct(r.gap_over_ref)
            ));
        }
        if let Some(c) = &self.costs {
            out.push_str(&format!(
                "last-day cost saving: ofo {}, benchmark {}, ofo vs benchmark {}\n",
                pct(c.ofo_saving),
                pct(c.bench_saving),
                pct(c.ofo_vs_bench)
            ));
        }
        out
    }

    /// `metric,method,value` rows.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,method,value\n");
        for s in &self.methods {
            let m = s.method.as_str();
            out.push_str(&format!("tail_mean_peak,{m},{}\n", fmt_f64(s.tail_mean_peak)));
            out.push_str(&format!("last_day_cost,{m},{}\n", fmt_f64(s.last_day_cost)));
            if let Some(r) = s.reduction_vs_reference {
                out.push_str(&format!("reduction_vs_reference,{m},{}\n", fmt_f64(r)));
            }
        }
        if let Some(r) = &self.ratios {
            out.push_str(&format!("gap_to_benchmark,ofo,{}\n", fmt_f64(r.gap_to_bench)));
            out.push_str(&format!("gap_over_reference,ofo,{}\n", fmt_f64(r.gap_over_ref)));
        }
        if let Some(c) = &self.costs {
            out.push_str(&format!("cost_saving,ofo,{}\n", fmt_f64(c.ofo_saving)));
            out.push_str(&format!("cost_saving,benchmark,{}\n", fmt_f64(c.bench_saving)));
            out.push_str(&format!("cost_vs_benchmark,ofo,{}\n", fmt_f64(c.ofo_vs_bench)));
        }
        out
    }

    /// `method,day,mean,min,max` rows.
    pub fn bands_csv(&self) -> String {
        let mut out = String::from("method,day,mean,min,max\n");
        for b in &self.bands {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.method.as_str(),
                b.day,
                fmt_f64(b.mean),
                fmt_f64(b.min),
                fmt_f64(b.max)
            ));
        }
        out
    }
}
