use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ofo_core::agent::AgentMode;
use ofo_core::benchmark::solve_benchmark_with;
use ofo_core::domain::io::{read_tariff, write_matrix, write_scenario, write_tariff, IoError};
use ofo_core::domain::{validate_scenario, FleetScenario, PriceVector};
use ofo_core::linalg::Matrix;
use ofo_core::sensitivity::{collect_warmstart_history, warm_start};
use ofo_core::simkit::persist::plot_data_csv;
use ofo_core::simkit::{
    apply_mismatch, compute_report, cost_comparison, read_trace, run_experiment_suite, run_fixed_price, table_ratios, write_trace,
    Method, MismatchSpec, OfoSetup, RunSeeds, RunTrace,
};

use crate::config::RunConfigFile;
use crate::error::CliError;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(IoError::from)?;
    write_text(path, &text)
}

pub fn generate(cfg: &RunConfigFile, out: &Path) -> Result<(), CliError> {
    if cfg.scenario.evs == 0 && cfg.scenario.path.is_none() {
        warn!("generating an empty fleet (0 sessions)");
    }
    let sc = cfg.load_scenario()?;
    let report = validate_scenario(&sc, &cfg.dso.bounds);
    if !report.is_valid() {
        return Err(CliError::Usage(format!("scenario failed validation:\n  {}", report.issues.join("\n  "))));
    }
    let tariff = cfg.load_tariff(sc.grid)?;
    create_dir(out)?;
    write_scenario(&out.join("scenario.json"), &sc)?;
    write_tariff(&out.join("tariff.csv"), &tariff)?;
    println!("{} sessions on {} steps written to {}", sc.sessions.len(), sc.steps(), out.display());
    Ok(())
}

fn estimate_h0(cfg: &RunConfigFile, sc: &FleetScenario<f64>, p_ref: &PriceVector<f64>) -> Result<Matrix<f64>, CliError> {
    let ws = &cfg.warmstart;
    if ws.sigma == 0.0 {
        warn!("warm-start sigma is 0: the history carries no excitation and H0 is the ridge-regularized zero matrix");
    }
    let hist = collect_warmstart_history(sc, p_ref, &cfg.dso.bounds, ws.sigma, ws.days, ws.seed, &AgentMode::Exact)?;
    Ok(warm_start(&hist.dp, &hist.dl, ws.ridge)?)
}

pub fn warmstart(cfg: &RunConfigFile, out: &Path) -> Result<(), CliError> {
    let sc = cfg.load_scenario()?;
    let p_ref = cfg.load_tariff(sc.grid)?;
    let h0 = estimate_h0(cfg, &sc, &p_ref)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_matrix(out, &h0)?;
    println!("{n}x{n} sensitivity estimate written to {}", out.display(), n = h0.rows());
    Ok(())
}

fn benchmark_price(cfg: &RunConfigFile, sc: &FleetScenario<f64>, p_ref: &PriceVector<f64>) -> Result<PriceVector<f64>, CliError> {
    if let Some(path) = &cfg.experiment.price {
        let p = read_tariff(path)?;
        p.check_len(sc.steps())?;
        return Ok(p);
    }
    info!("solving the benchmark price on the nominal fleet");
    let b = &cfg.benchmark;
    Ok(solve_benchmark_with(sc, p_ref, &cfg.dso, b.starts, b.seed, &b.options)?.price)
}

pub fn simulate(cfg: &RunConfigFile, out: &Path) -> Result<(), CliError> {
    let exp = &cfg.experiment;
    let nominal = cfg.load_scenario()?;
    let p_ref = cfg.load_tariff(nominal.grid)?;
    // the operator's models are built from the nominal fleet; only the plant is shifted
    let plant = if exp.mismatch != 0 {
        apply_mismatch(&nominal, MismatchSpec { shift_steps: exp.mismatch })?
    } else {
        nominal.clone()
    };
    let traces: Vec<RunTrace> = match exp.method {
        Method::Ofo => {
            let h0 = match cfg.load_h0(nominal.steps())? {
                Some(h) => h,
                None => estimate_h0(cfg, &nominal, &p_ref)?,
            };
            let setup = OfoSetup {
                scenario: &plant,
                p_ref: &p_ref,
                dso: &cfg.dso,
                osl: &cfg.osl,
                h0: &h0,
                days: exp.days,
                agent: AgentMode::Exact,
            };
            let seeds = RunSeeds::from_base(exp.seed, &plant);
            run_experiment_suite(&setup, &seeds, exp.runs, exp.perturbation_sigma)?
        }
        method => {
            if exp.runs > 1 {
                warn!("{} prices are fixed; writing a single run", method.as_str());
            }
            let price = match method {
                Method::Benchmark => benchmark_price(cfg, &nominal, &p_ref)?,
                _ => p_ref.clone(),
            };
            vec![run_fixed_price(&plant, &p_ref, &price, &cfg.dso, exp.days, method, AgentMode::Exact)?]
        }
    };
    create_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    for t in &traces {
        let dir = out.join(format!("{}_{}", t.method.as_str(), t.run_index));
        write_trace(&dir, t)?;
        let window = exp.window.min(t.records.len());
        println!(
            "{} run {}: last-{window}-day mean peak {:.2} kW -> {}",
            t.method.as_str(),
            t.run_index,
            t.tail_mean_peak(window)?,
            dir.display()
        );
    }
    Ok(())
}

pub fn benchmark(cfg: &RunConfigFile, out: &Path) -> Result<(), CliError> {
    let sc = cfg.load_scenario()?;
    let p_ref = cfg.load_tariff(sc.grid)?;
    let b = &cfg.benchmark;
    let result = solve_benchmark_with(&sc, &p_ref, &cfg.dso, b.starts, b.seed, &b.options)?;
    create_dir(out)?;
    write_tariff(&out.join("price.csv"), &result.price)?;
    write_json(&out.join("benchmark.json"), &result)?;
    println!(
        "benchmark objective {:.6}, predicted peak {:.2} kW, best of {} starts: {} -> {}",
        result.objective,
        result.predicted_load.max(),
        result.starts,
        result.best_start_index,
        out.display()
    );
    Ok(())
}

fn collect_traces(paths: &[PathBuf]) -> Result<Vec<RunTrace>, CliError> {
    let mut traces = Vec::new();
    for p in paths {
        if p.join("meta.json").is_file() {
            traces.push(read_trace(p)?);
            continue;
        }
        let entries = fs::read_dir(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|d| d.join("meta.json").is_file())
            .collect();
        if dirs.is_empty() {
            return Err(CliError::Usage(format!("{}: no trace directories found", p.display())));
        }
        dirs.sort();
        for d in dirs {
            traces.push(read_trace(&d)?);
        }
    }
    Ok(traces)
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

pub fn report(
    paths: &[PathBuf],
    window: usize,
    out: Option<&Path>,
    peaks: Option<&[f64]>,
    costs: Option<&[f64]>,
) -> Result<(), CliError> {
    let direct = peaks.is_some() || costs.is_some();
    for (flag, v) in [("--peaks", peaks), ("--costs", costs)] {
        if v.is_some_and(|v| v.len() != 3) {
            return Err(CliError::Usage(format!("{flag} takes exactly three comma-separated values")));
        }
    }
    if let Some(&[r, b, o]) = peaks {
        if !(r > 0.0 && b > 0.0) {
            return Err(CliError::Usage("--peaks needs positive reference and benchmark values".into()));
        }
        let t = table_ratios(r, b, o);
        println!(
            "reduction vs reference: benchmark {}, ofo {}; ofo over benchmark {}, gap relative to reference {}",
            pct(t.bench_reduction),
            pct(t.ofo_reduction),
            pct(t.gap_to_bench),
            pct(t.gap_over_ref)
        );
    }
    if let Some(&[r, o, b]) = costs {
        if !(r > 0.0 && b > 0.0) {
            return Err(CliError::Usage("--costs needs positive reference and benchmark values".into()));
        }
        let c = cost_comparison(r, o, b);
        println!(
            "cost saving vs reference: ofo {}, benchmark {}; ofo vs benchmark {}",
            pct(c.ofo_saving),
            pct(c.bench_saving),
            pct(c.ofo_vs_bench)
        );
    }
    if paths.is_empty() {
        return if direct {
            Ok(())
        } else {
            Err(CliError::Usage("nothing to report: pass trace directories, --peaks or --costs".into()))
        };
    }
    let traces = collect_traces(paths)?;
    let rep = compute_report(&traces, window)?;
    let text = rep.to_text();
    print!("{text}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("summary.txt"), &text)?;
        write_text(&dir.join("summary.csv"), &rep.summary_csv())?;
        write_text(&dir.join("bands.csv"), &rep.bands_csv())?;
        write_text(&dir.join("plot_data.csv"), &plot_data_csv(&traces))?;
    }
    Ok(())
}
