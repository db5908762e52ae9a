//! Multi-seed comparison of training schemes.

use std::fmt::Write as _;
use std::thread;

use crate::data::global_view;
use crate::error::{Error, Result};
use crate::experiment::{prepare, ExperimentConfig};
use crate::federation::{metrics_csv, RoundLog, Scheme};
use crate::moe::accuracy;

/// Outcome of one (config, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub label: String,
    pub scheme: Scheme,
    pub seed: u64,
    pub initial_loss: f64,
    pub target_loss: f64,
    /// Orbital cycles until the cycle-end global loss first reaches the target.
    pub cycles_to_target: Option<usize>,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub total_bytes_up: u64,
    pub max_loaded_params: usize,
    pub metrics_csv: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSummary {
    pub label: String,
    pub scheme: Scheme,
    pub seeds: usize,
    /// Seeds that reached the target.
    pub reached: usize,
    /// Mean and sample sd over seeds; infinite when some seed never reached the target.
    pub cycles_mean: f64,
    pub cycles_sd: f64,
    pub cycles_median: f64,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub bytes_mean: f64,
    pub bytes_sd: f64,
    pub loaded_mean: f64,
    pub loaded_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub summaries: Vec<SchemeSummary>,
    pub runs: Vec<RunRecord>,
}

/// First cycle whose closing round has global loss at or below `target`.
pub fn cycles_to_target(logs: &[RoundLog], cycle_len: usize, target: f64) -> Option<usize> {
    logs.iter()
        .filter(|l| l.round % cycle_len == 0)
        .find(|l| l.loss_global.is_some_and(|v| v <= target))
        .map(|l| l.round / cycle_len)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 || !mean.is_finite() {
        return (mean, if mean.is_finite() { 0.0 } else { f64::NAN });
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_one(label: &str, config: &ExperimentConfig, seed: u64) -> Result<RunRecord> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let prepared = prepare(&cfg)?;
    let out = prepared.run()?;
    let view = global_view(&prepared.datasets);
    let target = cfg.report.target_loss_fraction * out.initial_loss;
    let final_loss = out.logs.last().and_then(|l| l.loss_global).unwrap_or(out.initial_loss);
    Ok(RunRecord {
        label: label.to_string(),
        scheme: cfg.scheme,
        seed,
        initial_loss: out.initial_loss,
        target_loss: target,
        cycles_to_target: cycles_to_target(&out.logs, prepared.plan.cycle_len(), target),
        final_loss,
        final_accuracy: accuracy(&out.params, &view)?,
        total_bytes_up: out.logs.iter().map(|l| l.bytes_up).sum(),
        max_loaded_params: out.logs.iter().map(|l| l.params_loaded_max).max().unwrap_or(0),
        metrics_csv: metrics_csv(&out.logs),
    })
}

fn summarize(label: &str, scheme: Scheme, runs: &[&RunRecord]) -> SchemeSummary {
    let cycles: Vec<f64> = runs
        .iter()
        .map(|r| r.cycles_to_target.map_or(f64::INFINITY, |c| c as f64))
        .collect();
    let acc: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();
    let bytes: Vec<f64> = runs.iter().map(|r| r.total_bytes_up as f64).collect();
    let loaded: Vec<f64> = runs.iter().map(|r| r.max_loaded_params as f64).collect();
    let (cycles_mean, cycles_sd) = mean_sd(&cycles);
    let (accuracy_mean, accuracy_sd) = mean_sd(&acc);
    let (bytes_mean, bytes_sd) = mean_sd(&bytes);
    let (loaded_mean, loaded_sd) = mean_sd(&loaded);
    SchemeSummary {
        label: label.to_string(),
        scheme,
        seeds: runs.len(),
        reached: runs.iter().filter(|r| r.cycles_to_target.is_some()).count(),
        cycles_mean,
        cycles_sd,
        cycles_median: median(&cycles),
        accuracy_mean,
        accuracy_sd,
        bytes_mean,
        bytes_sd,
        loaded_mean,
        loaded_sd,
    }
}

/// Run every labelled config under every seed (the config's own seed is
/// replaced) and summarize per config. Runs execute on scoped threads; results
/// do not depend on scheduling.
pub fn compare_schemes(configs: &[(String, ExperimentConfig)], seeds: &[u64]) -> Result<ComparisonReport> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::Argument("need at least one config and one seed".into()));
    }
    let jobs: Vec<(&str, &ExperimentConfig, u64)> = configs
        .iter()
        .flat_map(|(l, c)| seeds.iter().map(move |&s| (l.as_str(), c, s)))
        .collect();
    let runs = thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(l, c, s)| scope.spawn(move || run_one(l, c, s)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("comparison run panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    let summaries = configs
        .iter()
        .enumerate()
        .map(|(i, (label, cfg))| {
            let mine: Vec<&RunRecord> = runs[i * seeds.len()..(i + 1) * seeds.len()].iter().collect();
            summarize(label, cfg.scheme, &mine)
        })
        .collect();
    Ok(ComparisonReport { summaries, runs })
}

pub const REPORT_HEADER: &str = "label,scheme,seeds,reached,cycles_to_target_mean,cycles_to_target_sd,\
cycles_to_target_median,final_accuracy_mean,final_accuracy_sd,uplink_bytes_mean,uplink_bytes_sd,\
max_loaded_params_mean,max_loaded_params_sd";

fn num(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        v.to_string()
    }
}

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for s in &self.summaries {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.label,
                s.scheme,
                s.seeds,
                s.reached,
                num(s.cycles_mean),
                num(s.cycles_sd),
                num(s.cycles_median),
                s.accuracy_mean,
                s.accuracy_sd,
                s.bytes_mean,
                s.bytes_sd,
                s.loaded_mean,
                s.loaded_sd
            )
            .unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.summaries {
            writeln!(out, "{} ({}), {} seeds", s.label, s.scheme, s.seeds).unwrap();
            if s.reached < s.seeds {
                writeln!(
                    out,
                    "  cycles to target:  inf [target not reached on {} of {} seeds]",
                    s.seeds - s.reached,
                    s.seeds
                )
                .unwrap();
            } else {
                writeln!(
                    out,
                    "  cycles to target:  {:.2} +/- {:.2} (median {})",
                    s.cycles_mean, s.cycles_sd, s.cycles_median
                )
                .unwrap();
            }
            writeln!(
                out,
                "  final accuracy:    {:.4} +/- {:.4}",
                s.accuracy_mean, s.accuracy_sd
            )
            .unwrap();
            writeln!(out, "  uplink bytes:      {:.0} +/- {:.0}", s.bytes_mean, s.bytes_sd).unwrap();
            writeln!(out, "  max loaded params: {:.0} +/- {:.0}", s.loaded_mean, s.loaded_sd).unwrap();
        }
        out
    }
}
