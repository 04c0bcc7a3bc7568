//! Ablation sweeps: one training run per (value, seed), aggregated into a
//! mean ± std table.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, RoutingMode};
use crate::synth_data::Dataset;
use crate::trainer::{self, EpochLog, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Number of experts `K`.
    Experts,
    /// Selected experts `k`.
    Topk,
    /// Weight of the CV² term.
    Balance,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Experts => "experts",
            SweepAxis::Topk => "topk",
            SweepAxis::Balance => "balance",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        let as_count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::config(format!("{} value {v} is not a positive integer", self.name())))
            }
        };
        match self {
            SweepAxis::Experts => {
                cfg.model.experts = as_count(value)?;
                cfg.model.topk = cfg.model.topk.min(cfg.model.experts);
            }
            SweepAxis::Topk => cfg.model.topk = as_count(value)?,
            SweepAxis::Balance => cfg.balance_weight = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "experts" => Ok(SweepAxis::Experts),
            "topk" => Ok(SweepAxis::Topk),
            "balance" => Ok(SweepAxis::Balance),
            other => Err(Error::config(format!("unknown sweep axis {other}"))),
        }
    }
}

/// Result of one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub value: f64,
    pub seed: u64,
    pub seconds: f64,
    pub report: Option<EvalReport>,
    pub last_epoch: Option<EpochLog>,
    pub error: Option<String>,
}

/// Trains `cfg` and evaluates the final model on `val`.
pub fn run_one(cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<(EvalReport, Option<EpochLog>)> {
    let out = trainer::train(cfg, train, val)?;
    let report = metrics::evaluate(&out.checkpoint.model, val, RoutingMode::Mean)?;
    Ok((report, out.log.last().cloned()))
}

/// Runs every (value, seed) pair in order. Failures are recorded, not
/// raised.
pub fn run_sweep(
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    base: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    mut on_run: impl FnMut(&RunRecord),
) -> Vec<RunRecord> {
    let mut runs = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        for &seed in seeds {
            let start = Instant::now();
            let outcome = axis.apply(base, value).and_then(|mut cfg| {
                cfg.seed = seed;
                run_one(&cfg, train, val)
            });
            let seconds = start.elapsed().as_secs_f64();
            let rec = match outcome {
                Ok((report, last)) => RunRecord {
                    value,
                    seed,
                    seconds,
                    report: Some(report),
                    last_epoch: last,
                    error: None,
                },
                Err(e) => RunRecord {
                    value,
                    seed,
                    seconds,
                    report: None,
                    last_epoch: None,
                    error: Some(e.to_string()),
                },
            };
            on_run(&rec);
            runs.push(rec);
        }
    }
    runs
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub axis: String,
    pub value: f64,
    pub runs: usize,
    pub failures: usize,
    pub miou_full_mean: f64,
    pub miou_full_std: f64,
    pub miou_occ_mean: f64,
    pub miou_occ_std: f64,
    pub entropy_mean: f64,
    pub purity_mean: f64,
}

/// One row per value, aggregated over seeds.
pub fn summarize(axis: SweepAxis, values: &[f64], runs: &[RunRecord]) -> Vec<SummaryRow> {
    values
        .iter()
        .map(|&value| {
            let group: Vec<&RunRecord> = runs.iter().filter(|r| r.value == value).collect();
            let reports: Vec<&EvalReport> = group.iter().filter_map(|r| r.report.as_ref()).collect();
            let pick = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(|r| f(r)).collect() };
            let (full_m, full_s) = mean_std(&pick(&|r| Some(r.miou_full)));
            let (occ_m, occ_s) = mean_std(&pick(&|r| r.miou_occ));
            SummaryRow {
                axis: axis.name().into(),
                value,
                runs: group.len(),
                failures: group.len() - reports.len(),
                miou_full_mean: full_m,
                miou_full_std: full_s,
                miou_occ_mean: occ_m,
                miou_occ_std: occ_s,
                entropy_mean: mean_std(&pick(&|r| Some(r.utilization_entropy_normalized))).0,
                purity_mean: mean_std(&pick(&|r| Some(r.purity))).0,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
