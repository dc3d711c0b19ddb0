//! Error statistics and timing of the Monte Carlo and surrogate routes.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellstats::{CellStatsGrid, TrainingSample};
use crate::pmc::{self, LcpField, McConfig, PmcError};
use crate::surrogate::{self, MlpConfig, MlpModel, SurrogateError, TrainConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("field dimensions differ: {0:?} vs {1:?}")]
    DimMismatch((usize, usize), (usize, usize)),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Pmc(#[from] PmcError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const HISTOGRAM_BINS: usize = 32;

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Summary of pixel-wise absolute errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean: f64,
    pub max: f64,
    /// Counts over `HISTOGRAM_BINS` equal bins of `[0, 1]`.
    pub histogram: Vec<u64>,
}

impl ErrorReport {
    pub fn from_abs_errors(mut errors: Vec<f64>) -> Self {
        errors.sort_by(f64::total_cmp);
        let mut histogram = vec![0u64; HISTOGRAM_BINS];
        for &e in &errors {
            let bin = ((e * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            histogram[bin] += 1;
        }
        let mean = if errors.is_empty() {
            0.0
        } else {
            errors.iter().sum::<f64>() / errors.len() as f64
        };
        Self {
            count: errors.len(),
            q1: quantile_sorted(&errors, 0.25),
            median: quantile_sorted(&errors, 0.5),
            q3: quantile_sorted(&errors, 0.75),
            mean,
            max: errors.last().copied().unwrap_or(0.0),
            histogram,
        }
    }

    pub const CSV_HEADER: &'static str = "count,q1,median,q3,mean,max";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.count, self.q1, self.median, self.q3, self.mean, self.max
        )
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row()))
    }

    pub fn write_histogram_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        let width = 1.0 / HISTOGRAM_BINS as f64;
        for (i, c) in self.histogram.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i as f64 * width, (i + 1) as f64 * width, c));
        }
        std::fs::write(path, out)
    }
}

fn abs_diffs(pred: &LcpField, truth: &LcpField) -> Result<Vec<f64>> {
    if (pred.cells_w, pred.cells_h) != (truth.cells_w, truth.cells_h) || pred.len() != truth.len() {
        return Err(EvalError::DimMismatch(
            (pred.cells_w, pred.cells_h),
            (truth.cells_w, truth.cells_h),
        ));
    }
    Ok(pred
        .probs
        .iter()
        .zip(&truth.probs)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .collect())
}

pub fn error_report(pred: &LcpField, truth: &LcpField) -> Result<ErrorReport> {
    Ok(ErrorReport::from_abs_errors(abs_diffs(pred, truth)?))
}

/// One evaluation field: statistics, isovalue and Monte Carlo ground truth.
#[derive(Debug, Clone)]
pub struct HeldoutCase {
    pub stats: CellStatsGrid,
    pub isovalue: f64,
    pub truth: LcpField,
}

/// Pooled error of `model` over every held-out case.
pub fn evaluate(model: &MlpModel, cases: &[HeldoutCase]) -> Result<ErrorReport> {
    let mut errors = Vec::new();
    for case in cases {
        let pred = surrogate::predict_field(model, &case.stats, case.isovalue)?;
        errors.extend(abs_diffs(&pred, &case.truth)?);
    }
    Ok(ErrorReport::from_abs_errors(errors))
}

/// Trains on the first `ceil(f * N)` samples for each fraction `f` and
/// evaluates on `heldout`. Reports are returned in fraction order.
pub fn ablate_training_size(
    samples: &[TrainingSample],
    fractions: &[f64],
    mcfg: &MlpConfig,
    tcfg: &TrainConfig,
    heldout: &[HeldoutCase],
) -> Result<Vec<(f64, ErrorReport)>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(EvalError::InvalidArgument(format!("fraction {f} outside (0, 1]")));
    }
    let n = samples.len();
    fractions
        .iter()
        .map(|&f| {
            // tolerate 0.3 * 10 = 3.0000000000000004
            let take = ((f * n as f64) - 1e-9).ceil().max(1.0) as usize;
            let (model, _) = surrogate::train(&samples[..take.min(n)], mcfg, tcfg)?;
            Ok((f, evaluate(&model, heldout)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchMethod {
    #[serde(rename = "mc-serial")]
    McSerial,
    #[serde(rename = "mc-parallel")]
    McParallel,
    #[serde(rename = "surrogate-cpu")]
    SurrogateCpu,
}

impl BenchMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::McSerial => "mc-serial",
            Self::McParallel => "mc-parallel",
            Self::SurrogateCpu => "surrogate-cpu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: BenchMethod,
    /// Monte Carlo sample count; for surrogate rows, the sweep point it pairs with.
    pub r: usize,
    pub workers: usize,
    pub load_data_seconds: f64,
    pub compute_seconds: f64,
    pub model_load_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub const CSV_HEADER: &'static str = "method,r,workers,load_s,compute_s,model_load_s";

    pub fn row(&self, method: BenchMethod, r: usize) -> Option<&TimingRow> {
        self.rows.iter().find(|row| row.method == method && row.r == r)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.method.as_str(),
                row.r,
                row.workers,
                row.load_data_seconds,
                row.compute_seconds,
                row.model_load_seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub isovalue: f64,
    pub r_values: Vec<usize>,
    pub workers: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            isovalue: 0.5,
            r_values: vec![1000, 2000, 4000, 8000],
            workers: crate::par::available_workers(),
            repetitions: 3,
            seed: 0,
        }
    }
}

/// Best of `repetitions` wall-clock timings on a monotonic clock.
fn best_of<T>(repetitions: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repetitions {
        let start = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times serial MC, parallel MC and (when `model_path` is given) surrogate
/// prediction at every `r`. `load_data_seconds` is the caller's measured
/// cost of reading the data and computing `stats`; the model is loaded once
/// and its load time is reported on every surrogate row.
pub fn bench(
    stats: &CellStatsGrid,
    cfg: &BenchConfig,
    model_path: Option<&Path>,
    load_data_seconds: f64,
) -> Result<TimingReport> {
    if cfg.repetitions < 1 || cfg.workers < 1 {
        return Err(EvalError::InvalidArgument(
            "repetitions and workers must be at least 1".into(),
        ));
    }
    let model = match model_path {
        Some(p) => {
            let start = Instant::now();
            let m = surrogate::load_model(p)?;
            Some((m, start.elapsed().as_secs_f64()))
        }
        None => None,
    };
    let mut report = TimingReport::default();
    for &r in &cfg.r_values {
        let mc = McConfig::new(r, cfg.seed);
        let serial = best_of(cfg.repetitions, || Ok(pmc::lcp_field_serial(stats, cfg.isovalue, &mc)?))?;
        report.rows.push(TimingRow {
            method: BenchMethod::McSerial,
            r,
            workers: 1,
            load_data_seconds,
            compute_seconds: serial,
            model_load_seconds: 0.0,
        });
        let parallel = best_of(cfg.repetitions, || {
            Ok(pmc::lcp_field_parallel(stats, cfg.isovalue, &mc, cfg.workers)?)
        })?;
        report.rows.push(TimingRow {
            method: BenchMethod::McParallel,
            r,
            workers: cfg.workers,
            load_data_seconds,
            compute_seconds: parallel,
            model_load_seconds: 0.0,
        });
        if let Some((model, load_s)) = &model {
            let t = best_of(cfg.repetitions, || {
                crate::par::with_workers(cfg.workers, || {
                    Ok(surrogate::predict_field(model, stats, cfg.isovalue)?)
                })
            })?;
            report.rows.push(TimingRow {
                method: BenchMethod::SurrogateCpu,
                r,
                workers: cfg.workers,
                load_data_seconds,
                compute_seconds: t,
                model_load_seconds: *load_s,
            });
        }
    }
    Ok(report)
}
