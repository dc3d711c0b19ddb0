//! Probabilistic marching squares: Monte Carlo level-crossing probability.
//!
//! For each cell, `r` vectors `x = μ + L z` are drawn from the cell's
//! Gaussian (`L` a Cholesky factor of the covariance, `z` standard normal)
//! and the fraction whose four values straddle the isovalue is returned.
//!
//! Reproducibility: cell `i` draws from the counter-based stream
//! `CounterRng::new(seed, i)`, consuming four uniforms (two Box–Muller
//! pairs, `z₀ z₁` then `z₂ z₃`) per sample. Results therefore do not depend
//! on traversal order or worker count, and a run with `r` samples uses a
//! prefix of the stream of a run with more samples.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::cellstats::{CellGaussian, CellStatsGrid};
use crate::rng::CounterRng;
use crate::sidecar::{read_f32_file, sidecar_path, write_f32_le};

#[derive(Debug, Error)]
pub enum PmcError {
    #[error("covariance not positive semi-definite after {retries} jitter retries")]
    NotPositiveSemiDefinite { retries: u32 },
    #[error("non-finite cell statistics")]
    NonFiniteInput,
    #[error("covariance has nonzero off-diagonal entries")]
    NotDiagonal,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed file {}: {msg}", .path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PmcError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    /// Samples per cell.
    pub r: usize,
    pub seed: u64,
    pub jitter_base: f64,
    pub jitter_retries: u32,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            r: 8000,
            seed: 0,
            jitter_base: 1e-9,
            jitter_retries: 3,
        }
    }
}

impl McConfig {
    pub fn new(r: usize, seed: u64) -> Self {
        Self {
            r,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(PmcError::InvalidConfig("r must be at least 1".into()));
        }
        if !(self.jitter_base > 0.0) || !self.jitter_base.is_finite() {
            return Err(PmcError::InvalidConfig("jitter_base must be positive".into()));
        }
        Ok(())
    }
}

/// Result of factoring a cell covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellFactor {
    /// Zero trace: the cell is its mean, no sampling needed.
    Deterministic,
    /// Lower-triangular `l` with `l lᵀ = C + jitter I`.
    Gaussian { l: [[f64; 4]; 4], jitter: f64 },
}

/// Pivots at or below this fraction of the largest diagonal entry count as
/// a failed factorization.
const PIVOT_RTOL: f64 = 1e-12;

fn cholesky4(m: &[[f64; 4]; 4], shift: f64) -> Option<[[f64; 4]; 4]> {
    let max_diag = (0..4).map(|i| m[i][i] + shift).fold(0.0, f64::max);
    let min_pivot = PIVOT_RTOL * max_diag;
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut s = m[i][j];
            if i == j {
                s += shift;
            }
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > min_pivot) || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

/// Cholesky factor with a jitter ladder for singular covariances.
///
/// Tries the plain factorization first, then adds
/// `jitter_base * (trace / 4) * 10^attempt` to the diagonal for
/// `attempt = 0 .. jitter_retries`.
pub fn cholesky_psd(cell: &CellGaussian, cfg: &McConfig) -> Result<CellFactor> {
    if !cell.is_finite() {
        return Err(PmcError::NonFiniteInput);
    }
    let trace = cell.trace();
    if trace == 0.0 {
        return Ok(CellFactor::Deterministic);
    }
    let m = cell.matrix();
    if let Some(l) = cholesky4(&m, 0.0) {
        return Ok(CellFactor::Gaussian { l, jitter: 0.0 });
    }
    let scale = cfg.jitter_base * trace / 4.0;
    for attempt in 0..cfg.jitter_retries {
        let jitter = scale * 10f64.powi(attempt as i32);
        if let Some(l) = cholesky4(&m, jitter) {
            return Ok(CellFactor::Gaussian { l, jitter });
        }
    }
    Err(PmcError::NotPositiveSemiDefinite {
        retries: cfg.jitter_retries,
    })
}

/// True unless all four values lie strictly on one side of the isovalue.
#[inline]
pub fn crossing_test(values: &[f64; 4], isovalue: f64) -> bool {
    let all_above = values.iter().all(|&v| v > isovalue);
    let all_below = values.iter().all(|&v| v < isovalue);
    !(all_above || all_below)
}

/// Counts crossings for several isovalues from one shared set of draws.
/// `counts[j]` receives the count for `isovalues[j]`.
fn count_crossings(
    cell: &CellGaussian,
    isovalues: &[f64],
    cfg: &McConfig,
    cell_index: u64,
    counts: &mut [u32],
) -> Result<bool> {
    let factor = cholesky_psd(cell, cfg)?;
    counts.iter_mut().for_each(|c| *c = 0);
    let l = match factor {
        CellFactor::Deterministic => {
            for (c, &s) in counts.iter_mut().zip(isovalues) {
                *c = crossing_test(&cell.mu, s) as u32;
            }
            return Ok(false);
        }
        CellFactor::Gaussian { l, .. } => l,
    };
    let mu = cell.mu;
    let mut rng = CounterRng::new(cfg.seed, cell_index);
    for _ in 0..cfg.r {
        let (z0, z1) = rng.next_normal_pair();
        let (z2, z3) = rng.next_normal_pair();
        let x0 = mu[0] + l[0][0] * z0;
        let x1 = mu[1] + l[1][0] * z0 + l[1][1] * z1;
        let x2 = mu[2] + l[2][0] * z0 + l[2][1] * z1 + l[2][2] * z2;
        let x3 = mu[3] + l[3][0] * z0 + l[3][1] * z1 + l[3][2] * z2 + l[3][3] * z3;
        let lo = x0.min(x1).min(x2.min(x3));
        let hi = x0.max(x1).max(x2.max(x3));
        // crossing_test(x, s) <=> lo <= s <= hi
        for (c, &s) in counts.iter_mut().zip(isovalues) {
            *c += (lo <= s && s <= hi) as u32;
        }
    }
    Ok(true)
}

/// Monte Carlo LCP `k / r` of one cell. Deterministic cells return 0 or 1
/// from the crossing test on their means without sampling.
pub fn cell_lcp_mc(cell: &CellGaussian, isovalue: f64, cfg: &McConfig, cell_index: u64) -> Result<f64> {
    cfg.validate()?;
    let mut k = [0u32];
    let sampled = count_crossings(cell, &[isovalue], cfg, cell_index, &mut k)?;
    Ok(if sampled {
        k[0] as f64 / cfg.r as f64
    } else {
        k[0] as f64
    })
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact LCP for independent vertices: `1 - Π bᵢ - Π (1 - bᵢ)` with
/// `bᵢ = P(Yᵢ < s)`.
pub fn cell_lcp_closed_form_diag(cell: &CellGaussian, isovalue: f64) -> Result<f64> {
    if !cell.is_finite() {
        return Err(PmcError::NonFiniteInput);
    }
    if !cell.is_diagonal() {
        return Err(PmcError::NotDiagonal);
    }
    let below: [f64; 4] = std::array::from_fn(|i| {
        let var = cell.cov[i];
        if var == 0.0 {
            if isovalue > cell.mu[i] {
                1.0
            } else {
                0.0
            }
        } else {
            normal_cdf((isovalue - cell.mu[i]) / var.sqrt())
        }
    });
    let all_below: f64 = below.iter().product();
    let all_above: f64 = below.iter().map(|b| 1.0 - b).product();
    Ok(1.0 - all_below - all_above)
}

/// Row-major grid of crossing probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LcpField {
    pub cells_w: usize,
    pub cells_h: usize,
    pub probs: Vec<f32>,
}

impl LcpField {
    pub fn zeros(cells_w: usize, cells_h: usize) -> Self {
        Self {
            cells_w,
            cells_h,
            probs: vec![0.0; cells_w * cells_h],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    #[inline]
    pub fn at(&self, cx: usize, cy: usize) -> f32 {
        self.probs[cy * self.cells_w + cx]
    }
}

fn lcp_row(stats: &CellStatsGrid, isovalue: f64, cfg: &McConfig, first: usize, out: &mut [f32]) -> Result<()> {
    for (j, p) in out.iter_mut().enumerate() {
        let idx = first + j;
        *p = cell_lcp_mc(&stats.cells[idx], isovalue, cfg, idx as u64)? as f32;
    }
    Ok(())
}

/// LCP of every cell on the calling thread; cell index is the row-major index.
pub fn lcp_field_serial(stats: &CellStatsGrid, isovalue: f64, cfg: &McConfig) -> Result<LcpField> {
    cfg.validate()?;
    let mut field = LcpField::zeros(stats.cells_w, stats.cells_h);
    lcp_row(stats, isovalue, cfg, 0, &mut field.probs)?;
    Ok(field)
}

/// Same result as [`lcp_field_serial`], computed over contiguous row blocks
/// on `workers` threads.
pub fn lcp_field_parallel(
    stats: &CellStatsGrid,
    isovalue: f64,
    cfg: &McConfig,
    workers: usize,
) -> Result<LcpField> {
    cfg.validate()?;
    if workers < 1 {
        return Err(PmcError::InvalidConfig("workers must be at least 1".into()));
    }
    let mut field = LcpField::zeros(stats.cells_w, stats.cells_h);
    if field.is_empty() {
        return Ok(field);
    }
    // a few blocks per worker so uneven rows still balance
    let rows_per_block = stats.cells_h.div_ceil(4 * workers).max(1);
    let block_len = rows_per_block * stats.cells_w;
    // first failing block wins, matching the serial error
    let first_error: std::sync::Mutex<Option<(usize, PmcError)>> = Default::default();
    crate::par::with_workers(workers, || {
        crate::par::for_each_chunk(&mut field.probs, block_len, |block, out| {
            if let Err(e) = lcp_row(stats, isovalue, cfg, block * block_len, out) {
                let mut slot = first_error.lock().unwrap();
                if slot.as_ref().is_none_or(|(b, _)| block < *b) {
                    *slot = Some((block, e));
                }
            }
        })
    });
    if let Some((_, e)) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(field)
}

/// One field per isovalue, sharing the draws of each cell across isovalues.
/// Each field equals `lcp_field_serial(stats, isovalues[j], cfg)` exactly.
pub fn lcp_fields_multi(stats: &CellStatsGrid, isovalues: &[f64], cfg: &McConfig) -> Result<Vec<LcpField>> {
    cfg.validate()?;
    let n_iso = isovalues.len();
    let per_cell: Vec<Result<Vec<u32>>> = crate::par::map_indices(stats.len(), |idx| {
        let mut counts = vec![0u32; n_iso];
        let sampled = count_crossings(&stats.cells[idx], isovalues, cfg, idx as u64, &mut counts)?;
        if !sampled {
            // deterministic cells report 0/1 indicators; scale to k = p * r
            counts.iter_mut().for_each(|c| *c *= cfg.r as u32);
        }
        Ok(counts)
    });
    let mut fields = vec![LcpField::zeros(stats.cells_w, stats.cells_h); n_iso];
    for (idx, counts) in per_cell.into_iter().enumerate() {
        for (field, k) in fields.iter_mut().zip(counts?) {
            field.probs[idx] = (k as f64 / cfg.r as f64) as f32;
        }
    }
    Ok(fields)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldMethod {
    #[serde(rename = "mc-serial")]
    McSerial,
    #[serde(rename = "mc-parallel")]
    McParallel,
    #[serde(rename = "surrogate")]
    Surrogate,
}

/// Sidecar of a saved [`LcpField`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcpMeta {
    pub cells_w: usize,
    pub cells_h: usize,
    pub isovalue: f64,
    pub r: usize,
    pub seed: u64,
    pub method: FieldMethod,
}

pub fn save_lcp_field(path: &Path, field: &LcpField, meta: &LcpMeta) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_f32_le(std::io::BufWriter::new(f), field.probs.iter().copied())?;
    let meta = LcpMeta {
        cells_w: field.cells_w,
        cells_h: field.cells_h,
        ..meta.clone()
    };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&meta).expect("plain struct"),
    )?;
    Ok(())
}

pub fn load_lcp_field(path: &Path) -> Result<(LcpField, LcpMeta)> {
    let format = |msg: String| PmcError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let meta: LcpMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)
        .map_err(|e| format(e.to_string()))?;
    let (probs, bytes) = read_f32_file(path)?;
    let expected = 4 * meta.cells_w * meta.cells_h;
    if bytes != expected {
        return Err(format(format!("expected {expected} bytes, found {bytes}")));
    }
    if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(format(format!("value {} at {i} outside [0, 1]", probs[i])));
    }
    Ok((
        LcpField {
            cells_w: meta.cells_w,
            cells_h: meta.cells_h,
            probs,
        },
        meta,
    ))
}
