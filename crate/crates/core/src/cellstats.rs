//! Per-cell ensemble statistics and the 16-value training layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::EnsembleDataset;
use crate::pmc::{self, McConfig, PmcError};
use crate::sidecar::{read_f32_file, sidecar_path, write_f32_le};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("need at least 2 ensemble members, got {0}")]
    TooFewMembers(usize),
    #[error("LCP label {0} outside [0, 1]")]
    OutOfRangeLcp(f64),
    #[error("malformed file {}: {msg}", .path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Pmc(#[from] PmcError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Offsets of the cell's four vertices, counterclockwise from the lower-left.
pub const VERTEX_OFFSETS: [(usize, usize); 4] = [(0, 0), (1, 0), (1, 1), (0, 1)];

/// Packed position `k` holds the covariance of vertex pair `COV_PAIRS[k]`.
pub const COV_PAIRS: [(usize, usize); 10] = [
    (0, 0),
    (1, 1),
    (2, 2),
    (3, 3),
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 2),
    (1, 3),
    (2, 3),
];

/// Gaussian model of one cell: vertex means and the packed covariance
/// `[σ²₀, σ²₁, σ²₂, σ²₃, C₀₁, C₀₂, C₀₃, C₁₂, C₁₃, C₂₃]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CellGaussian {
    pub mu: [f64; 4],
    pub cov: [f64; 10],
}

impl CellGaussian {
    pub fn matrix(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for (k, &(i, j)) in COV_PAIRS.iter().enumerate() {
            m[i][j] = self.cov[k];
            m[j][i] = self.cov[k];
        }
        m
    }

    pub fn trace(&self) -> f64 {
        self.cov[..4].iter().sum()
    }

    pub fn is_diagonal(&self) -> bool {
        self.cov[4..].iter().all(|&c| c == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.cov).all(|v| v.is_finite())
    }

    /// Relabels vertices: new vertex `i` is old vertex `perm[i]`.
    pub fn permuted(&self, perm: [usize; 4]) -> CellGaussian {
        let m = self.matrix();
        let mut out = CellGaussian {
            mu: perm.map(|p| self.mu[p]),
            cov: [0.0; 10],
        };
        for (k, &(i, j)) in COV_PAIRS.iter().enumerate() {
            out.cov[k] = m[perm[i]][perm[j]];
        }
        out
    }

    /// The 14 moment features in training order.
    pub fn features(&self) -> [f64; 14] {
        let mut f = [0.0; 14];
        f[..4].copy_from_slice(&self.mu);
        f[4..].copy_from_slice(&self.cov);
        f
    }
}

/// Statistics of every cell of one timestep, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStatsGrid {
    pub cells_w: usize,
    pub cells_h: usize,
    pub cells: Vec<CellGaussian>,
}

impl CellStatsGrid {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    #[inline]
    pub fn cell(&self, cx: usize, cy: usize) -> &CellGaussian {
        &self.cells[cy * self.cells_w + cx]
    }
}

fn check_cell(dataset: &EnsembleDataset, t: usize, cx: usize, cy: usize) -> Result<()> {
    if dataset.members < 2 {
        return Err(StatsError::TooFewMembers(dataset.members));
    }
    if t >= dataset.timesteps {
        return Err(StatsError::OutOfRange(format!(
            "timestep {t} of {}",
            dataset.timesteps
        )));
    }
    if cx + 1 >= dataset.width || cy + 1 >= dataset.height {
        return Err(StatsError::OutOfRange(format!(
            "cell ({cx}, {cy}) outside {}x{} cells",
            dataset.width - 1,
            dataset.height - 1
        )));
    }
    Ok(())
}

fn cell_statistics_unchecked(dataset: &EnsembleDataset, t: usize, cx: usize, cy: usize) -> CellGaussian {
    let m_count = dataset.members;
    let sample = |m: usize, i: usize| {
        let (dx, dy) = VERTEX_OFFSETS[i];
        dataset.field(m, t).at(cx + dx, cy + dy)
    };
    // shifted by member 0 so identical members give exactly zero deviations
    let origin: [f64; 4] = std::array::from_fn(|i| sample(0, i));
    let mut mu = [0.0; 4];
    for (i, mu_i) in mu.iter_mut().enumerate() {
        let mut s = 0.0;
        for m in 0..m_count {
            s += sample(m, i) - origin[i];
        }
        *mu_i = origin[i] + s / m_count as f64;
    }
    let mut cov = [0.0; 10];
    for m in 0..m_count {
        let d: [f64; 4] = std::array::from_fn(|i| sample(m, i) - mu[i]);
        for (k, &(i, j)) in COV_PAIRS.iter().enumerate() {
            cov[k] += d[i] * d[j];
        }
    }
    let bessel = 1.0 / (m_count - 1) as f64;
    for c in &mut cov {
        *c *= bessel;
    }
    CellGaussian { mu, cov }
}

/// Sample mean and Bessel-corrected covariance of one cell's four vertices.
pub fn cell_statistics(
    dataset: &EnsembleDataset,
    t: usize,
    cx: usize,
    cy: usize,
) -> Result<CellGaussian> {
    check_cell(dataset, t, cx, cy)?;
    Ok(cell_statistics_unchecked(dataset, t, cx, cy))
}

/// [`cell_statistics`] over every cell of timestep `t`.
pub fn field_statistics(dataset: &EnsembleDataset, t: usize) -> Result<CellStatsGrid> {
    check_cell(dataset, t, 0, 0)?;
    let (cells_w, cells_h) = (dataset.width - 1, dataset.height - 1);
    let mut cells = vec![CellGaussian::default(); cells_w * cells_h];
    crate::par::for_each_chunk(&mut cells, cells_w, |cy, row| {
        for (cx, c) in row.iter_mut().enumerate() {
            *c = cell_statistics_unchecked(dataset, t, cx, cy);
        }
    });
    Ok(CellStatsGrid {
        cells_w,
        cells_h,
        cells,
    })
}

/// One training record: `[μ₀..μ₃, σ²₀..σ²₃, C₀₁, C₀₂, C₀₃, C₁₂, C₁₃, C₂₃, s, p]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample(pub [f32; 16]);

impl TrainingSample {
    /// Network inputs: everything except the label.
    pub fn features(&self) -> &[f32] {
        &self.0[..15]
    }

    pub fn isovalue(&self) -> f32 {
        self.0[14]
    }

    pub fn lcp(&self) -> f32 {
        self.0[15]
    }
}

pub fn make_training_sample(cell: &CellGaussian, isovalue: f64, lcp: f64) -> Result<TrainingSample> {
    if !(0.0..=1.0).contains(&lcp) {
        return Err(StatsError::OutOfRangeLcp(lcp));
    }
    let mut v = [0.0f32; 16];
    for (dst, src) in v.iter_mut().zip(cell.features()) {
        *dst = src as f32;
    }
    v[14] = isovalue as f32;
    v[15] = lcp as f32;
    Ok(TrainingSample(v))
}

/// One sample per (timestep, cell, isovalue), in that nesting order, so the
/// result is chronological. Labels come from [`pmc::lcp_fields_multi`],
/// which matches [`pmc::lcp_field_serial`] bit for bit.
pub fn build_training_set(
    dataset: &EnsembleDataset,
    timesteps: &[usize],
    isovalues: &[f64],
    mc: &McConfig,
) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for &t in timesteps {
        let stats = field_statistics(dataset, t)?;
        let fields = pmc::lcp_fields_multi(&stats, isovalues, mc)?;
        out.reserve(stats.len() * isovalues.len());
        for (idx, cell) in stats.cells.iter().enumerate() {
            for (field, &s) in fields.iter().zip(isovalues) {
                out.push(make_training_sample(cell, s, field.probs[idx] as f64)?);
            }
        }
    }
    Ok(out)
}

/// Removes samples whose label is exactly zero.
pub fn drop_zero_lcp(samples: Vec<TrainingSample>) -> Vec<TrainingSample> {
    samples.into_iter().filter(|s| s.lcp() > 0.0).collect()
}

/// `start:stop:step` inclusive of `stop` (within half a step).
pub fn isovalue_range(start: f64, stop: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || stop < start {
        return Vec::new();
    }
    let n = ((stop - start) / step + 0.5).floor() as usize;
    (0..=n)
        .map(|i| {
            let v = start + step * i as f64;
            // print-stable values: 0.1 + 0.1*2 -> 0.3
            (v * 1e9).round() / 1e9
        })
        .collect()
}

/// Sidecar of a training-set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSetMeta {
    pub count: usize,
    pub isovalues: Vec<f64>,
    pub source_manifest: String,
    pub mc_seed: u64,
    pub r: usize,
}

pub fn save_training_set(path: &Path, samples: &[TrainingSample], meta: &TrainingSetMeta) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_f32_le(
        std::io::BufWriter::new(f),
        samples.iter().flat_map(|s| s.0),
    )?;
    let meta = TrainingSetMeta {
        count: samples.len(),
        ..meta.clone()
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| StatsError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn load_training_set(path: &Path) -> Result<(Vec<TrainingSample>, TrainingSetMeta)> {
    let format = |msg: String| StatsError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let side = sidecar_path(path);
    let meta: TrainingSetMeta = serde_json::from_str(&std::fs::read_to_string(&side)?)
        .map_err(|e| format(e.to_string()))?;
    let (raw, bytes) = read_f32_file(path)?;
    if bytes % 64 != 0 {
        return Err(format(format!("length {bytes} is not a multiple of 64 bytes")));
    }
    let samples: Vec<TrainingSample> = raw
        .chunks_exact(16)
        .map(|c| TrainingSample(c.try_into().expect("chunk of 16")))
        .collect();
    if samples.len() != meta.count {
        return Err(format(format!(
            "sidecar declares {} records, file holds {}",
            meta.count,
            samples.len()
        )));
    }
    if let Some(i) = samples
        .iter()
        .position(|s| s.0.iter().any(|v| !v.is_finite()) || !(0.0..=1.0).contains(&s.lcp()))
    {
        return Err(format(format!("record {i} is non-finite or has an invalid label")));
    }
    Ok((samples, meta))
}

/// Sidecar of a saved statistics grid (14 `f32` per cell: means then packed covariance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsMeta {
    pub cells_w: usize,
    pub cells_h: usize,
    pub timestep: usize,
}

pub fn save_stats_grid(path: &Path, grid: &CellStatsGrid, timestep: usize) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_f32_le(
        std::io::BufWriter::new(f),
        grid.cells.iter().flat_map(|c| c.features().map(|v| v as f32)),
    )?;
    let meta = StatsMeta {
        cells_w: grid.cells_w,
        cells_h: grid.cells_h,
        timestep,
    };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&meta).expect("plain struct"),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::ScalarField2D;

    /// 2x2 grid (one cell) per member, vertex values given in cell order.
    fn one_cell(members: &[[f64; 4]]) -> EnsembleDataset {
        let fields = members
            .iter()
            .map(|v| {
                // row-major (x, y): (0,0)=v0 (1,0)=v1 (0,1)=v3 (1,1)=v2
                ScalarField2D::new(2, 2, vec![v[0], v[1], v[3], v[2]]).unwrap()
            })
            .collect();
        let mut ds = EnsembleDataset::from_fields("t", members.len(), 1, fields).unwrap();
        ds.normalized = true;
        ds
    }

    #[test]
    fn two_member_cell() {
        let ds = one_cell(&[[0.0, 1.0, 2.0, 3.0], [2.0, 3.0, 4.0, 5.0]]);
        let c = cell_statistics(&ds, 0, 0, 0).unwrap();
        assert_eq!(c.mu, [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c.cov, [2.0; 10]);
    }

    #[test]
    fn identical_members_have_zero_covariance() {
        let ds = one_cell(&[[0.3, 0.1, 0.7, 0.2]; 3]);
        let c = cell_statistics(&ds, 0, 0, 0).unwrap();
        assert_eq!(c.mu, [0.3, 0.1, 0.7, 0.2]);
        assert_eq!(c.cov, [0.0; 10]);
    }

    #[test]
    fn three_member_cell() {
        let ds = one_cell(&[[1.0, 2.0, 0.0, 0.0], [2.0, 2.0, 0.0, 0.0], [3.0, 2.0, 0.0, 0.0]]);
        let c = cell_statistics(&ds, 0, 0, 0).unwrap();
        assert_eq!(c.cov[0], 1.0);
        assert_eq!(c.cov[1], 0.0);
        assert_eq!(c.cov[4], 0.0);
    }

    #[test]
    fn vertex_order_is_counterclockwise() {
        // grid row-major values 0..9 on a 3x3 grid, identical members
        let f = ScalarField2D::new(3, 3, (0..9).map(f64::from).collect()).unwrap();
        let ds = EnsembleDataset::from_fields("g", 2, 1, vec![f.clone(), f]).unwrap();
        let c = cell_statistics(&ds, 0, 1, 0).unwrap();
        // (1,0)=1, (2,0)=2, (2,1)=5, (1,1)=4
        assert_eq!(c.mu, [1.0, 2.0, 5.0, 4.0]);
    }

    #[test]
    fn cell_errors() {
        let ds = one_cell(&[[0.0; 4], [1.0; 4]]);
        assert!(matches!(cell_statistics(&ds, 0, 1, 0), Err(StatsError::OutOfRange(_))));
        assert!(matches!(cell_statistics(&ds, 1, 0, 0), Err(StatsError::OutOfRange(_))));
        let mut single = ds.clone();
        single.members = 1;
        assert!(matches!(
            cell_statistics(&single, 0, 0, 0),
            Err(StatsError::TooFewMembers(1))
        ));
    }

    #[test]
    fn training_sample_layout() {
        let cell = CellGaussian {
            mu: [1.0, 2.0, 3.0, 4.0],
            cov: [2.0; 10],
        };
        let s = make_training_sample(&cell, 0.5, 0.25).unwrap();
        assert_eq!(
            s.0,
            [1.0, 2.0, 3.0, 4.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 0.5, 0.25]
        );
        let z = make_training_sample(&CellGaussian::default(), 0.0, 0.0).unwrap();
        assert_eq!(z.0, [0.0; 16]);
        assert!(matches!(
            make_training_sample(&cell, 0.5, 1.5),
            Err(StatsError::OutOfRangeLcp(_))
        ));
    }

    #[test]
    fn unpacked_matrix_is_symmetric() {
        let cell = CellGaussian {
            mu: [0.0; 4],
            cov: std::array::from_fn(|k| k as f64 + 1.0),
        };
        let m = cell.matrix();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m[i][j], m[j][i]);
            }
        }
        assert_eq!(m[1][3], 9.0);
    }

    #[test]
    fn isovalue_ranges() {
        assert_eq!(
            isovalue_range(0.1, 0.9, 0.1),
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
        );
        assert_eq!(isovalue_range(0.5, 0.5, 0.1), vec![0.5]);
        assert!(isovalue_range(0.5, 0.1, 0.1).is_empty());
    }
}
