//! Ensembles of 2D time-varying scalar fields: loading, synthesis,
//! normalization and time splits.
//!
//! On disk an ensemble is a JSON manifest plus one headerless raw file per
//! (member, timestep) holding `width * height` little-endian `f32` values in
//! row-major order. In memory values are widened to `f64`.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sidecar::{read_f32_file, write_f32_le};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("size mismatch in {}: expected {expected} bytes, found {actual}", .path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at index {index} of {}", .path.display())]
    NonFiniteValue { path: PathBuf, index: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate value range: min == max == {0}")]
    DegenerateRange(f64),
    #[error("dataset is already normalized")]
    AlreadyNormalized,
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField2D {
    pub width: usize,
    pub height: usize,
    /// Row-major, `values[y * width + x]`.
    pub values: Vec<f64>,
}

impl ScalarField2D {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(EnsembleError::OutOfRange(format!(
                "grid must be at least 2x2, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(EnsembleError::OutOfRange(format!(
                "expected {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(EnsembleError::NonFiniteValue {
                path: PathBuf::new(),
                index,
            });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDataset {
    pub name: String,
    pub members: usize,
    pub timesteps: usize,
    pub width: usize,
    pub height: usize,
    /// Member-major: the field of member `m` at step `t` is `fields[m * timesteps + t]`.
    pub fields: Vec<ScalarField2D>,
    pub normalized: bool,
    pub norm_min: f64,
    pub norm_max: f64,
    /// Absolute index of local step 0, nonzero for the test half of a split.
    pub first_timestep: usize,
}

impl EnsembleDataset {
    /// Builds a dataset from member-major fields, checking shapes.
    pub fn from_fields(
        name: impl Into<String>,
        members: usize,
        timesteps: usize,
        fields: Vec<ScalarField2D>,
    ) -> Result<Self> {
        if members < 2 {
            return Err(EnsembleError::OutOfRange(format!(
                "need at least 2 members, got {members}"
            )));
        }
        if timesteps < 1 {
            return Err(EnsembleError::OutOfRange("need at least 1 timestep".into()));
        }
        if fields.len() != members * timesteps {
            return Err(EnsembleError::OutOfRange(format!(
                "expected {} fields, got {}",
                members * timesteps,
                fields.len()
            )));
        }
        let (width, height) = (fields[0].width, fields[0].height);
        if fields.iter().any(|f| f.width != width || f.height != height) {
            return Err(EnsembleError::OutOfRange("fields differ in shape".into()));
        }
        Ok(Self {
            name: name.into(),
            members,
            timesteps,
            width,
            height,
            fields,
            normalized: false,
            norm_min: 0.0,
            norm_max: 1.0,
            first_timestep: 0,
        })
    }

    #[inline]
    pub fn field(&self, member: usize, t: usize) -> &ScalarField2D {
        &self.fields[member * self.timesteps + t]
    }

    /// Inverse of the normalization map; identity on unnormalized data.
    pub fn denormalize(&self, v: f64) -> f64 {
        if self.normalized {
            v * (self.norm_max - self.norm_min) + self.norm_min
        } else {
            v
        }
    }

    fn global_range(&self) -> (f64, f64) {
        self.fields
            .iter()
            .flat_map(|f| f.values.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Writes the raw files next to `manifest_path` and then the manifest.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
        let stem = manifest_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset");
        let mut files = Vec::with_capacity(self.members);
        for m in 0..self.members {
            let mut row = Vec::with_capacity(self.timesteps);
            for t in 0..self.timesteps {
                let file = format!("{stem}_m{m:03}_t{t:03}.f32");
                let f = std::fs::File::create(dir.join(&file))?;
                write_f32_le(
                    std::io::BufWriter::new(f),
                    self.field(m, t).values.iter().map(|&v| v as f32),
                )?;
                row.push(file);
            }
            files.push(row);
        }
        let manifest = Manifest {
            name: self.name.clone(),
            width: self.width,
            height: self.height,
            members: self.members,
            timesteps: self.timesteps,
            dtype: "f32le".into(),
            layout: "row-major".into(),
            files,
            normalized: self.normalized,
            norm_min: self.normalized.then_some(self.norm_min),
            norm_max: self.normalized.then_some(self.norm_max),
            first_timestep: self.first_timestep,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| EnsembleError::MalformedManifest(e.to_string()))?;
        std::fs::write(manifest_path, text)?;
        Ok(())
    }
}

/// JSON manifest. The `normalized`, `norm_min`, `norm_max` and
/// `first_timestep` fields are optional extensions written by this crate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub members: usize,
    pub timesteps: usize,
    pub dtype: String,
    pub layout: String,
    pub files: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_max: Option<f64>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub first_timestep: usize,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

pub fn load_dataset(manifest_path: &Path) -> Result<EnsembleDataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => EnsembleError::MissingFile(manifest_path.to_path_buf()),
        _ => EnsembleError::Io(e),
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| EnsembleError::MalformedManifest(e.to_string()))?;
    let bad = |msg: String| EnsembleError::MalformedManifest(msg);
    if manifest.dtype != "f32le" {
        return Err(bad(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    if manifest.layout != "row-major" {
        return Err(bad(format!("unsupported layout {:?}", manifest.layout)));
    }
    if manifest.width < 2 || manifest.height < 2 {
        return Err(bad("width and height must be at least 2".into()));
    }
    if manifest.members < 2 || manifest.timesteps < 1 {
        return Err(bad("need members >= 2 and timesteps >= 1".into()));
    }
    if manifest.files.len() != manifest.members
        || manifest.files.iter().any(|r| r.len() != manifest.timesteps)
    {
        return Err(bad(format!(
            "files must be a {} x {} array",
            manifest.members, manifest.timesteps
        )));
    }

    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let expected = 4 * manifest.width * manifest.height;
    let mut fields = Vec::with_capacity(manifest.members * manifest.timesteps);
    for row in &manifest.files {
        for file in row {
            let path = dir.join(file);
            let (raw, bytes) = read_f32_file(&path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => EnsembleError::MissingFile(path.clone()),
                _ => EnsembleError::Io(e),
            })?;
            if bytes != expected {
                return Err(EnsembleError::SizeMismatch {
                    path,
                    expected,
                    actual: bytes,
                });
            }
            if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
                return Err(EnsembleError::NonFiniteValue { path, index });
            }
            fields.push(ScalarField2D {
                width: manifest.width,
                height: manifest.height,
                values: raw.into_iter().map(f64::from).collect(),
            });
        }
    }
    let mut ds =
        EnsembleDataset::from_fields(manifest.name, manifest.members, manifest.timesteps, fields)?;
    if manifest.normalized {
        ds.normalized = true;
        ds.norm_min = manifest
            .norm_min
            .ok_or_else(|| bad("normalized manifest without norm_min".into()))?;
        ds.norm_max = manifest
            .norm_max
            .ok_or_else(|| bad("normalized manifest without norm_max".into()))?;
    }
    ds.first_timestep = manifest.first_timestep;
    Ok(ds)
}

/// Parameters of the synthetic ensemble generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub members: usize,
    pub timesteps: usize,
    /// Number of random sinusoids in the shared base field.
    pub modes: usize,
    /// Amplitude of the smooth per-member perturbation.
    pub noise_scale: f64,
    /// Phase shift per timestep, in radians.
    pub drift: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EnsembleError::InvalidSpec(m.into()));
        if self.width < 2 || self.height < 2 {
            return bad("width and height must be at least 2");
        }
        if self.members < 2 {
            return bad("members must be at least 2");
        }
        if self.timesteps < 1 || self.modes < 1 {
            return bad("timesteps and modes must be positive");
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return bad("noise_scale must be finite and non-negative");
        }
        if !self.drift.is_finite() {
            return bad("drift must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, freq: std::ops::Range<f64>, amp: f64) -> Self {
        let sign = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { 1.0 } else { -1.0 };
        Self {
            fx: sign(rng) * rng.random_range(freq.clone()),
            fy: sign(rng) * rng.random_range(freq),
            phase: rng.random_range(0.0..TAU),
            amp,
        }
    }

    #[inline]
    fn eval(&self, u: f64, v: f64, shift: f64) -> f64 {
        self.amp * (TAU * (self.fx * u + self.fy * v) + self.phase + shift).sin()
    }
}

const NOISE_WAVES: usize = 3;

/// Deterministic synthetic ensemble: a shared smooth base field drifting
/// over time, plus smooth per-member noise modulated by a drifting
/// envelope so that uncertainty varies across the domain.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<EnsembleDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_amp = 1.0 / (spec.modes as f64).sqrt();
    let base: Vec<Wave> = (0..spec.modes)
        .map(|_| {
            let amp = base_amp * rng.random_range(0.5..1.0);
            Wave::random(&mut rng, 0.5..2.5, amp)
        })
        .collect();
    let envelope = Wave::random(&mut rng, 0.3..1.2, 1.0);
    let noise_amp = 1.0 / (NOISE_WAVES as f64).sqrt();
    let noise: Vec<Vec<Wave>> = (0..spec.members * spec.timesteps)
        .map(|_| {
            (0..NOISE_WAVES)
                .map(|_| {
                    let amp = noise_amp * rng.random_range(0.5..1.0);
                    Wave::random(&mut rng, 0.3..1.5, amp)
                })
                .collect()
        })
        .collect();

    let (w, h) = (spec.width, spec.height);
    let mut fields = Vec::with_capacity(spec.members * spec.timesteps);
    for m in 0..spec.members {
        for t in 0..spec.timesteps {
            let shift = spec.drift * t as f64;
            let waves = &noise[m * spec.timesteps + t];
            let mut values = Vec::with_capacity(w * h);
            for y in 0..h {
                let v = y as f64 / (h - 1) as f64;
                for x in 0..w {
                    let u = x as f64 / (w - 1) as f64;
                    let b: f64 = base.iter().map(|wv| wv.eval(u, v, shift)).sum();
                    let env = 0.3 + 0.35 * (1.0 + envelope.eval(u, v, shift));
                    let n: f64 = waves.iter().map(|wv| wv.eval(u, v, 0.0)).sum();
                    values.push(b + spec.noise_scale * env * n);
                }
            }
            fields.push(ScalarField2D {
                width: w,
                height: h,
                values,
            });
        }
    }
    EnsembleDataset::from_fields(
        format!("synthetic-{seed}"),
        spec.members,
        spec.timesteps,
        fields,
    )
}

/// Min-max normalization over every member, timestep and grid point.
pub fn normalize_global(mut dataset: EnsembleDataset) -> Result<EnsembleDataset> {
    if dataset.normalized {
        return Err(EnsembleError::AlreadyNormalized);
    }
    let (lo, hi) = dataset.global_range();
    if !(hi > lo) {
        return Err(EnsembleError::DegenerateRange(lo));
    }
    let span = hi - lo;
    for f in &mut dataset.fields {
        for v in &mut f.values {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
    }
    dataset.normalized = true;
    dataset.norm_min = lo;
    dataset.norm_max = hi;
    Ok(dataset)
}

/// Splits into steps `[0, t_train)` and `[t_train, T)`.
pub fn split_time(
    dataset: &EnsembleDataset,
    t_train: usize,
) -> Result<(EnsembleDataset, EnsembleDataset)> {
    let t_total = dataset.timesteps;
    if t_train < 1 || t_train >= t_total {
        return Err(EnsembleError::OutOfRange(format!(
            "t_train must be in [1, {t_total}), got {t_train}"
        )));
    }
    let take = |range: std::ops::Range<usize>| {
        let fields = (0..dataset.members)
            .flat_map(|m| range.clone().map(move |t| (m, t)))
            .map(|(m, t)| dataset.field(m, t).clone())
            .collect();
        EnsembleDataset {
            timesteps: range.len(),
            fields,
            first_timestep: dataset.first_timestep + range.start,
            ..dataset.clone_meta()
        }
    };
    Ok((take(0..t_train), take(t_train..t_total)))
}

impl EnsembleDataset {
    fn clone_meta(&self) -> EnsembleDataset {
        EnsembleDataset {
            name: self.name.clone(),
            members: self.members,
            timesteps: 0,
            width: self.width,
            height: self.height,
            fields: Vec::new(),
            normalized: self.normalized,
            norm_min: self.norm_min,
            norm_max: self.norm_max,
            first_timestep: self.first_timestep,
        }
    }
}
