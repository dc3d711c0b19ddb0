//! Binary model file.
//!
//! ```text
//! "LCPM"                  4 bytes
//! version                 u32 LE
//! omega0                  f64 LE
//! mean, cov, iso, decoder tables: u32 count, then count u32 widths
//! per layer in declaration order: weights (out x in, row-major), biases; f32 LE
//! ```

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Mlp, MlpConfig, MlpModel, Result, SurrogateError};

pub const MODEL_MAGIC: &[u8; 4] = b"LCPM";
pub const MODEL_VERSION: u32 = 1;

pub fn save_model(model: &MlpModel, path: &Path) -> Result<()> {
    let c = &model.config;
    let mut buf = Vec::with_capacity(32 + 4 * model.parameter_count());
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&c.omega0.to_le_bytes());
    for table in [&c.mean_layers, &c.cov_layers, &c.iso_layers, &c.decoder_layers] {
        buf.extend_from_slice(&(table.len() as u32).to_le_bytes());
        for &w in table {
            buf.extend_from_slice(&(w as u32).to_le_bytes());
        }
    }
    for layer in model.layers() {
        for v in layer.w.iter().chain(&layer.b) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(SurrogateError::TruncatedFile)?;
        let s = self.bytes.get(self.pos..end).ok_or(SurrogateError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(SurrogateError::TruncatedFile)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn table(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        if n > 1 << 16 {
            return Err(SurrogateError::ShapeMismatch(format!("implausible layer count {n}")));
        }
        (0..n).map(|_| self.u32().map(|w| w as usize)).collect()
    }
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| SurrogateError::BadMagic)?;
    if magic != MODEL_MAGIC {
        return Err(SurrogateError::BadMagic);
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(SurrogateError::VersionMismatch(version));
    }
    let omega0 = r.f64()?;
    let config = MlpConfig {
        omega0,
        mean_layers: r.table()?,
        cov_layers: r.table()?,
        iso_layers: r.table()?,
        decoder_layers: r.table()?,
    };
    config
        .validate()
        .map_err(|e| SurrogateError::ShapeMismatch(e.to_string()))?;
    let mut params = Vec::new();
    for (fan_in, fan_out) in config.layer_shapes() {
        let w = Array2::from_shape_vec((fan_out, fan_in), r.f32s(fan_in * fan_out)?)
            .expect("length matches shape");
        let b = Array1::from(r.f32s(fan_out)?);
        params.push((w, b));
    }
    if r.pos != bytes.len() {
        return Err(SurrogateError::ShapeMismatch(format!(
            "{} trailing bytes after parameters",
            bytes.len() - r.pos
        )));
    }
    Mlp::from_layers(config, params)
}
