//! Yellow-to-red LCP images in binary PPM.

use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pmc::LcpField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColormapSpec {
    pub zero_color: [u8; 3],
    pub low_color: [u8; 3],
    pub high_color: [u8; 3],
    pub gamma: f64,
}

impl Default for ColormapSpec {
    fn default() -> Self {
        Self {
            zero_color: [255, 255, 255],
            low_color: [255, 255, 0],
            high_color: [255, 0, 0],
            gamma: 1.0,
        }
    }
}

impl ColormapSpec {
    /// Zero maps to `zero_color`; `(0, 1]` interpolates low to high on `p^gamma`.
    pub fn color(&self, p: f32) -> [u8; 3] {
        if p <= 0.0 {
            return self.zero_color;
        }
        let t = (p.min(1.0) as f64).powf(self.gamma);
        std::array::from_fn(|c| {
            let lo = self.low_color[c] as f64;
            let hi = self.high_color[c] as f64;
            (lo + (hi - lo) * t + 0.5).floor().clamp(0.0, 255.0) as u8
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major from the top row, 3 bytes per pixel.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn save_ppm(&self, path: &Path) -> io::Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(f);
        self.write_ppm(&mut w)?;
        w.flush()
    }

    /// Reads a P6 file with maxval 255 and no comments.
    pub fn read_ppm<R: Read>(mut r: R) -> io::Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let bad = || io::Error::new(io::ErrorKind::InvalidData, "not a P6 PPM");
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad());
        }
        let width: usize = fields[1].parse().map_err(|_| bad())?;
        let height: usize = fields[2].parse().map_err(|_| bad())?;
        let data = bytes.get(pos..).ok_or_else(bad)?.to_vec();
        if data.len() != 3 * width * height {
            return Err(bad());
        }
        Ok(Self { width, height, data })
    }
}

/// Nearest-neighbor upscaled image; field row 0 is the bottom image row.
pub fn render_lcp(field: &LcpField, cmap: &ColormapSpec, scale: usize) -> RgbImage {
    let scale = scale.max(1);
    let (width, height) = (field.cells_w * scale, field.cells_h * scale);
    let mut data = Vec::with_capacity(3 * width * height);
    for y in 0..height {
        let cy = field.cells_h - 1 - y / scale;
        for x in 0..width {
            data.extend_from_slice(&cmap.color(field.at(x / scale, cy)));
        }
    }
    RgbImage { width, height, data }
}
