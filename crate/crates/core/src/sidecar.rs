use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

/// `data.bin` -> `data.bin.json`.
pub(crate) fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub(crate) fn write_f32_le<W: Write>(mut w: W, values: impl IntoIterator<Item = f32>) -> io::Result<()> {
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads a whole file of little-endian f32. Returns the byte length too so
/// callers can report size mismatches.
pub(crate) fn read_f32_file(path: &Path) -> io::Result<(Vec<f32>, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let n = bytes.len();
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((values, n))
}
