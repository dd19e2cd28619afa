//! Binary sample files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "IRSPSD01"
//! n_points u32
//! n_bands  u32
//! count    u64
//! psd      count * n_points * n_bands f64, each matrix row-major
//! labels   count * n_bands u8
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::PsdSample;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"IRSPSD01";

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "sample file",
        detail: detail.into(),
    }
}

pub fn write_samples<W: Write>(mut w: W, n_points: usize, n_bands: usize, samples: &[PsdSample]) -> Result<()> {
    let io = |e| Error::io("<sample stream>", e);
    if samples.iter().any(|s| s.n_points != n_points || s.n_bands != n_bands) {
        return Err(Error::Dimension("all samples must share the header shape".into()));
    }
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(n_points as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(n_bands as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(samples.len() as u64).to_le_bytes()).map_err(io)?;
    for s in samples {
        for v in &s.psd {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    for s in samples {
        w.write_all(&s.labels).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_samples<R: Read>(mut r: R) -> Result<Vec<PsdSample>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| format_err("truncated header"))?;
    if &magic != MAGIC {
        return Err(format_err("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf).map_err(|_| format_err("truncated header"))?;
    let n_points = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(|_| format_err("truncated header"))?;
    let n_bands = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u64buf).map_err(|_| format_err("truncated header"))?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let width = n_points * n_bands;
    let mut psds = Vec::with_capacity(count);
    for _ in 0..count {
        let mut m = Vec::with_capacity(width);
        for _ in 0..width {
            r.read_exact(&mut u64buf).map_err(|_| format_err("truncated PSD block"))?;
            m.push(f64::from_le_bytes(u64buf));
        }
        psds.push(m);
    }
    let mut out = Vec::with_capacity(count);
    for psd in psds {
        let mut labels = vec![0u8; n_bands];
        r.read_exact(&mut labels).map_err(|_| format_err("truncated label block"))?;
        out.push(PsdSample::new(n_points, n_bands, psd, labels)?);
    }
    Ok(out)
}

pub fn save(path: &Path, n_points: usize, n_bands: usize, samples: &[PsdSample]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_samples(BufWriter::new(f), n_points, n_bands, samples)
}

pub fn load(path: &Path) -> Result<Vec<PsdSample>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_samples(BufReader::new(f))
}
