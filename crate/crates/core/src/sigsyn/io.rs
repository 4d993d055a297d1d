//! Dataset import/export.
//!
//! CSV: header `label,snr_db,i0,q0,i1,q1,…`, one row per sample, floats in
//! shortest round-trip form (`inf` for noiseless samples).
//!
//! Binary (all little-endian): magic `SGDS`, `u32` version (1), `u32` class
//! count, `u32` window length ℓ, `u64` sample count, then per sample a `u32`
//! label, an `f64` SNR and `2ℓ` `f64` values in row-major `ℓ×2` order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LabeledDataset, SignalSample};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SGDS";
const VERSION: u32 = 1;

pub fn write_dataset_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let len = ds.length();
    let mut header = String::from("label,snr_db");
    for n in 0..len {
        header.push_str(&format!(",i{n},q{n}"));
    }
    let mut out = header;
    out.push('\n');
    for s in &ds.samples {
        out.push_str(&format!("{},{}", s.label, s.snr_db));
        for v in &s.iq {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV dataset. The class count is inferred as `max label + 1`
/// unless `class_count` is given.
pub fn read_dataset_csv(path: &Path, class_count: Option<usize>) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| bad(1, "missing header"))?
        .map_err(|e| Error::io(path, e))?;
    let columns = header.split(',').count();
    if columns < 2 || columns % 2 != 0 {
        return Err(bad(1, "header must be label,snr_db followed by I/Q pairs"));
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(bad(i + 2, "wrong number of fields"));
        }
        let label = fields[0].parse().map_err(|_| bad(i + 2, "bad label"))?;
        let snr_db = fields[1].parse().map_err(|_| bad(i + 2, "bad snr_db"))?;
        let iq = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(i + 2, "bad sample value"))?;
        samples.push(SignalSample { iq, label, snr_db });
    }
    let c = class_count.unwrap_or_else(|| samples.iter().map(|s| s.label + 1).max().unwrap_or(0));
    LabeledDataset::new(samples, c)
}

pub fn write_dataset_bin(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(24 + ds.len() * (12 + 16 * ds.length()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.class_count as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.length() as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for s in &ds.samples {
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
        buf.extend_from_slice(&s.snr_db.to_le_bytes());
        for v in &s.iq {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset_bin(path: &Path) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        message: msg.to_string(),
    };
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4).ok_or_else(|| bad("truncated header"))? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let class_count = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let length = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let count = cur.u64().ok_or_else(|| bad("truncated header"))? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let label = cur.u32().ok_or_else(|| bad("truncated sample"))? as usize;
        let snr_db = cur.f64().ok_or_else(|| bad("truncated sample"))?;
        let iq = (0..2 * length)
            .map(|_| cur.f64())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated sample"))?;
        samples.push(SignalSample { iq, label, snr_db });
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    LabeledDataset::new(samples, class_count)
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    pub fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use crate::sigsyn::{build_dataset, Channel, Modulation};

    fn sample_ds() -> LabeledDataset {
        let mut rng = stream(5, Domain::Dataset, 0);
        let mut ds = build_dataset(
            &Modulation::ALL[..3],
            4,
            &[8.0, f64::INFINITY],
            8,
            Channel::Rayleigh,
            &mut rng,
        )
        .unwrap();
        ds.class_count = 3;
        ds
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = sample_ds();
        write_dataset_csv(&ds, &path).unwrap();
        assert_eq!(read_dataset_csv(&path, Some(3)).unwrap(), ds);
    }

    #[test]
    fn bin_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = sample_ds();
        write_dataset_bin(&ds, &path).unwrap();
        assert_eq!(read_dataset_bin(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        write_dataset_bin(&sample_ds(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset_bin(&path), Err(Error::Format { .. })));
    }
}
