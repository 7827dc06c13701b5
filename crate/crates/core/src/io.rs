//! File formats: the binary wavefunction container with its JSON sidecar,
//! NDJSON record streams and small CSV tables.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TAND";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

/// Element type stored after the header.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Real = 0,
    /// Interleaved `(re, im)` pairs.
    Complex = 1,
}

/// Decoded header: up to four extents, the last one may count frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u16,
    pub kind: DataKind,
    pub ndim: u8,
    pub dims: [u16; 4],
}

impl Header {
    pub fn new(kind: DataKind, dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(Error::Format(format!("1 to 4 dimensions supported, got {}", dims.len())));
        }
        let mut d = [1u16; 4];
        for (slot, &n) in d.iter_mut().zip(dims) {
            *slot = u16::try_from(n).map_err(|_| Error::Format(format!("extent {n} exceeds 65535")))?;
            if n == 0 {
                return Err(Error::Format("zero extent".into()));
            }
        }
        Ok(Header { version: FORMAT_VERSION, kind, ndim: dims.len() as u8, dims: d })
    }

    /// Number of `f64` values in the payload.
    pub fn values(&self) -> usize {
        let n: usize = self.dims[..self.ndim as usize].iter().map(|&d| d as usize).product();
        match self.kind {
            DataKind::Real => n,
            DataKind::Complex => 2 * n,
        }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6] = self.kind as u8;
        b[7] = self.ndim;
        for (i, d) in self.dims.iter().enumerate() {
            b[8 + 2 * i..10 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN || &b[..4] != MAGIC {
            return Err(Error::Format("not a wavefunction file".into()));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let kind = match b[6] {
            0 => DataKind::Real,
            1 => DataKind::Complex,
            k => return Err(Error::Format(format!("unknown data kind {k}"))),
        };
        let ndim = b[7];
        if !(1..=4).contains(&ndim) {
            return Err(Error::Format(format!("bad dimension count {ndim}")));
        }
        let mut dims = [0u16; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = u16::from_le_bytes([b[8 + 2 * i], b[9 + 2 * i]]);
        }
        Ok(Header { version, kind, ndim, dims })
    }
}

/// Writes header and payload; axis 0 is the slowest index.
pub fn write_array(path: &Path, header: &Header, data: &[f64]) -> Result<()> {
    if data.len() != header.values() {
        return Err(Error::Format(format!("payload has {} values, header expects {}", data.len(), header.values())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header.to_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<(Header, Vec<f64>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let header = Header::from_bytes(&bytes)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * header.values() {
        return Err(Error::Format(format!(
            "payload is {} bytes, header expects {}",
            body.len(),
            8 * header.values()
        )));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, data))
}

/// `name.bin` gets the sidecar `name.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Replaces the file with one record per line.
pub fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn append_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every non-empty line; a missing file is an empty stream.
pub fn read_ndjson<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Comma-separated table with a header row.
pub fn write_csv(path: &Path, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", columns.join(","))?;
    for row in rows {
        if row.len() != columns.len() {
            return Err(Error::Format(format!("row has {} fields, header {}", row.len(), columns.len())));
        }
        let fields: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 2)))?;
        rows.push(row);
    }
    Ok((header, rows))
}
