//! On-disk artifact formats.
//!
//! Binary formats are little-endian with fixed headers:
//!
//! * Volumes and masks share one header: magic `CSEG`, format version
//!   (`u16`), grid dims (`3 x u32`), voxel spacing in millimeters
//!   (`3 x f32`). The payload follows in x-fastest order: `f32` intensities
//!   for volumes, `u8` labels (0 or 1) for masks. The payload length
//!   disambiguates the two.
//! * Checkpoints: magic `CSPT`, format version (`u16`), the producing
//!   configuration hash, then two sections of named `f64` tensors (frozen
//!   encoder followed by decoder).
//!
//! Text artifacts (CSV tables) start with a `# config_hash=<hex>` comment
//! line so any output can be traced back to the exact configuration that
//! produced it. Fields never contain commas, so no quoting is used.
//!
//! All writes go through [`write_atomic`]: the bytes land in a sibling
//! temporary file that is renamed over the destination, so readers never
//! observe a half-written artifact.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: [u8; 4] = *b"CSEG";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CSPT";
pub const FORMAT_VERSION: u16 = 1;

/// Scalar field on a regular grid. `data[x + nx*(y + ny*z)]` holds the
/// voxel at integer coordinates `(x, y, z)`; x varies fastest, matching the
/// file layout byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// Physical edge lengths of one voxel, in millimeters.
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

/// Binary label field with the same layout conventions as [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<u8>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Volume> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Data(format!(
                "volume payload has {} voxels, dims {:?} require {}",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Linear index of voxel `(x, y, z)`.
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }
}

impl Mask {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Mask> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Data(format!(
                "mask payload has {} voxels, dims {:?} require {}",
                data.len(),
                dims,
                n
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("mask labels must be 0 or 1, found {bad}")));
        }
        Ok(Mask { dims, spacing, data })
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Number of foreground voxels.
    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// One tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Serialized model state: frozen encoder section, decoder section, and the
/// hash of the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub encoder: Vec<NamedTensor>,
    pub decoder: Vec<NamedTensor>,
}

/// Write bytes via a sibling temporary file plus rename, creating parent
/// directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = temp_sibling(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut bytes = header_bytes(&v.dims, &v.spacing);
    bytes.reserve(v.data.len() * 4);
    for &value in &v.data {
        bytes.extend_from_slice(&(value as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, spacing, offset) = parse_header(path, &bytes)?;
    let n = dims[0] * dims[1] * dims[2];
    let expected = offset + 4 * n;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, f32 volume with dims {dims:?} requires {}", bytes.len() - offset, 4 * n),
        ));
    }
    let data = bytes[offset..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Volume::new(dims, spacing, data)
}

pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    let mut bytes = header_bytes(&m.dims, &m.spacing);
    bytes.extend_from_slice(&m.data);
    write_atomic(path, &bytes)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, spacing, offset) = parse_header(path, &bytes)?;
    let n = dims[0] * dims[1] * dims[2];
    if bytes.len() != offset + n {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, u8 mask with dims {dims:?} requires {n}", bytes.len() - offset),
        ));
    }
    Mask::new(dims, spacing, bytes[offset..].to_vec())
}

fn header_bytes(dims: &[usize; 3], spacing: &[f64; 3]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(4 + 2 + 12 + 12);
    bytes.extend_from_slice(&VOLUME_MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for &d in dims {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &s in spacing {
        bytes.extend_from_slice(&(s as f32).to_le_bytes());
    }
    bytes
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<([usize; 3], [f64; 3], usize)> {
    let mut cur = Cursor { path, bytes, at: 0 };
    let magic = cur.take(4)?;
    if magic != VOLUME_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}, expected {VOLUME_MAGIC:?}")));
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    let dims = [cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize];
    let spacing = [cur.f32()? as f64, cur.f32()? as f64, cur.f32()? as f64];
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::format(path, format!("degenerate dims {dims:?}")));
    }
    Ok((dims, spacing, cur.at))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_string(&mut bytes, &ckpt.config_hash);
    for section in [&ckpt.encoder, &ckpt.decoder] {
        bytes.extend_from_slice(&(section.len() as u32).to_le_bytes());
        for t in section {
            put_string(&mut bytes, &t.name);
            bytes.push(t.shape.len() as u8);
            for &d in &t.shape {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let numel: usize = t.shape.iter().product();
            debug_assert_eq!(numel, t.data.len());
            for &v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    write_atomic(path, &bytes)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { path, bytes: &bytes, at: 0 };
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}")));
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    let config_hash = cur.string()?;
    let mut sections = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = cur.string()?;
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        sections.push(tensors);
    }
    if cur.at != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - cur.at)));
    }
    let decoder = sections.pop().expect("two sections");
    let encoder = sections.pop().expect("two sections");
    Ok(Checkpoint { config_hash, encoder, decoder })
}

fn put_string(bytes: &mut Vec<u8>, s: &str) {
    bytes.extend_from_slice(&(s.len() as u32).to_le_bytes());
    bytes.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated: wanted {n} bytes at offset {}, file has {}", self.at, self.bytes.len()),
            ));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "non-UTF-8 string field".to_string()))
    }
}

/// Write a CSV artifact: config-hash comment, header row, data rows.
pub fn write_csv(path: &Path, config_hash: &str, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::new();
    text.push_str("# config_hash=");
    text.push_str(config_hash);
    text.push('\n');
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Parsed CSV artifact.
pub struct CsvFile {
    pub config_hash: Option<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Read a CSV artifact written by [`write_csv`]. The hash comment is
/// optional so plain CSVs parse too.
pub fn read_csv(path: &Path) -> Result<CsvFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().peekable();
    let config_hash = match lines.peek() {
        Some(line) if line.starts_with("# config_hash=") => {
            let hash = line.trim_start_matches("# config_hash=").to_string();
            lines.next();
            Some(hash)
        }
        _ => None,
    };
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::format(path, "missing header row".to_string()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != header.len() {
            return Err(Error::format(
                path,
                format!("row has {} fields, header has {}", fields.len(), header.len()),
            ));
        }
        rows.push(fields);
    }
    Ok(CsvFile { config_hash, header, rows })
}
