//! Binary container for patch-token grids.
//!
//! Layout (little-endian throughout):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `GADT`                            |
//! | 4      | 4    | u32 version (= 1)                       |
//! | 8      | 4    | u32 rows                                |
//! | 12     | 4    | u32 cols                                |
//! | 16     | 4    | u32 dim                                 |
//! | 20     | 4·n  | f32 values, row-major (row, col, channel) |
//!
//! The same container with `dim = 1` stores raw pixel anomaly maps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GADT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// A rows × cols grid of `dim`-dimensional patch tokens. Node `i` sits at
/// `(i / cols, i % cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f32>,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows < 2 || cols < 2 || dim < 1 {
            return Err(Error::dim(format!(
                "grid must be at least 2x2x1, got {rows}x{cols}x{dim}"
            )));
        }
        let expected = rows * cols * dim;
        if data.len() != expected {
            return Err(Error::dim(format!(
                "grid {rows}x{cols}x{dim} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at element {pos}")));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of nodes, `rows * cols`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Token of node `i`.
    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn token_at(&self, row: usize, col: usize) -> &[f32] {
        self.token(row * self.cols + col)
    }

    /// Total size of this grid once serialized.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 4 * self.data.len()
    }
}

pub fn write_tokens<W: Write>(grid: &PatchGrid, mut sink: W) -> Result<usize> {
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&MAGIC);
    header[4..8].copy_from_slice(&VERSION.to_le_bytes());
    for (slot, value) in [grid.rows, grid.cols, grid.dim].into_iter().enumerate() {
        let value = u32::try_from(value)
            .map_err(|_| Error::dim(format!("grid extent {value} exceeds u32")))?;
        header[8 + 4 * slot..12 + 4 * slot].copy_from_slice(&value.to_le_bytes());
    }
    sink.write_all(&header)?;

    let mut payload = Vec::with_capacity(4 * grid.data.len());
    for v in &grid.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;
    sink.flush()?;
    Ok(HEADER_LEN + payload.len())
}

pub fn read_tokens<R: Read>(mut source: R) -> Result<PatchGrid> {
    let mut header = [0u8; HEADER_LEN];
    let got = read_up_to(&mut source, &mut header)?;
    if got >= 4 && header[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"GADT\"",
            String::from_utf8_lossy(&header[..4])
        )));
    }
    if got < HEADER_LEN {
        return Err(Error::Format(format!(
            "header needs {HEADER_LEN} bytes, stream has {got}"
        )));
    }
    let field = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    let version = field(0);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (rows, cols, dim) = (field(1) as usize, field(2) as usize, field(3) as usize);
    if rows < 2 || cols < 2 || dim < 1 {
        return Err(Error::Format(format!(
            "header declares invalid grid {rows}x{cols}x{dim}"
        )));
    }
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dim))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::Format("header extents overflow".into()))?;

    let expected = 4 * count;
    let mut payload = Vec::new();
    source.take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(Error::Truncation {
            expected,
            actual: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    PatchGrid::new(rows, cols, dim, data)
}

pub fn write_tokens_file(grid: &PatchGrid, path: impl AsRef<Path>) -> Result<usize> {
    let file = File::create(path)?;
    write_tokens(grid, BufWriter::new(file))
}

pub fn read_tokens_file(path: impl AsRef<Path>) -> Result<PatchGrid> {
    let file = File::open(path)?;
    read_tokens(BufReader::new(file))
}

fn read_up_to<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match source.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}
