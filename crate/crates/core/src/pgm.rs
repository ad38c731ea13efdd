//! Binary PGM (`P5`) images: 16-bit heatmaps out, 8-bit masks in.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Min-max normalizes `map` to `0..=65535` and encodes it as a 16-bit PGM
/// (big-endian samples). A constant map encodes as all zeros.
pub fn encode_pgm16(map: &[f32], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if map.len() != rows * cols {
        return Err(Error::dim(format!(
            "{} values for a {rows}x{cols} image",
            map.len()
        )));
    }
    let (lo, hi) = map
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = (hi - lo) as f64;
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    out.reserve(2 * map.len());
    for &v in map {
        let level = if span > 0.0 {
            (((v - lo) as f64 / span) * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm16(map: &[f32], rows: usize, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_pgm16(map, rows, cols)?)?;
    Ok(())
}

/// Binary mask: `true` marks a defect pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} mask pixels for a {rows}x{cols} mask",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbor resize: output pixel `(r, c)` takes the input cell
    /// `(r · rows / out_rows, c · cols / out_cols)`.
    pub fn resize_nearest(&self, out_rows: usize, out_cols: usize) -> Mask {
        let mut data = Vec::with_capacity(out_rows * out_cols);
        for r in 0..out_rows {
            let sr = r * self.rows / out_rows;
            for c in 0..out_cols {
                data.push(self.data[sr * self.cols + c * self.cols / out_cols]);
            }
        }
        Mask {
            rows: out_rows,
            cols: out_cols,
            data,
        }
    }
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("PGM header ended early".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decodes an 8-bit `P5` image where any nonzero sample is a defect.
pub fn decode_mask_pgm8(bytes: &[u8]) -> Result<Mask> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != "P5" {
        return Err(Error::Format("mask is not a binary PGM (P5)".into()));
    }
    let mut number = |what: &str| -> Result<usize> {
        header_token(bytes, &mut pos)?
            .parse()
            .map_err(|_| Error::Format(format!("bad PGM {what}")))
    };
    let cols = number("width")?;
    let rows = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "mask PGM must be 8-bit, maxval is {maxval}"
        )));
    }
    pos += 1; // single whitespace after maxval
    let payload = bytes.get(pos..).unwrap_or_default();
    if payload.len() < rows * cols {
        return Err(Error::Format(format!(
            "mask PGM holds {} of {} samples",
            payload.len(),
            rows * cols
        )));
    }
    Mask::new(
        rows,
        cols,
        payload[..rows * cols].iter().map(|&b| b != 0).collect(),
    )
}

pub fn encode_mask_pgm8(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.cols, mask.rows).into_bytes();
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn read_mask_pgm8(path: impl AsRef<Path>) -> Result<Mask> {
    decode_mask_pgm8(&fs::read(path)?)
}

pub fn write_mask_pgm8(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_mask_pgm8(mask))?;
    Ok(())
}
