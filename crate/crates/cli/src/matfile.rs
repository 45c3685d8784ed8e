//! Matrix files.
//!
//! Binary layout, all little-endian:
//!
//! | offset | size | field                    |
//! |--------|------|--------------------------|
//! | 0      | 4    | magic `RMAT`             |
//! | 4      | 4    | u32 format version (1)   |
//! | 8      | 4    | u32 rows                 |
//! | 12     | 4    | u32 cols                 |
//! | 16     | 4·rows·cols | f32 payload, row-major |
//!
//! Files ending in `.csv` are read and written as comma-separated text
//! instead, one matrix row per line.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use regstream_core::Mat;

pub const MAGIC: [u8; 4] = *b"RMAT";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 16;

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn encode(m: &Mat<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * m.as_slice().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Mat<f32>> {
    ensure!(bytes.len() >= HEADER_BYTES, "matrix file shorter than its header");
    ensure!(bytes[..4] == MAGIC, "bad magic, not a matrix file");
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    ensure!(version == VERSION, "unsupported matrix format version {version}");
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[HEADER_BYTES..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .context("matrix dimensions overflow")?;
    ensure!(
        payload.len() == expected,
        "payload holds {} bytes, {rows}x{cols} needs {expected}",
        payload.len()
    );
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Mat::from_vec(rows, cols, data))
}

pub fn to_csv(m: &Mat<f32>) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn from_csv(text: &str) -> Result<Mat<f32>> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split(',')
            .map(|v| v.trim().parse::<f32>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("line {}: not a number", n + 1))?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                bail!("line {}: {} columns, expected {c}", n + 1, vals.len())
            }
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    Ok(Mat::from_vec(rows, cols.unwrap_or(0), data))
}

pub fn read(path: &Path) -> Result<Mat<f32>> {
    let ctx = || format!("reading {}", path.display());
    if is_csv(path) {
        from_csv(&fs::read_to_string(path).with_context(ctx)?).with_context(ctx)
    } else {
        decode(&fs::read(path).with_context(ctx)?).with_context(ctx)
    }
}

pub fn write(path: &Path, m: &Mat<f32>) -> Result<()> {
    let res = if is_csv(path) {
        fs::write(path, to_csv(m))
    } else {
        fs::write(path, encode(m))
    };
    res.with_context(|| format!("writing {}", path.display()))
}
