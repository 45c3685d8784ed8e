//! Parameter checkpoints: a directory holding `model.conf` (the model config
//! as `key = value` text) and `params.bin`.
//!
//! `params.bin`, little-endian:
//!
//! ```text
//! magic "RCKP" | u32 version (1) | u32 array count
//! per array: u32 name length | name (UTF-8) | u32 rows | u32 cols | f64 payload, row-major
//! ```
//!
//! Arrays appear in the parameter store's canonical order; names are checked
//! on load.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use regstream_core::params::param_specs;
use regstream_core::{Mat, ModelConfig, Params};

use crate::config;

pub const MAGIC: [u8; 4] = *b"RCKP";
pub const VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "model.conf";

pub fn encode(params: &Params<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.mats().len() as u32).to_le_bytes());
    for (name, m) in params.names().iter().zip(params.mats()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).context("length overflow")?;
        ensure!(end <= self.bytes.len(), "checkpoint truncated at byte {}", self.at);
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(config: ModelConfig, bytes: &[u8]) -> Result<Params<f64>> {
    let mut r = Reader { bytes, at: 0 };
    ensure!(r.take(4)? == MAGIC, "bad magic, not a checkpoint");
    let version = r.u32()?;
    ensure!(version == VERSION, "unsupported checkpoint version {version}");
    let specs = param_specs(&config);
    let count = r.u32()? as usize;
    ensure!(
        count == specs.len(),
        "checkpoint has {count} arrays, model config needs {}",
        specs.len()
    );
    let mut mats = Vec::with_capacity(count);
    for (want, _) in &specs {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).context("array name is not UTF-8")?;
        if name != want {
            bail!("expected array `{want}`, found `{name}`");
        }
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let n = rows.checked_mul(cols).context("array size overflow")?;
        let data = r
            .take(n.checked_mul(8).context("array size overflow")?)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        mats.push(Mat::from_vec(rows, cols, data));
    }
    ensure!(r.at == bytes.len(), "trailing bytes after last array");
    Ok(Params::from_mats(config, mats)?)
}

pub fn save(dir: &Path, params: &Params<f64>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), config::model_to_text(params.config()))
        .context("writing model config")?;
    fs::write(dir.join(PARAMS_FILE), encode(params)).context("writing parameters")?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Params<f64>> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path)
        .with_context(|| format!("reading {}", cfg_path.display()))?;
    let model = config::model_from_kv(&config::parse(&text)?)?;
    let bin = dir.join(PARAMS_FILE);
    let bytes = fs::read(&bin).with_context(|| format!("reading {}", bin.display()))?;
    decode(model, &bytes).with_context(|| format!("loading {}", bin.display()))
}
