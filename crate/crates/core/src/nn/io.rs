//! Checkpoint files for model parameters and optimizer state.
//!
//! Layout: the 8-byte magic `ISACPRM1`, a little-endian `u32` header length,
//! a JSON header (format version, network config, layer layout, optional
//! optimizer hyperparameters), a little-endian `u64` value count, then the
//! values as little-endian `f64`. Optimizer files store the first moments
//! followed by the second moments.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Layout, ModelParams, NetConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ISACPRM1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: NetConfig,
    layout: Layout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam: Option<AdamState>,
}

fn write_file(path: &Path, header: &Header, values: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(8 + 4 + json.len() + 8 + values.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<(Header, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let take = |at: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + n)
            .ok_or_else(|| Error::format(format!("{}: truncated", path.display())))
    };
    if take(0, 8)? != MAGIC {
        return Err(Error::format(format!("{}: not a parameter file", path.display())));
    }
    let hlen = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(12, hlen)?)
        .map_err(|e| Error::format(format!("{}: bad header: {e}", path.display())))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let at = 12 + hlen;
    let count = u64::from_le_bytes(take(at, 8)?.try_into().unwrap()) as usize;
    let body = take(at + 8, count * 8)?;
    if bytes.len() != at + 8 + count * 8 {
        return Err(Error::format(format!("{}: trailing bytes", path.display())));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

pub fn write_params(path: &Path, cfg: &NetConfig, params: &ModelParams) -> Result<()> {
    params.check_same_layout(&ModelParams::zeros(cfg.layout()))?;
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "params".into(),
        config: *cfg,
        layout: params.layout().clone(),
        adam: None,
    };
    write_file(path, &header, params.values())
}

pub fn read_params(path: &Path) -> Result<(NetConfig, ModelParams)> {
    let (header, values) = read_file(path)?;
    if header.kind != "params" || header.layout != header.config.layout() {
        return Err(Error::format(format!("{}: not a model parameter file", path.display())));
    }
    Ok((header.config, ModelParams::from_vec(header.layout, values)?))
}

pub fn write_adam(path: &Path, cfg: &NetConfig, state: &AdamState) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "adam".into(),
        config: *cfg,
        layout: cfg.layout(),
        adam: Some(state.clone()),
    };
    let mut values = state.first_moment.clone();
    values.extend_from_slice(&state.second_moment);
    write_file(path, &header, &values)
}

pub fn read_adam(path: &Path) -> Result<AdamState> {
    let (header, mut values) = read_file(path)?;
    let mut state = match (header.kind.as_str(), header.adam) {
        ("adam", Some(s)) => s,
        _ => return Err(Error::format(format!("{}: not an optimizer file", path.display()))),
    };
    let n = header.layout.total();
    if values.len() != 2 * n {
        return Err(Error::format(format!("{}: moment length mismatch", path.display())));
    }
    state.second_moment = values.split_off(n);
    state.first_moment = values;
    Ok(state)
}
