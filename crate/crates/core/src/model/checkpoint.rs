//! Single-file checkpoints: a plain-text header (format version, model
//! config as `key value` lines, array table with shapes) terminated by an
//! `end` line, followed by the raw little-endian array payload in table
//! order.

use std::fmt::Write as _;
use std::path::Path;

use super::params::{Params, Tensor};
use super::{ModelConfig, ModelError, ModelState, Result};
use crate::fsutil::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "surgidepth-checkpoint";

pub(crate) fn header_text(state: &ModelState) -> String {
    let c = &state.config;
    let mut s = String::new();
    writeln!(s, "{MAGIC}").unwrap();
    writeln!(s, "version {CHECKPOINT_VERSION}").unwrap();
    writeln!(s, "patch_size {}", c.patch_size).unwrap();
    writeln!(s, "embed_dim {}", c.embed_dim).unwrap();
    writeln!(s, "n_blocks {}", c.n_blocks).unwrap();
    writeln!(s, "n_heads {}", c.n_heads).unwrap();
    writeln!(s, "decoder_channels {}", c.decoder_channels).unwrap();
    writeln!(s, "input_height {}", c.input_size.0).unwrap();
    writeln!(s, "input_width {}", c.input_size.1).unwrap();
    writeln!(s, "init_seed {}", state.init_seed).unwrap();
    writeln!(s, "dtype f64le").unwrap();
    for (name, t) in state.params.named(&state.config) {
        let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        writeln!(s, "array {name} {}", dims.join(" ")).unwrap();
    }
    writeln!(s, "end").unwrap();
    s
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = header_text(state).into_bytes();
    for t in state.params.tensors() {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
}

#[derive(Clone, Copy)]
enum Dtype {
    F64,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let bytes =
        std::fs::read(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
    parse(&bytes)
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Corrupt(msg.into())
}

fn parse(bytes: &[u8]) -> Result<ModelState> {
    let marker = b"\nend\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| corrupt("header terminator not found"))?;
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("header is not valid UTF-8"))?;
    let mut payload = &bytes[end + marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(corrupt("missing checkpoint magic"));
    }
    let mut fields = std::collections::HashMap::new();
    let mut arrays: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        let key = parts.next().ok_or_else(|| corrupt("blank header line"))?;
        if key == "array" {
            let name = parts.next().ok_or_else(|| corrupt("array line without name"))?;
            let dims = parts
                .map(|d| d.parse::<usize>().map_err(|_| corrupt(format!("bad dim in `{line}`"))))
                .collect::<Result<Vec<_>>>()?;
            arrays.push((name.to_string(), dims));
        } else {
            let value = parts.next().ok_or_else(|| corrupt(format!("`{key}` has no value")))?;
            fields.insert(key.to_string(), value.to_string());
        }
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| corrupt(format!("missing `{k}`")));
    let version = get("version")?;
    if version.parse::<u32>().ok() != Some(CHECKPOINT_VERSION) {
        return Err(ModelError::VersionMismatch {
            found: version.clone(),
            expected: CHECKPOINT_VERSION,
        });
    }
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| corrupt(format!("`{k}` is not an integer")))
    };
    let config = ModelConfig {
        patch_size: num("patch_size")?,
        embed_dim: num("embed_dim")?,
        n_blocks: num("n_blocks")?,
        n_heads: num("n_heads")?,
        decoder_channels: num("decoder_channels")?,
        input_size: (num("input_height")?, num("input_width")?),
    };
    config.validate()?;
    let init_seed: u64 = get("init_seed")?
        .parse()
        .map_err(|_| corrupt("`init_seed` is not an integer"))?;
    let dtype = match get("dtype")?.as_str() {
        "f64le" => Dtype::F64,
        "f32le" => Dtype::F32,
        other => return Err(corrupt(format!("unsupported dtype `{other}`"))),
    };

    let layout = Params::layout(&config);
    if arrays.len() != layout.len() {
        return Err(corrupt(format!(
            "{} arrays listed, config requires {}",
            arrays.len(),
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), (expected_name, expected_shape)) in arrays.into_iter().zip(layout) {
        if name != expected_name {
            return Err(corrupt(format!("expected array `{expected_name}`, found `{name}`")));
        }
        if shape != expected_shape {
            return Err(ModelError::ShapeMismatch { name, expected: expected_shape, found: shape });
        }
        let n: usize = shape.iter().product();
        let need = n * dtype.width();
        if payload.len() < need {
            return Err(corrupt(format!("array `{name}` is truncated")));
        }
        let (chunk, rest) = payload.split_at(need);
        payload = rest;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
            Dtype::F32 => chunk
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
                .collect(),
        };
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(corrupt(format!("array `{name}` holds non-finite value {bad}")));
        }
        tensors.push(Tensor { shape, data });
    }
    if !payload.is_empty() {
        return Err(corrupt(format!("{} trailing bytes after the last array", payload.len())));
    }
    let mut params = Params::zeros(&config);
    for (slot, t) in params.tensors_mut().into_iter().zip(tensors) {
        *slot = t;
    }
    Ok(ModelState { config, params, init_seed })
}
