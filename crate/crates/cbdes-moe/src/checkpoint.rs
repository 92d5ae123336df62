//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "CBDESMOE"
//! format_version   u32
//! config_len       u32, then that many bytes of model-config JSON
//! entry_count      u32
//! per entry:       u32 name_len, name bytes, u32 ndim, u32 dims[ndim]
//! payload:         every entry's values as f64, in manifest order
//! crc32(payload)   u32
//! ```
//!
//! `save -> load -> save` reproduces the file byte for byte.

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Tensor;
use crate::train::{ModelConfig, MoeModel};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CBDESMOE";
pub const FORMAT_VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes the model (parameters and norm statistics) to `path`.
pub fn save(model: &MoeModel, path: &Path) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |p| {
        entries.push((
            p.name().to_string(),
            p.value().shape().to_vec(),
            p.value().data().to_vec(),
        ));
    });

    let config_json = serde_json::to_vec(model.config())
        .map_err(|e| corrupt(format!("config serialization failed: {e}")))?;

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, _) in &entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    let mut payload: Vec<u8> = Vec::new();
    for (_, _, data) in &entries {
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&payload);
    let crc = hasher.finalize();
    buf.extend_from_slice(&payload);
    buf.extend_from_slice(&crc.to_le_bytes());

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(format!(
                "truncated file: needed {n} bytes for {what} at offset {}, file length {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads a checkpoint, validating magic, version, manifest consistency, and
/// the payload CRC, then rebuilds the model it describes.
pub fn load(path: &Path) -> Result<MoeModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(corrupt(format!(
            "bad magic {:?}, expected {:?}",
            &magic,
            MAGIC
        )));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config")?;
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| corrupt(format!("config parse failed: {e}")))?;

    let entry_count = r.u32("entry count")? as usize;
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(entry_count);
    let mut payload_len = 0usize;
    for _ in 0..entry_count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| corrupt("non-utf8 parameter name"))?;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        payload_len += shape.iter().product::<usize>();
        manifest.push((name, shape));
    }

    let payload = r.take(payload_len * 8, "payload")?;
    let crc_stored = r.u32("payload CRC")?;
    if r.pos != bytes.len() {
        return Err(corrupt(format!(
            "{} trailing bytes after CRC",
            bytes.len() - r.pos
        )));
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(payload);
    let crc_actual = hasher.finalize();
    if crc_actual != crc_stored {
        return Err(corrupt(format!(
            "CRC mismatch: stored {crc_stored:#010x}, computed {crc_actual:#010x}"
        )));
    }

    // decode values per manifest entry
    let mut values: HashMap<String, Tensor> = HashMap::with_capacity(entry_count);
    let mut offset = 0usize;
    for (name, shape) in manifest {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let b = &payload[(offset + i) * 8..][..8];
            data.push(f64::from_le_bytes([
                b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
            ]));
        }
        offset += numel;
        values.insert(name, Tensor::new(shape, data)?);
    }

    let mut model = MoeModel::new(&config)?;
    let mut missing = Vec::new();
    model.visit_params_mut(&mut |p| match values.remove(p.name()) {
        Some(t) if t.shape() == p.value().shape() => {
            *p.value_mut() = t;
        }
        Some(t) => missing.push(format!(
            "{}: shape {:?} != expected {:?}",
            p.name(),
            t.shape(),
            p.value().shape()
        )),
        None => missing.push(format!("{}: absent from checkpoint", p.name())),
    });
    if !missing.is_empty() {
        return Err(corrupt(format!("manifest mismatch: {}", missing.join("; "))));
    }
    if !values.is_empty() {
        let extra: Vec<String> = values.keys().cloned().collect();
        return Err(corrupt(format!("unknown entries in checkpoint: {extra:?}")));
    }
    Ok(model)
}
