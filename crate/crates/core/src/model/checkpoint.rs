//! Single-file checkpoint: a text header (config + tensor index) followed by
//! one flat little-endian 32-bit parameter blob.
//!
//! Layout:
//! ```text
//! gdsm-checkpoint 1
//! model.h = 13
//! ...                      (full model configuration, key = value)
//! tensors:
//! tensor <name> <byte-offset> <numel> <d0,d1,...>
//! ...
//! data:
//! <raw f32 little-endian>
//! ```
//! Offsets are relative to the first byte after the `data:` line.

use std::fs;
use std::path::Path;

use crate::data::parse_kv;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Model, ModelConfig};

const MAGIC: &str = "gdsm-checkpoint 1";

pub fn save<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for (k, v) in model.cfg.to_kv() {
        header.push_str(&format!("{k} = {v}\n"));
    }
    header.push_str("tensors:\n");
    let mut offset = 0usize;
    for (_, entry) in model.store.iter() {
        let dims: Vec<String> = entry.shape.iter().map(|d| d.to_string()).collect();
        header.push_str(&format!(
            "tensor {} {} {} {}\n",
            entry.name,
            offset,
            entry.data.len(),
            dims.join(",")
        ));
        offset += entry.data.len() * 4;
    }
    header.push_str("data:\n");

    let mut bytes = header.into_bytes();
    bytes.reserve(offset);
    for (_, entry) in model.store.iter() {
        for v in &entry.data {
            bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

struct IndexEntry {
    name: String,
    offset: usize,
    numel: usize,
    shape: Vec<usize>,
}

pub fn load<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let bytes = fs::read(path)?;
    let data_marker = b"data:\n";
    let data_start = find_subslice(&bytes, data_marker)
        .ok_or_else(|| Error::Corruption("checkpoint has no data section".into()))?
        + data_marker.len();
    let header = std::str::from_utf8(&bytes[..data_start])
        .map_err(|_| Error::Corruption("checkpoint header is not UTF-8".into()))?;

    let mut lines = header.lines();
    match lines.next() {
        Some(l) if l == MAGIC => {}
        Some(l) if l.starts_with("gdsm-checkpoint") => {
            return Err(Error::Version(format!("unsupported checkpoint version line '{l}'")))
        }
        _ => return Err(Error::Corruption("not a checkpoint file".into())),
    }

    let mut kv_text = String::new();
    let mut index = Vec::new();
    let mut in_tensors = false;
    for line in lines {
        if line == "tensors:" {
            in_tensors = true;
            continue;
        }
        if line == "data:" {
            break;
        }
        if !in_tensors {
            kv_text.push_str(line);
            kv_text.push('\n');
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "tensor" {
            return Err(Error::Corruption(format!("bad tensor index line '{line}'")));
        }
        let shape: Vec<usize> = parts[4]
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::Corruption(format!("bad shape in '{line}'"))))
            .collect::<Result<_>>()?;
        index.push(IndexEntry {
            name: parts[1].to_string(),
            offset: parts[2].parse().map_err(|_| Error::Corruption("bad offset".into()))?,
            numel: parts[3].parse().map_err(|_| Error::Corruption("bad numel".into()))?,
            shape,
        });
    }

    let mut cfg = ModelConfig::new(2);
    cfg.apply_kv(&parse_kv(&kv_text))?;
    let mut model: Model<S> = Model::init(cfg)?;

    if index.len() != model.store.len() {
        return Err(Error::Corruption(format!(
            "checkpoint holds {} tensors, model expects {}",
            index.len(),
            model.store.len()
        )));
    }
    let blob = &bytes[data_start..];
    for entry in &index {
        let id = model
            .store
            .lookup(&entry.name)
            .ok_or_else(|| Error::Corruption(format!("unknown tensor '{}' in checkpoint", entry.name)))?;
        let expect = model.store.entry(id);
        if expect.shape != entry.shape || expect.data.len() != entry.numel {
            return Err(Error::Corruption(format!(
                "tensor '{}': checkpoint shape {:?} vs model {:?}",
                entry.name, entry.shape, expect.shape
            )));
        }
        let end = entry.offset + entry.numel * 4;
        if end > blob.len() {
            return Err(Error::Corruption(format!(
                "tensor '{}' needs bytes up to {end}, blob holds {}",
                entry.name,
                blob.len()
            )));
        }
        let data: Vec<S> = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|b| S::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        model.store.set_data(id, data);
    }
    Ok(model)
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}
