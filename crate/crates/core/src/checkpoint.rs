//! Checkpoint file I/O.
//!
//! Layout: magic `DFAD` | format version u32 LE | header length u32 LE |
//! JSON header (config + tensor manifest with name, group, trainable,
//! dtype, shape, byte offset) | raw little-endian tensor payloads in
//! manifest order. Offsets are relative to the start of the payload
//! section. Running statistics are stored alongside parameters as
//! non-trainable tensors of their owning group.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Group, Model};
use crate::tensor::{Dtype, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DFAD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    group: Group,
    trainable: bool,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
}

fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<u64> {
    let mut written = 0u64;
    let mut buf = Vec::with_capacity(8192);
    for &v in t.data() {
        match T::DTYPE {
            Dtype::F32 => buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
            Dtype::F64 => buf.extend_from_slice(&v.to_f64().to_le_bytes()),
        }
        if buf.len() >= 8192 {
            w.write_all(&buf)?;
            written += buf.len() as u64;
            buf.clear();
        }
    }
    w.write_all(&buf)?;
    written += buf.len() as u64;
    Ok(written)
}

fn read_tensor<T: Scalar, R: Read>(r: &mut R, shape: &[usize], dtype: Dtype) -> Result<Tensor<T>> {
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {:?}, model expects {:?}",
            dtype,
            T::DTYPE
        )));
    }
    let numel: usize = shape.iter().product();
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut bytes = vec![0u8; numel * width];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated tensor payload: {}", e)))?;
    let data: Vec<T> = match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| {
                T::from_f64(f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            })
            .collect(),
    };
    Tensor::new(shape, data)
}

/// Write the full model (parameters and running statistics) to `path`.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut manifest = Vec::new();
    let mut offset = 0u64;
    let width = match T::DTYPE {
        Dtype::F32 => 4u64,
        Dtype::F64 => 8u64,
    };
    for p in &model.params {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            group: p.group,
            trainable: p.trainable,
            dtype: T::DTYPE,
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.numel() as u64 * width;
    }
    for b in &model.buffers {
        manifest.push(ManifestEntry {
            name: b.name.clone(),
            group: Group::Lsa,
            trainable: false,
            dtype: T::DTYPE,
            shape: b.value.shape().to_vec(),
            offset,
        });
        offset += b.value.numel() as u64 * width;
    }
    let header = serde_json::to_vec(&Header { config: model.config.clone(), manifest })?;

    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for p in &model.params {
        write_tensor(&mut w, &p.value)?;
    }
    for b in &model.buffers {
        write_tensor(&mut w, &b.value)?;
    }
    w.flush()?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("file too short for magic: {}", e)))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"DFAD\"", magic)));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(|e| Error::Format(format!("missing version: {}", e)))?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {} (supported: {})",
            version, FORMAT_VERSION
        )));
    }
    let mut hl = [0u8; 4];
    r.read_exact(&mut hl).map_err(|e| Error::Format(format!("missing header length: {}", e)))?;
    let header_len = u32::from_le_bytes(hl) as usize;
    let mut hbuf = vec![0u8; header_len];
    r.read_exact(&mut hbuf)
        .map_err(|e| Error::Format(format!("truncated header: {}", e)))?;
    let header: Header =
        serde_json::from_slice(&hbuf).map_err(|e| Error::Format(format!("bad header JSON: {}", e)))?;
    header.config.validate()?;
    Ok(header)
}

/// Load a full checkpoint: every parameter and buffer must be present.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r)?;
    let mut model: Model<T> = Model::build(&header.config, 0)?;
    let payload_start = r.stream_position()?;

    let mut filled = vec![false; model.params.len()];
    let mut filled_buf = vec![false; model.buffers.len()];
    for e in &header.manifest {
        r.seek(SeekFrom::Start(payload_start + e.offset))?;
        if let Some(i) = model.params.iter().position(|p| p.name == e.name) {
            let p = &mut model.params[i];
            if p.value.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?} in file but {:?} in model",
                    e.name,
                    e.shape,
                    p.value.shape()
                )));
            }
            if p.trainable != e.trainable {
                return Err(Error::Format(format!(
                    "tensor {} trainable flag {} does not match policy-derived {}",
                    e.name, e.trainable, p.trainable
                )));
            }
            p.value = read_tensor(&mut r, &e.shape, e.dtype)?;
            filled[i] = true;
        } else if let Some(i) = model.buffers.iter().position(|b| b.name == e.name) {
            model.buffers[i].value = read_tensor(&mut r, &e.shape, e.dtype)?;
            filled_buf[i] = true;
        } else {
            return Err(Error::Format(format!("file tensor {} not present in model", e.name)));
        }
    }
    if let Some(i) = filled.iter().position(|f| !f) {
        return Err(Error::Format(format!(
            "checkpoint is missing parameter {}",
            model.params[i].name
        )));
    }
    if let Some(i) = filled_buf.iter().position(|f| !f) {
        return Err(Error::Format(format!(
            "checkpoint is missing buffer {}",
            model.buffers[i].name
        )));
    }
    Ok(model)
}

/// Load only the tensors of the given groups into an existing model
/// (weight import). Every matching tensor in the file must exist in the
/// model with the same shape; other groups are left untouched.
pub fn load_group_tensors<T: Scalar>(
    model: &mut Model<T>,
    path: &Path,
    groups: &[Group],
) -> Result<usize> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r)?;
    let payload_start = r.stream_position()?;
    let mut loaded = 0usize;
    for e in header.manifest.iter().filter(|e| groups.contains(&e.group)) {
        r.seek(SeekFrom::Start(payload_start + e.offset))?;
        if let Some(i) = model.params.iter().position(|p| p.name == e.name) {
            if model.params[i].value.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?} in file but {:?} in model",
                    e.name,
                    e.shape,
                    model.params[i].value.shape()
                )));
            }
            model.params[i].value = read_tensor(&mut r, &e.shape, e.dtype)?;
            loaded += 1;
        } else if let Some(i) = model.buffers.iter().position(|b| b.name == e.name) {
            model.buffers[i].value = read_tensor(&mut r, &e.shape, e.dtype)?;
            loaded += 1;
        } else {
            return Err(Error::Format(format!(
                "group tensor {} from file not present in model (name-set mismatch)",
                e.name
            )));
        }
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::tensor::Tensor;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("dfadapter-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig::tiny();
        let model: Model<f32> = Model::build(&cfg, 11).unwrap();
        let path = tmp("roundtrip.dfad");
        save_checkpoint(&model, &path).unwrap();
        let loaded: Model<f32> = load_checkpoint(&path).unwrap();
        let images = Tensor::from_fn(&[2, 3, 64, 64], |i| (i % 71) as f32 / 71.0);
        let a = model.forward_logits(&images).unwrap();
        let b = loaded.forward_logits(&images).unwrap();
        assert_eq!(a.data(), b.data());
        for (p, q) in model.params.iter().zip(&loaded.params) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.trainable, q.trainable);
            assert_eq!(p.value.data(), q.value.data());
        }
    }

    #[test]
    fn partial_backbone_load_leaves_adapters_at_init() {
        let cfg = ModelConfig::tiny();
        let donor: Model<f32> = Model::build(&cfg, 21).unwrap();
        let path = tmp("backbone.dfad");
        save_checkpoint(&donor, &path).unwrap();

        let mut target: Model<f32> = Model::build(&cfg, 22).unwrap();
        let before: Vec<Vec<f32>> = target
            .params
            .iter()
            .filter(|p| p.group != Group::Backbone)
            .map(|p| p.value.data().to_vec())
            .collect();
        let loaded = load_group_tensors(&mut target, &path, &[Group::Backbone]).unwrap();
        assert!(loaded > 0);
        for (p, q) in donor
            .params
            .iter()
            .zip(&target.params)
            .filter(|(p, _)| p.group == Group::Backbone)
        {
            assert_eq!(p.value.data(), q.value.data());
        }
        let after: Vec<Vec<f32>> = target
            .params
            .iter()
            .filter(|p| p.group != Group::Backbone)
            .map(|p| p.value.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let cfg = ModelConfig::tiny();
        let model: Model<f32> = Model::build(&cfg, 5).unwrap();
        let path = tmp("corrupt.dfad");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(Error::Format(_)) => {}
            Err(e) => panic!("expected format error, got {e}"),
            Ok(_) => panic!("corrupt magic accepted"),
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let cfg = ModelConfig::tiny();
        let model: Model<f32> = Model::build(&cfg, 5).unwrap();
        let path = tmp("truncated.dfad");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(Error::Format(_)) => {}
            Err(e) => panic!("expected format error, got {e}"),
            Ok(_) => panic!("truncated file accepted"),
        }
    }
}
