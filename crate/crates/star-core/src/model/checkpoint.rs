//! Binary checkpoint container.
//!
//! Layout: magic "STARCKPT", version byte, method byte, f64 rate,
//! config block (nine u32 fields), u32 parameter count, then per
//! parameter: u32 name length, UTF-8 name, u8 rank, u32 dims,
//! 32-bit little-endian float values. Parameters appear in store
//! insertion order so a fixed seed reproduces identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Result, StarError};

use super::config::{Method, ModelConfig};
use super::TransducerModel;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STARCKPT";
const VERSION: u8 = 1;

pub fn save(model: &TransducerModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[VERSION, model.method.code()])?;
    w.write_all(&model.rate.to_le_bytes())?;
    let c = &model.config;
    for field in [
        c.d_model,
        c.enc_layers,
        c.dec_layers,
        c.heads,
        c.ffn_dim,
        c.vocab,
        c.max_src_positions,
        c.max_tgt_positions,
        c.frame_dim,
    ] {
        w.write_all(&(field as u32).to_le_bytes())?;
    }
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, tensor) in model.params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        w.write_all(&[shape.len() as u8])?;
        for &dim in shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TransducerModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| StarError::Format("truncated checkpoint: missing magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(StarError::Format(format!(
            "bad checkpoint magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != VERSION {
        return Err(StarError::Format(format!("unsupported checkpoint version {}", head[0])));
    }
    let method = Method::from_code(head[1])?;
    let mut rate_bytes = [0u8; 8];
    r.read_exact(&mut rate_bytes)?;
    let rate = f64::from_le_bytes(rate_bytes);
    let mut fields = [0usize; 9];
    for f in fields.iter_mut() {
        *f = read_u32(&mut r)? as usize;
    }
    let config = ModelConfig {
        d_model: fields[0],
        enc_layers: fields[1],
        dec_layers: fields[2],
        heads: fields[3],
        ffn_dim: fields[4],
        vocab: fields[5],
        max_src_positions: fields[6],
        max_tgt_positions: fields[7],
        frame_dim: fields[8],
    };
    config.validate()?;
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| StarError::Format("truncated checkpoint: parameter name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| StarError::Format("parameter name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|_| {
                StarError::Format(format!("truncated checkpoint: values of {name}"))
            })?;
            values.push(f32::from_le_bytes(buf) as f64);
        }
        params.insert(name, Tensor::new(shape, values)?);
    }
    TransducerModel::from_parts(config, method, rate, params)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| StarError::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(buf))
}
