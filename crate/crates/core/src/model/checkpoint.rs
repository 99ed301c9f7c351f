//! Binary checkpoint: magic, version, config, then named f32 tensors (LE).

use std::io::{Read, Write};

use super::{Layout, ModelConfig, ModelParams, Real};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TKVM";
const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::corrupt(format!("checkpoint truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint<F: Real>(params: &ModelParams<F>, w: &mut impl Write) -> std::io::Result<()> {
    let c = &params.cfg;
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq_len] {
        put_u32(w, v as u32)?;
    }
    w.write_all(&c.dropout.to_le_bytes())?;
    let layout = params.layout();
    put_u32(w, layout.tensors().len() as u32)?;
    for t in layout.tensors() {
        put_u32(w, t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        put_u32(w, t.shape.len() as u32)?;
        for &d in &t.shape {
            put_u32(w, d as u32)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in &params.data[t.offset..t.offset + t.numel()] {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<F: Real>(r: &mut impl Read) -> Result<ModelParams<F>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::corrupt(format!("checkpoint truncated: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::corrupt("not a model checkpoint"));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(Error::corrupt(format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = get_u32(r)? as usize;
    }
    let dropout = f32::from_bits(get_u32(r)?);
    let cfg = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        d_ff: dims[4],
        max_seq_len: dims[5],
        dropout,
    };
    cfg.validate().map_err(|e| Error::corrupt(format!("checkpoint config: {e}")))?;
    let layout = Layout::new(&cfg);
    let n = get_u32(r)? as usize;
    if n != layout.tensors().len() {
        return Err(Error::corrupt(format!("expected {} tensors, found {n}", layout.tensors().len())));
    }
    let mut data = vec![F::zero(); layout.num_params()];
    for t in layout.tensors() {
        let name_len = get_u32(r)? as usize;
        if name_len > 256 {
            return Err(Error::corrupt("tensor name too long"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| Error::corrupt(format!("checkpoint truncated: {e}")))?;
        if name != t.name.as_bytes() {
            return Err(Error::corrupt(format!(
                "expected tensor {}, found {}",
                t.name,
                String::from_utf8_lossy(&name)
            )));
        }
        let ndim = get_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim.min(8) {
            shape.push(get_u32(r)? as usize);
        }
        if shape != t.shape {
            return Err(Error::corrupt(format!("tensor {} has shape {shape:?}, expected {:?}", t.name, t.shape)));
        }
        let mut buf = vec![0u8; t.numel() * 4];
        r.read_exact(&mut buf).map_err(|e| Error::corrupt(format!("checkpoint truncated: {e}")))?;
        for (dst, b) in data[t.offset..t.offset + t.numel()].iter_mut().zip(buf.chunks_exact(4)) {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(Error::corrupt(format!("non-finite value in {}", t.name)));
            }
            *dst = F::of(v as f64);
        }
    }
    Ok(ModelParams { cfg, data })
}
