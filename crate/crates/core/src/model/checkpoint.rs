//! Single-file weight checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "DTRINET1"
//! config_len   u32      byte length of the config text
//! config       UTF-8    ModelConfig as `key = value` lines
//! tensor_count u32
//! per tensor:
//!   name_len   u16
//!   name       UTF-8    dotted parameter path
//!   dtype      u8       4 = f32, 8 = f64
//!   rank       u8
//!   dims       u64 x rank
//!   data       dtype x product(dims), row-major
//! ```
//!
//! Trainable parameters and normalization running statistics are both
//! stored. Loading rebuilds the network from the embedded config and fills
//! tensors by name, so files are portable across this crate's versions as
//! long as the architecture matches; dtype is converted on load when it
//! differs from the requested precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::{parse_config_text, ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, DeepTriNet};
use crate::nn::{Parameterized, Scalar};

const MAGIC: &[u8; 8] = b"DTRINET1";

fn write_all(path: &Path, w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_exact(path: &Path, r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(path: &Path, r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(path, r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// One tensor as written to or read from a checkpoint, dtype-erased.
struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn write_tensor<F: Scalar>(
    path: &Path,
    w: &mut impl Write,
    name: &str,
    dims: &[usize],
    values: impl Iterator<Item = F>,
) -> Result<()> {
    let name_bytes = name.as_bytes();
    write_all(path, w, &(name_bytes.len() as u16).to_le_bytes())?;
    write_all(path, w, name_bytes)?;
    let dtype = std::mem::size_of::<F>() as u8;
    write_all(path, w, &[dtype, dims.len() as u8])?;
    for &d in dims {
        write_all(path, w, &(d as u64).to_le_bytes())?;
    }
    for v in values {
        match dtype {
            4 => write_all(path, w, &(v.to_f64() as f32).to_le_bytes())?,
            _ => write_all(path, w, &v.to_f64().to_le_bytes())?,
        }
    }
    Ok(())
}

fn read_tensor(path: &Path, r: &mut impl Read) -> Result<Tensor> {
    let mut b2 = [0u8; 2];
    read_exact(path, r, &mut b2)?;
    let name_len = u16::from_le_bytes(b2) as usize;
    let mut name_bytes = vec![0u8; name_len];
    read_exact(path, r, &mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::parse(path, "tensor name is not valid UTF-8"))?;
    let mut hdr = [0u8; 2];
    read_exact(path, r, &mut hdr)?;
    let (dtype, rank) = (hdr[0], hdr[1] as usize);
    if dtype != 4 && dtype != 8 {
        return Err(Error::parse(path, format!("unknown dtype tag {dtype}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b8 = [0u8; 8];
        read_exact(path, r, &mut b8)?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    if dtype == 4 {
        let mut buf = vec![0u8; count * 4];
        read_exact(path, r, &mut buf)?;
        for chunk in buf.chunks_exact(4) {
            data.push(f64::from(f32::from_le_bytes(chunk.try_into().unwrap())));
        }
    } else {
        let mut buf = vec![0u8; count * 8];
        read_exact(path, r, &mut buf)?;
        for chunk in buf.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
    }
    Ok(Tensor { name, dims, data })
}

/// Writes the model's configuration, parameters, and running statistics.
pub fn save_checkpoint<F: Scalar>(model: &mut DeepTriNet<F>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_all(path, &mut w, MAGIC)?;
    let config_text = model.config().to_text();
    write_all(path, &mut w, &(config_text.len() as u32).to_le_bytes())?;
    write_all(path, &mut w, config_text.as_bytes())?;

    // Parameters and buffers borrow the model mutably, so each pass gets
    // its own scope.
    let n_params = {
        let mut params = Vec::new();
        model.collect_params("", &mut params);
        params.len()
    };
    let n_buffers = {
        let mut buffers = Vec::new();
        model.collect_buffers("", &mut buffers);
        buffers.len()
    };
    write_all(path, &mut w, &((n_params + n_buffers) as u32).to_le_bytes())?;
    {
        let mut params = Vec::new();
        model.collect_params("", &mut params);
        for p in &params {
            write_tensor(path, &mut w, &p.name, p.value.shape(), p.value.iter().copied())?;
        }
    }
    {
        let mut buffers = Vec::new();
        model.collect_buffers("", &mut buffers);
        for b in &buffers {
            write_tensor(path, &mut w, &b.name, b.value.shape(), b.value.iter().copied())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rebuilds a model from a checkpoint file.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<DeepTriNet<F>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(path, &mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::parse(path, "not a checkpoint file (bad magic)"));
    }
    let config_len = read_u32(path, &mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    read_exact(path, &mut r, &mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| Error::parse(path, "config block is not valid UTF-8"))?;
    let (config, _) = parse_config_text(&config_text, ModelConfig::default(), TrainConfig::default())
        .map_err(|e| Error::parse(path, format!("embedded config: {e}")))?;

    let mut model = build_model::<F>(&config, 0)?;
    let count = read_u32(path, &mut r)? as usize;
    let mut tensors = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let t = read_tensor(path, &mut r)?;
        if tensors.insert(t.name.clone(), t).is_some() {
            return Err(Error::parse(path, "duplicate tensor name"));
        }
    }

    {
        let mut params = Vec::new();
        model.collect_params("", &mut params);
        for p in &mut params {
            let t = tensors
                .remove(&p.name)
                .ok_or_else(|| Error::parse(path, format!("missing tensor {:?}", p.name)))?;
            fill(path, &t, &mut p.value)?;
        }
    }
    {
        let mut buffers = Vec::new();
        model.collect_buffers("", &mut buffers);
        for b in &mut buffers {
            let t = tensors
                .remove(&b.name)
                .ok_or_else(|| Error::parse(path, format!("missing tensor {:?}", b.name)))?;
            fill(path, &t, &mut b.value)?;
        }
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::parse(
            path,
            format!("checkpoint carries unknown tensor {name:?}"),
        ));
    }
    Ok(model)
}

fn fill<F: Scalar>(
    path: &Path,
    t: &Tensor,
    view: &mut ndarray::ArrayViewMutD<'_, F>,
) -> Result<()> {
    if t.dims != view.shape() {
        return Err(Error::parse(
            path,
            format!(
                "tensor {:?} has shape {:?}, expected {:?}",
                t.name,
                t.dims,
                view.shape()
            ),
        ));
    }
    for (dst, &src) in view.iter_mut().zip(t.data.iter()) {
        *dst = F::from_f64(src);
    }
    Ok(())
}
