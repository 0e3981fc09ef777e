//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"GNNPCKPT"  u32 version
//! u64 header length, JSON header {"config": ModelConfig, "schema": Schema}
//! u64 tensor count
//! per tensor: u8 kind (0 parameter, 1 buffer mean, 2 buffer var),
//!             u32 name length, UTF-8 name, u32 ndim, u64 dims...,
//!             f64 payload in row-major order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{bail, Error, Result};
use crate::graph::Schema;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GNNPCKPT";
const VERSION: u32 = 1;
const KIND_PARAM: u8 = 0;
const KIND_MEAN: u8 = 1;
const KIND_VAR: u8 = 2;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    schema: Schema,
}

fn ck<T>(r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Checkpoint(e.to_string()))
}

fn put_tensor(w: &mut impl Write, kind: u8, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    ck(w.write_all(&[kind]))?;
    ck(w.write_all(&(name.len() as u32).to_le_bytes()))?;
    ck(w.write_all(name.as_bytes()))?;
    ck(w.write_all(&(shape.len() as u32).to_le_bytes()))?;
    for &d in shape {
        ck(w.write_all(&(d as u64).to_le_bytes()))?;
    }
    for &x in data {
        ck(w.write_all(&x.to_le_bytes()))?;
    }
    Ok(())
}

pub fn write_checkpoint<S: Scalar>(model: &Model<S>, w: &mut impl Write) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        schema: model.schema.clone(),
    })
    .map_err(|e| Error::Checkpoint(e.to_string()))?;
    ck(w.write_all(MAGIC))?;
    ck(w.write_all(&VERSION.to_le_bytes()))?;
    ck(w.write_all(&(header.len() as u64).to_le_bytes()))?;
    ck(w.write_all(&header))?;
    let count = model.store.len() + 2 * model.store.buffers().count();
    ck(w.write_all(&(count as u64).to_le_bytes()))?;
    for (name, p) in model.store.iter() {
        put_tensor(w, KIND_PARAM, name, p.value.shape(), &p.value.to_f64_vec())?;
    }
    for (name, b) in model.store.buffers() {
        let f = |v: &[S]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
        put_tensor(w, KIND_MEAN, name, &[b.mean.len()], &f(&b.mean))?;
        put_tensor(w, KIND_VAR, name, &[b.var.len()], &f(&b.var))?;
    }
    Ok(())
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn len(&mut self, limit: u64, what: &str) -> Result<usize> {
        let n = self.u64()?;
        if n > limit {
            bail!(Checkpoint, "implausible {what} {n}");
        }
        Ok(n as usize)
    }
}

/// Rebuilds the model from the stored configuration and overwrites every
/// parameter and statistic with the stored values.
pub fn read_checkpoint<S: Scalar>(r: impl Read) -> Result<Model<S>> {
    let mut r = Reader(r);
    if r.bytes(8)? != MAGIC {
        bail!(Checkpoint, "not a checkpoint file (bad magic)");
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!(Checkpoint, "unsupported checkpoint version {version}");
    }
    let hlen = r.len(1 << 24, "header length")?;
    let header: Header = serde_json::from_slice(&r.bytes(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut model = Model::<S>::build(&header.config, &header.schema)?;
    let count = r.len(1 << 24, "tensor count")?;
    let expected = model.store.len() + 2 * model.store.buffers().count();
    if count != expected {
        bail!(Checkpoint, "{count} tensors stored, model has {expected}");
    }
    for _ in 0..count {
        let kind = r.u8()?;
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.len(1 << 32, "dimension"))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8)?;
        let data: Vec<S> = raw
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        match kind {
            KIND_PARAM => {
                let Some(p) = model.store.get_mut(&name) else {
                    bail!(Checkpoint, "unknown parameter {name:?}");
                };
                if p.value.shape() != shape.as_slice() {
                    bail!(
                        Checkpoint,
                        "parameter {name:?} stored as {shape:?}, model expects {:?}",
                        p.value.shape()
                    );
                }
                p.value = Tensor::new(shape, data)?;
            }
            KIND_MEAN | KIND_VAR => {
                let Some(b) = model.store.buffer_by_name_mut(&name) else {
                    bail!(Checkpoint, "unknown buffer {name:?}");
                };
                let slot = if kind == KIND_MEAN { &mut b.mean } else { &mut b.var };
                if slot.len() != n {
                    bail!(Checkpoint, "buffer {name:?} has {n} entries, model expects {}", slot.len());
                }
                *slot = data;
            }
            other => bail!(Checkpoint, "unknown tensor kind {other}"),
        }
    }
    let mut trailing = [0u8; 1];
    if r.0.read(&mut trailing).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
        bail!(Checkpoint, "trailing bytes after last tensor");
    }
    Ok(model)
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
