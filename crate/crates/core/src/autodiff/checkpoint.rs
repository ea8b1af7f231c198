//! Binary parameter checkpoints.
//!
//! Layout (little-endian): `b"IODC"`, version `u32`, tensor count `u32`, then
//! per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims and
//! `f32` data. Adam moments are stored as `<name>.m1` / `<name>.m2` and the
//! step counter as the scalar `adam.step`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::params::{Param, ParamStore};
use super::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IODC";
pub const VERSION: u32 = 1;
const STEP_NAME: &str = "adam.step";

fn write_tensor<S: Scalar>(out: &mut impl Write, name: &str, t: &Tensor<S>) -> std::io::Result<()> {
    let bytes = name.as_bytes();
    out.write_all(&(bytes.len() as u16).to_le_bytes())?;
    out.write_all(bytes)?;
    out.write_all(&[t.rank() as u8])?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint<S: Scalar>(path: impl AsRef<Path>, store: &ParamStore<S>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(Error::io(path))?;
    let mut out = BufWriter::new(file);
    let count = 3 * store.len() + 1;
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(count as u32).to_le_bytes())?;
        for (name, p) in store.iter() {
            write_tensor(out, name, &p.value)?;
            write_tensor(out, &format!("{name}.m1"), &p.m1)?;
            write_tensor(out, &format!("{name}.m2"), &p.m2)?;
        }
        write_tensor(out, STEP_NAME, &Tensor::<f64>::scalar(store.step() as f64))?;
        out.flush()
    };
    write(&mut out).map_err(Error::io(path))
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| format!("unexpected end of file at byte {}: {e}", self.offset))?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn vec(&mut self, n: usize) -> std::result::Result<Vec<u8>, String> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| format!("unexpected end of file at byte {}: {e}", self.offset))?;
        self.offset += n as u64;
        Ok(buf)
    }
}

/// Reads all named tensors of a checkpoint in file order.
pub fn read_tensors<S: Scalar>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<S>)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(Error::io(path))?;
    let fail = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    let mut cur = Cursor {
        inner: BufReader::new(file),
        offset: 0,
    };
    let magic = cur.bytes::<4>().map_err(fail)?;
    if &magic != MAGIC {
        return Err(fail(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(cur.bytes().map_err(fail)?);
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(cur.bytes().map_err(fail)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(cur.bytes().map_err(fail)?) as usize;
        let name = String::from_utf8(cur.vec(len).map_err(fail)?)
            .map_err(|_| fail("tensor name is not UTF-8".into()))?;
        let [rank] = cur.bytes::<1>().map_err(fail)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.bytes().map_err(fail)?) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.vec(4 * n).map_err(fail)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if cur.inner.read(&mut rest).map_err(Error::io(path))? != 0 {
        return Err(fail(format!("trailing bytes after byte {}", cur.offset)));
    }
    Ok(out)
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<S>> {
    let path = path.as_ref();
    let tensors = read_tensors::<S>(path)?;
    let fail = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    let mut values = std::collections::BTreeMap::new();
    let mut m1 = std::collections::BTreeMap::new();
    let mut m2 = std::collections::BTreeMap::new();
    let mut step = 0u64;
    for (name, t) in tensors {
        if name == STEP_NAME {
            step = t.item()?.to_f64_lossy() as u64;
        } else if let Some(base) = name.strip_suffix(".m1") {
            m1.insert(base.to_string(), t);
        } else if let Some(base) = name.strip_suffix(".m2") {
            m2.insert(base.to_string(), t);
        } else {
            values.insert(name, t);
        }
    }
    let mut store = ParamStore::new();
    for (name, value) in values {
        let zeros = || Tensor::zeros(value.shape().to_vec());
        let p = Param {
            m1: m1.remove(&name).unwrap_or_else(zeros),
            m2: m2.remove(&name).unwrap_or_else(zeros),
            value,
        };
        store
            .insert_with_moments(name.clone(), p)
            .map_err(|_| fail(format!("moment shape mismatch for {name:?}")))?;
    }
    if let Some(orphan) = m1.keys().chain(m2.keys()).next() {
        return Err(fail(format!("moments for unknown parameter {orphan:?}")));
    }
    store.set_step(step);
    Ok(store)
}
