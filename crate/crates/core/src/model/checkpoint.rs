//! Flat binary parameter checkpoints.
//!
//! Layout (little-endian): magic `V2XC`, u32 version, u32 tensor count,
//! then `rows, cols` as u32 pairs for every tensor, then all entries as f64
//! in visit order.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Parameterized;

const MAGIC: &[u8; 4] = b"V2XC";
const VERSION: u32 = 1;

pub fn write_checkpoint<M: Parameterized + ?Sized, W: Write>(model: &M, mut w: W) -> Result<()> {
    let tensors = model.params();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in &tensors {
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
    }
    for t in &tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes<M: Parameterized + ?Sized>(model: &M) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("writing to memory");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Decode("truncated checkpoint header".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Overwrites the parameters of `model` from a checkpoint whose manifest
/// must match the model's tensor shapes exactly.
pub fn read_checkpoint<M: Parameterized + ?Sized, R: Read>(model: &mut M, mut r: R) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Decode("truncated checkpoint header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Decode("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Decode(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|m| m.shape()).collect();
    if count != shapes.len() {
        return Err(Error::Decode(format!(
            "checkpoint has {count} tensors, model has {}",
            shapes.len()
        )));
    }
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        let (cr, cc) = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
        if (cr, cc) != (rows, cols) {
            return Err(Error::Decode(format!(
                "tensor {i} is {cr}x{cc} in checkpoint, {rows}x{cols} in model"
            )));
        }
    }
    let mut values = Vec::new();
    for &(rows, cols) in &shapes {
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Decode("truncated checkpoint data".into()))?;
        let t: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Decode("non-finite value in checkpoint".into()));
        }
        values.push(t);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Decode("trailing bytes after checkpoint".into()));
    }
    let mut i = 0;
    model.visit_mut(&mut |m| {
        m.data_mut().copy_from_slice(&values[i]);
        i += 1;
    });
    Ok(())
}
