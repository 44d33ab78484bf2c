//! Binary checkpoints: magic, JSON config echo, then every tensor with its
//! name and shape as little-endian 64-bit values.

use std::io::{Read, Write};

use super::{SequenceModelConfig, SequenceModelParams, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PATRSEQ1";

fn put_u64<W: Write>(out: &mut W, v: u64) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn put_block<W: Write>(out: &mut W, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    put_u64(out, name.len() as u64)?;
    out.write_all(name.as_bytes())?;
    put_u64(out, rows as u64)?;
    put_u64(out, cols as u64)?;
    for x in data {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_block<R: Read>(input: &mut R) -> Result<Tensor> {
    let len = get_u64(input)? as usize;
    if len > 1 << 16 {
        return Err(Error::invalid("checkpoint tensor name is implausibly long"));
    }
    let mut name = vec![0u8; len];
    input.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::invalid("checkpoint tensor name is not UTF-8"))?;
    let rows = get_u64(input)? as usize;
    let cols = get_u64(input)? as usize;
    let n = rows.checked_mul(cols).ok_or_else(|| Error::invalid("checkpoint tensor too large"))?;
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        input.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(Tensor { name, rows, cols, data })
}

/// Writes parameters followed by the optimizer accumulators.
pub fn write_checkpoint<W: Write>(params: &SequenceModelParams, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    let cfg = serde_json::to_vec(&params.config)?;
    put_u64(&mut out, cfg.len() as u64)?;
    out.write_all(&cfg)?;
    put_u64(&mut out, params.tensors.len() as u64)?;
    for t in &params.tensors {
        put_block(&mut out, &t.name, t.rows, t.cols, &t.data)?;
    }
    for (t, a) in params.tensors.iter().zip(&params.accumulators) {
        put_block(&mut out, &format!("{}.acc", t.name), t.rows, t.cols, a)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<SequenceModelParams> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid("not a sequence-model checkpoint"));
    }
    let len = get_u64(&mut input)? as usize;
    let mut cfg = vec![0u8; len];
    input.read_exact(&mut cfg)?;
    let config: SequenceModelConfig = serde_json::from_slice(&cfg)?;
    // shapes only; the random draws are overwritten below
    let expected =
        SequenceModelParams::init(&SequenceModelConfig { init: super::InitKind::Random, ..config.clone() }, None)?;
    let count = get_u64(&mut input)? as usize;
    if count != expected.tensors.len() {
        return Err(Error::invalid("checkpoint tensor count does not match its config"));
    }
    let mut tensors = Vec::with_capacity(count);
    for want in &expected.tensors {
        let t = get_block(&mut input)?;
        if t.name != want.name || t.rows != want.rows || t.cols != want.cols {
            return Err(Error::invalid(format!("checkpoint tensor `{}` has an unexpected shape", t.name)));
        }
        tensors.push(t);
    }
    let mut accumulators = Vec::with_capacity(count);
    for want in &expected.tensors {
        let t = get_block(&mut input)?;
        if t.name != format!("{}.acc", want.name) || t.data.len() != want.data.len() {
            return Err(Error::invalid("checkpoint accumulators do not match the parameters"));
        }
        accumulators.push(t.data);
    }
    Ok(SequenceModelParams { config, tensors, accumulators })
}
