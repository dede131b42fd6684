//! LTTF binary tensor format.
//!
//! Layout: `b"LTTF"`, version `0x01`, dtype byte (0 = f32, 1 = f64), rank
//! byte, `rank` little-endian u32 extents, then the row-major little-endian
//! payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LTTF";
pub const VERSION: u8 = 0x01;

pub fn write_tensor<F: Float, W: Write>(out: &mut W, tensor: &Tensor<F>) -> Result<()> {
    let shape = tensor.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::invalid("tensor rank exceeds 255"));
    }
    let mut buf = Vec::with_capacity(8 + 4 * shape.len() + tensor.numel() * F::DTYPE.size());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(F::DTYPE.code());
    buf.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid("tensor extent exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    tensor.data().iter().for_each(|v| v.write_le(&mut buf));
    out.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(input: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated tensor while reading {what}"))
        } else {
            Error::Io(e)
        }
    })?;
    Ok(buf)
}

/// Reads one tensor, converting the stored precision to `F` if needed.
pub fn read_tensor<F: Float, R: Read>(input: &mut R) -> Result<Tensor<F>> {
    let head = read_exact(input, 7, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Format("bad tensor magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {}", head[4])));
    }
    let dtype = DType::from_code(head[5]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[5])))?;
    let rank = head[6] as usize;
    if rank == 0 {
        return Err(Error::Format("tensor rank must be at least 1".into()));
    }
    let dims = read_exact(input, 4 * rank, "extents")?;
    let shape: Vec<usize> = dims
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Format(format!("zero extent in shape {shape:?}")));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor too large".into()))?;
    let payload = read_exact(input, numel * dtype.size(), "payload")?;
    let data: Vec<F> = match dtype {
        DType::F32 => payload
            .chunks(4)
            .map(|c| F::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => payload.chunks(8).map(|c| F::from_f64_lossy(f64::read_le(c))).collect(),
    };
    Tensor::new(&shape, data)
}

pub fn write_tensor_file<F: Float>(path: &Path, tensor: &Tensor<F>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_tensor(&mut out, tensor)?;
    out.flush()?;
    Ok(())
}

/// Reads a whole file holding exactly one tensor.
pub fn read_tensor_file<F: Float>(path: &Path) -> Result<Tensor<F>> {
    let mut input = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut input)?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format(format!("trailing bytes after tensor in {}", path.display())));
    }
    Ok(t)
}
