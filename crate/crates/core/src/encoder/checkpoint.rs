//! LTTW weight files: `b"LTTW"`, u32 entry count, then per entry a u16 name
//! length, the UTF-8 name and an embedded LTTF tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, NormStats};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Float, ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"LTTW";
const META_CONFIG: &str = "meta.config";
const META_MEAN: &str = "meta.norm_mean";
const META_STD: &str = "meta.norm_std";

fn write_header<W: Write>(out: &mut W, count: usize) -> Result<()> {
    let count = u32::try_from(count).map_err(|_| Error::invalid("too many checkpoint entries"))?;
    out.write_all(MAGIC)?;
    out.write_all(&count.to_le_bytes())?;
    Ok(())
}

fn write_entry<F: Float, W: Write>(out: &mut W, name: &str, t: &Tensor<F>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::invalid("parameter name too long"))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    write_tensor(out, t)
}

/// Writes named tensors in order.
pub fn write_entries<F: Float, W: Write>(out: &mut W, entries: &[(&str, &Tensor<F>)]) -> Result<()> {
    write_header(out, entries.len())?;
    for (name, t) in entries {
        write_entry(out, name, t)?;
    }
    Ok(())
}

fn read_bytes<R: Read>(input: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    input.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

/// Reads every entry, converting tensors to `F`. Names must be unique.
pub fn read_entries<F: Float, R: Read>(input: &mut R) -> Result<Vec<(String, Tensor<F>)>> {
    if read_bytes(input, 4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let count = u32::from_le_bytes(read_bytes(input, 4)?.try_into().unwrap()) as usize;
    let mut entries: Vec<(String, Tensor<F>)> = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(read_bytes(input, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_bytes(input, len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
        entries.push((name, read_tensor(input)?));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(entries)
}

pub fn save_entries<F: Float>(path: &Path, entries: &[(&str, &Tensor<F>)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_entries(&mut out, entries)?;
    out.flush()?;
    Ok(())
}

pub fn load_entries<F: Float>(path: &Path) -> Result<Vec<(String, Tensor<F>)>> {
    read_entries(&mut BufReader::new(File::open(path)?))
}

/// Saves weights, architecture and normalization statistics. Metadata is
/// always stored in f64, weights in the model's precision.
pub fn write_checkpoint<F: Float>(path: &Path, model: &Model<F>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(&mut out, model.params.len() + 3)?;
    write_entry(&mut out, META_CONFIG, &Tensor::from_vec(model.config.to_meta()))?;
    write_entry(&mut out, META_MEAN, &Tensor::from_vec(model.norm.mean.clone()))?;
    write_entry(&mut out, META_STD, &Tensor::from_vec(model.norm.std.clone()))?;
    for p in model.params.iter() {
        write_entry(&mut out, &p.name, &p.value)?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a model; every weight comes back frozen.
pub fn read_checkpoint<F: Float>(path: &Path) -> Result<Model<F>> {
    let mut entries = load_entries::<f64>(path)?;
    let mut take = |name: &str| -> Result<Tensor<f64>> {
        let i = entries
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        Ok(entries.remove(i).1)
    };
    let config = ModelConfig::from_meta(take(META_CONFIG)?.data())?;
    let norm = NormStats {
        mean: take(META_MEAN)?.into_data(),
        std: take(META_STD)?.into_data(),
    };
    if norm.mean.len() != config.vision.channels || norm.std.len() != config.vision.channels {
        return Err(Error::Format("normalization stats do not match the channel count".into()));
    }
    if norm.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Format("normalization std must be positive".into()));
    }
    // Check names and shapes against a fresh initialization of the same config.
    let reference = Model::<F>::init(config.clone(), &mut crate::rng::stream(0, "checkpoint-shape"))?;
    if entries.len() != reference.params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} weights, architecture needs {}",
            entries.len(),
            reference.params.len()
        )));
    }
    let mut params = ParamStore::new();
    for p in reference.params.iter() {
        let (_, t) = entries
            .iter()
            .find(|(n, _)| *n == p.name)
            .ok_or_else(|| Error::MissingParameter(p.name.clone()))?;
        if t.shape() != p.value.shape() {
            return Err(Error::shape("read_checkpoint", t.shape(), p.value.shape()));
        }
        params.insert(p.name.clone(), t.cast::<F>(), false)?;
    }
    Ok(Model { config, params, norm })
}
