//! Precomputed class text features and the cosine classifier.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{tokenizer, Model};
use crate::error::{Error, Result};
use crate::tensor::{lit, Float, Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"LTTC";
const NORM_TOLERANCE: f64 = 1e-6;

/// `K` unit-norm class embeddings; row order is class-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatureTable<F> {
    class_names: Vec<String>,
    /// `[K, D_e]`
    features: Tensor<F>,
}

impl<F: Float> TextFeatureTable<F> {
    pub fn new(class_names: Vec<String>, features: Tensor<F>) -> Result<Self> {
        let shape = features.shape();
        if shape.len() != 2 || shape[0] != class_names.len() {
            return Err(Error::shape("text_table", shape, &[class_names.len()]));
        }
        if class_names.len() < 2 {
            return Err(Error::invalid("a text table needs at least two classes"));
        }
        for (k, row) in features.data().chunks(shape[1]).enumerate() {
            let norm = row.iter().map(|&v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            // f32 storage rounds each entry, so allow that on top of the contract.
            let tol = NORM_TOLERANCE.max(4.0 * F::epsilon().to_f64_lossy() * (shape[1] as f64).sqrt());
            if (norm - 1.0).abs() > tol {
                return Err(Error::invalid(format!("row {k} has norm {norm}, expected 1")));
            }
        }
        Ok(Self {
            class_names,
            features,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor<F> {
        &self.features
    }

    pub fn cast<G: Float>(&self) -> TextFeatureTable<G> {
        TextFeatureTable {
            class_names: self.class_names.clone(),
            features: self.features.cast(),
        }
    }

    /// Class probabilities for a batch of embeddings `[B, D_e]`:
    /// `softmax(cos(t_i, v) · inv_temperature)` per row.
    pub fn probabilities(&self, tape: &mut Tape<F>, embeddings: Var, inv_temperature: F) -> Result<Var> {
        let logits = self.logits(tape, embeddings, inv_temperature)?;
        Ok(tape.softmax(logits))
    }

    pub fn logits(&self, tape: &mut Tape<F>, embeddings: Var, inv_temperature: F) -> Result<Var> {
        if tape.shape(embeddings).last() != Some(&self.dim()) {
            return Err(Error::shape("classify", tape.shape(embeddings), self.features.shape()));
        }
        let t = tape.constant(self.features.clone());
        let v = tape.l2_normalize(embeddings);
        let cos = tape.matmul_nt(v, t)?;
        Ok(tape.scale(cos, inv_temperature))
    }

    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.num_classes() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for name in &self.class_names {
            let len = u16::try_from(name.len()).map_err(|_| Error::invalid("class name longer than 65535 bytes"))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
        }
        for &v in self.features.data() {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(input: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad text table magic".into()));
        }
        let k = cur.u32()? as usize;
        let d = cur.u32()? as usize;
        if d == 0 {
            return Err(Error::Format("text table has zero width".into()));
        }
        let mut names = Vec::with_capacity(k.min(1 << 16));
        for _ in 0..k {
            let len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("class name is not UTF-8".into()))?;
            names.push(name.to_string());
        }
        let payload = cur.take(k * d * 4)?;
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after text table".into()));
        }
        let data = payload
            .chunks(4)
            .map(|c| lit::<F>(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Self::new(names, Tensor::new(&[k, d], data)?).map_err(|e| match e {
            Error::Invalid(msg) => Error::Format(msg),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated text table".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Probability vector over the table's classes for one embedding.
pub fn classify<F: Float>(class_embedding: &[F], table: &TextFeatureTable<F>, inv_temperature: F) -> Result<Vec<F>> {
    if !(inv_temperature > F::zero()) || !inv_temperature.is_finite() {
        return Err(Error::invalid("temperature must be positive and finite"));
    }
    if class_embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("embedding has non-finite entries"));
    }
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(&[1, class_embedding.len()], class_embedding.to_vec())?);
    let p = table.probabilities(&mut tape, v, inv_temperature)?;
    Ok(tape.value(p).to_vec())
}

/// Encodes every `template` with `{class}` filled in, normalizes each,
/// averages per class and renormalizes.
pub fn build_text_table<F: Float>(model: &Model<F>, class_names: &[String], templates: &[String]) -> Result<TextFeatureTable<F>> {
    if templates.is_empty() {
        return Err(Error::invalid("at least one prompt template is required"));
    }
    if let Some(t) = templates.iter().find(|t| !t.contains("{class}")) {
        return Err(Error::invalid(format!("template `{t}` has no {{class}} slot")));
    }
    for name in class_names {
        tokenizer::check_words(name)?;
    }
    let ctx = model.config.text.context_len;
    let mut sequences = Vec::with_capacity(class_names.len() * templates.len());
    for name in class_names {
        for t in templates {
            sequences.push(tokenizer::tokenize(&t.replace("{class}", name), ctx)?);
        }
    }
    let mut tape = Tape::new();
    let txt = model.bind_text(&mut tape)?;
    let emb = txt.forward(&mut tape, &sequences)?;
    let emb = tape.l2_normalize(emb);
    let d = tape.shape(emb)[1];
    let values = tape.value(emb);
    let mut rows = Vec::with_capacity(class_names.len() * d);
    for per_class in values.chunks(templates.len() * d) {
        let members: Vec<&[F]> = per_class.chunks(d).collect();
        rows.extend(ensemble_average(&members)?);
    }
    TextFeatureTable::new(class_names.to_vec(), Tensor::new(&[class_names.len(), d], rows)?)
}

/// Mean of unit vectors, renormalized to unit length.
pub fn ensemble_average<F: Float>(members: &[&[F]]) -> Result<Vec<F>> {
    let d = members.first().ok_or_else(|| Error::invalid("nothing to average"))?.len();
    if members.iter().any(|m| m.len() != d) {
        return Err(Error::invalid("ensemble members differ in width"));
    }
    let mut mean = vec![F::zero(); d];
    for m in members {
        mean.iter_mut().zip(m.iter()).for_each(|(a, &v)| *a += v);
    }
    let inv = lit::<F>(1.0 / members.len() as f64);
    mean.iter_mut().for_each(|a| *a *= inv);
    let norm = mean.iter().map(|&x| x * x).sum::<F>().sqrt().max(lit(1e-12));
    Ok(mean.into_iter().map(|x| x / norm).collect())
}
