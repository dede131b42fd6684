use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{contrastive_loss, patchify, tokenizer, BoundText, Model};
use crate::error::{Error, Result};
use crate::lora::{AdaptedEncoder, AdapterSet, LoraConfig};
use crate::rng::Rng;
use crate::tensor::{AdamW, AdamWConfig, Float, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraPretrainConfig {
    pub lora: LoraConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for LoraPretrainConfig {
    fn default() -> Self {
        Self {
            lora: LoraConfig::default(),
            epochs: 1,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 0.05,
        }
    }
}

/// Losses recorded while pre-initializing adapters. `initial_loss` and
/// `final_loss` are evaluated over the same batches in data order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

struct Prepared<F> {
    /// Per pair `[P, patch_dim]` patch rows of the normalized image.
    patches: Vec<Tensor<F>>,
    /// Per pair unit-norm caption embedding from the frozen text encoder.
    text: Vec<Vec<F>>,
}

fn prepare<F: Float>(model: &Model<F>, pairs: &[(Tensor<F>, String)]) -> Result<Prepared<F>> {
    let v = &model.config.vision;
    let mut patches = Vec::with_capacity(pairs.len());
    let mut sequences = Vec::with_capacity(pairs.len());
    for (img, caption) in pairs {
        patches.push(patchify(&[model.norm.apply(img)?], v.patch_size)?);
        sequences.push(tokenizer::tokenize(caption, model.config.text.context_len)?);
    }
    let frozen = frozen_copy(model);
    let mut text = Vec::with_capacity(pairs.len());
    for chunk in sequences.chunks(256) {
        let mut tape = Tape::new();
        let txt = BoundText::bind(&mut tape, &frozen.params, &model.config.text)?;
        let emb = txt.forward(&mut tape, chunk)?;
        let emb = tape.l2_normalize(emb);
        let d = tape.shape(emb)[1];
        text.extend(tape.value(emb).chunks(d).map(|r| r.to_vec()));
    }
    Ok(Prepared { patches, text })
}

fn frozen_copy<F: Float>(model: &Model<F>) -> Model<F> {
    let mut m = model.clone();
    m.freeze();
    m
}

fn batch_loss<F: Float>(
    enc: &AdaptedEncoder<'_, F>,
    data: &Prepared<F>,
    idx: &[usize],
    trainable: bool,
) -> Result<(Tape<F>, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, trainable)?;
    let (p, pd) = (data.patches[0].shape()[0], data.patches[0].shape()[1]);
    let mut rows = Vec::with_capacity(idx.len() * p * pd);
    let mut text = Vec::with_capacity(idx.len() * data.text[0].len());
    for &i in idx {
        rows.extend_from_slice(data.patches[i].data());
        text.extend_from_slice(&data.text[i]);
    }
    let x = tape.constant(Tensor::new(&[idx.len() * p, pd], rows)?);
    let out = bound.vit.forward(&mut tape, x, idx.len(), None, false)?;
    let img = tape.l2_normalize(out.cls);
    let txt = tape.constant(Tensor::new(&[idx.len(), data.text[0].len()], text)?);
    let scale = tape.constant(Tensor::scalar(enc.base.inv_temperature()));
    let loss = contrastive_loss(&mut tape, img, txt, scale)?;
    Ok((tape, loss, bound.adapter_vars))
}

fn batches(size: usize, order: &[usize]) -> Vec<Vec<usize>> {
    order.chunks(size).map(|c| c.to_vec()).collect()
}

/// Mean contrastive loss of the adapted image encoder against frozen
/// caption embeddings over `pairs`, batched in data order.
pub fn contrastive_eval<F: Float>(enc: &AdaptedEncoder<'_, F>, pairs: &[(Tensor<F>, String)], batch_size: usize) -> Result<f64> {
    let data = prepare(enc.base, pairs)?;
    eval_prepared(enc, &data, batch_size)
}

fn eval_prepared<F: Float>(enc: &AdaptedEncoder<'_, F>, data: &Prepared<F>, batch_size: usize) -> Result<f64> {
    let order: Vec<usize> = (0..data.patches.len()).collect();
    let mut total = 0.0;
    let bs = batches(batch_size, &order);
    for b in &bs {
        let (tape, loss, _) = batch_loss(enc, data, b, false)?;
        total += tape.scalar(loss).to_f64_lossy();
    }
    Ok(total / bs.len() as f64)
}

/// Trains only the adapters with the contrastive loss against the frozen
/// text encoder, and pins the result as the state episodes reset to.
pub fn lora_pretrain<F: Float>(
    model: &Model<F>,
    pairs: &[(Tensor<F>, String)],
    config: &LoraPretrainConfig,
    rng: &mut Rng,
) -> Result<(AdapterSet<F>, PretrainLog)> {
    if pairs.is_empty() {
        return Err(Error::invalid("no image-text pairs to train on"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let frozen = frozen_copy(model);
    let mut enc = AdaptedEncoder::attach(&frozen, &config.lora, rng)?;
    let data = prepare(&frozen, pairs)?;
    let bs = config.batch_size.min(pairs.len());
    let initial_loss = eval_prepared(&enc, &data, bs)?;
    let mut opt = AdamW::new(AdamWConfig::new(config.lr, config.weight_decay), enc.adapters.params());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(rng);
        let mut sum = 0.0;
        let bl = batches(bs, &order);
        for b in &bl {
            let (mut tape, loss, vars) = batch_loss(&enc, &data, b, true)?;
            sum += tape.scalar(loss).to_f64_lossy();
            tape.backward(loss)?;
            enc.adapters.params_mut().accumulate_grads(&tape, &vars)?;
            opt.step(enc.adapters.params_mut())?;
        }
        let mean = sum / bl.len() as f64;
        log::info!("adapter pretraining epoch {}: loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }
    let final_loss = if config.epochs == 0 {
        initial_loss
    } else {
        eval_prepared(&enc, &data, bs)?
    };
    let mut set = enc.adapters;
    set.pin();
    Ok((
        set,
        PretrainLog {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}
