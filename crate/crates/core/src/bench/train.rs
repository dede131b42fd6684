use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{Dataset, TRAIN_SPLIT};
use crate::encoder::{build_text_table, contrastive_loss, patchify, read_checkpoint, tokenizer, Model, ModelConfig, TextFeatureTable};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor, Var};
use crate::views::{resize_crop, sample_crop, AugmentConfig, Crop};

pub const DEFAULT_TEMPLATES: [&str; 1] = ["a photo of a {class}"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, cosine-decayed to zero over all steps.
    pub lr: f64,
    pub weight_decay: f64,
    /// Random resized crops and flips on training images; `None` trains on
    /// the full images only.
    pub augment: Option<AugmentConfig>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 3e-4,
            weight_decay: 0.1,
            augment: Some(AugmentConfig {
                scale: (0.4, 1.0),
                ..AugmentConfig::default()
            }),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Running mean of the batch losses of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Training loss re-evaluated after the first epoch on un-augmented
    /// images in data order.
    pub loss_after_first_epoch: Option<f64>,
    pub steps: usize,
}

struct BatchGraph {
    tape: Tape<f32>,
    loss: Var,
    bound: Vec<(usize, Var)>,
}

fn batch_graph(model: &Model<f32>, images: &[Tensor<f32>], seqs: &[Vec<usize>]) -> Result<BatchGraph> {
    let v = &model.config.vision;
    let mut tape = Tape::new();
    let vit = model.bind_image(&mut tape)?;
    let txt = model.bind_text(&mut tape)?;
    let slot = model.params.slot("logit_scale")?;
    let p = model.params.at(slot);
    let ls = tape.leaf(p.value.clone(), p.trainable);
    let inv_t = tape.exp(ls);
    let x = tape.constant(patchify(images, v.patch_size)?);
    let img = vit.forward(&mut tape, x, images.len(), None, false)?.cls;
    let img = tape.l2_normalize(img);
    let t = txt.forward(&mut tape, seqs)?;
    let t = tape.l2_normalize(t);
    let loss = contrastive_loss(&mut tape, img, t, inv_t)?;
    let mut bound = vit.bound().to_vec();
    bound.extend_from_slice(txt.bound());
    bound.push((slot, ls));
    Ok(BatchGraph { tape, loss, bound })
}

/// Mean loss over full batches in data order, without augmentation.
fn evaluate(model: &Model<f32>, pairs: &[(Tensor<f32>, String)], tokens: &[Vec<usize>], batch: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    let order: Vec<usize> = (0..pairs.len()).collect();
    for b in order.chunks_exact(batch) {
        let images = b.iter().map(|&i| model.norm.apply(&pairs[i].0)).collect::<Result<Vec<_>>>()?;
        let seqs: Vec<Vec<usize>> = b.iter().map(|&i| tokens[i].clone()).collect();
        let g = batch_graph(model, &images, &seqs)?;
        sum += g.tape.scalar(g.loss) as f64;
        count += 1;
    }
    Ok(sum / count as f64)
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

/// Trains both encoders and the logit scale from scratch on the training
/// split with the symmetric contrastive loss. Batches that would be
/// smaller than `batch_size` are dropped.
pub fn pretrain(dataset: &Dataset, model_config: &ModelConfig, config: &PretrainConfig, rng: &mut Rng) -> Result<(Model<f32>, TrainLog)> {
    let mut model = Model::<f32>::init(model_config.clone(), rng)?;
    model.norm = dataset.manifest.norm.clone();
    let v = model_config.vision.clone();
    if dataset.manifest.image_shape != [v.channels, v.image_size, v.image_size] {
        return Err(Error::shape("pretrain", &dataset.manifest.image_shape, &[v.channels, v.image_size, v.image_size]));
    }
    let pairs = dataset.pairs::<f32>(TRAIN_SPLIT)?;
    if config.batch_size < 2 {
        return Err(Error::invalid("contrastive batches need at least two pairs"));
    }
    if config.batch_size > pairs.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds the {} training pairs",
            config.batch_size,
            pairs.len()
        )));
    }
    let tokens = pairs
        .iter()
        .map(|(_, c)| tokenizer::tokenize(c, model_config.text.context_len))
        .collect::<Result<Vec<_>>>()?;
    let per_epoch = pairs.len() / config.batch_size;
    let total = per_epoch * config.epochs;
    let mut opt = AdamW::new(AdamWConfig::new(config.lr, config.weight_decay), &model.params);
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(rng);
        let mut sum = 0.0;
        for batch in order.chunks_exact(config.batch_size) {
            let images = batch
                .iter()
                .map(|&i| {
                    let raw = &pairs[i].0;
                    let view = match &config.augment {
                        Some(aug) => {
                            let mut view_rng = Rng::seed_from_u64(rng.next_u64());
                            let crop = sample_crop(v.image_size, v.image_size, aug, &mut view_rng);
                            let flip = view_rng.random::<f64>() < aug.flip_prob;
                            resize_crop(raw, crop, v.image_size, flip)
                        }
                        None => resize_crop(raw, Crop::full(v.image_size, v.image_size), v.image_size, false),
                    };
                    model.norm.apply(&view)
                })
                .collect::<Result<Vec<Tensor<f32>>>>()?;
            let seqs: Vec<Vec<usize>> = batch.iter().map(|&i| tokens[i].clone()).collect();

            let mut g = batch_graph(&model, &images, &seqs)?;
            sum += g.tape.scalar(g.loss) as f64;
            g.tape.backward(g.loss)?;
            model.params.accumulate_bound(&g.tape, &g.bound)?;
            opt.config.lr = cosine_lr(config.lr, log.steps, total);
            opt.step(&mut model.params)?;
            model.clamp_logit_scale();
            log.steps += 1;
        }
        let mean = sum / per_epoch as f64;
        log::info!("pretraining epoch {}/{}: loss {mean:.4}", epoch + 1, config.epochs);
        log.epoch_losses.push(mean);
        if epoch == 0 {
            let eval = evaluate(&model, &pairs, &tokens, config.batch_size)?;
            log::info!("training loss after the first epoch: {eval:.4}");
            log.loss_after_first_epoch = Some(eval);
        }
    }
    Ok((model, log))
}

/// Builds the class text table from a checkpoint and writes it to `out`.
/// Features are computed in f64 and stored as f32.
pub fn embed_text(checkpoint: &Path, class_names: &[String], templates: &[String], out: &Path) -> Result<TextFeatureTable<f32>> {
    let model = read_checkpoint::<f64>(checkpoint)?;
    let table = build_text_table(&model, class_names, templates)?.cast::<f32>();
    table.save(out)?;
    Ok(table)
}
