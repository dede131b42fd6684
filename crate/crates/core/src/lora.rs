//! Low-rank adapters on attention projections of the image encoder.
//!
//! A targeted projection computes `h = W0·x + γ·B·(A·x)` with `A: r×d2`,
//! `B: d1×r`. Base weights are never written; adapters live in their own
//! parameter store so resetting them cannot touch the shared model.

use std::collections::BTreeSet;
use std::path::Path;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::encoder::{
    load_entries, projection_bias_name, projection_weight_name, save_entries, BoundVit, LowRank, Model, Projection,
    VitConfig,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{lit, Float, ParamStore, Tape, Tensor, Var};

/// Which layers and projections get adapters, and how large they are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Global multiplier `γ` on the low-rank update.
    pub scale: f64,
    pub matrices: Vec<Projection>,
    /// 1-based image encoder layers.
    pub layers: Vec<usize>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            scale: 12.0,
            matrices: Projection::ALL.to_vec(),
            layers: vec![3, 4],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, vit: &VitConfig) -> Result<()> {
        let d = vit.embed_dim;
        if self.rank == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        if self.rank > d / 2 {
            return Err(Error::invalid(format!("LoRA rank {} exceeds half the width {d}", self.rank)));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid("LoRA scale must be finite and non-negative"));
        }
        if self.matrices.is_empty() || self.layers.is_empty() {
            return Err(Error::invalid("LoRA needs at least one target matrix and layer"));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l == 0 || l > vit.num_layers) {
            return Err(Error::invalid(format!("layer {l} out of range 1..={}", vit.num_layers)));
        }
        if self.target_layers().len() != self.layers.len() || self.target_matrices().len() != self.matrices.len() {
            return Err(Error::invalid("LoRA targets contain duplicates"));
        }
        Ok(())
    }

    /// Sorted, de-duplicated layers.
    pub fn target_layers(&self) -> Vec<usize> {
        self.layers.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn target_matrices(&self) -> Vec<Projection> {
        self.matrices.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// The last `n` layers of an encoder with `num_layers` layers.
    pub fn last_layers(num_layers: usize, n: usize) -> Vec<usize> {
        (num_layers.saturating_sub(n) + 1..=num_layers).collect()
    }
}

/// `|layers| · |matrices| · 2·r·d` for square `d×d` projections.
pub fn trainable_parameter_count(config: &LoraConfig, d: usize) -> usize {
    config.target_layers().len() * config.target_matrices().len() * 2 * config.rank * d
}

/// Half-width of the uniform draw for `A`: `1/√d2`.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// What the trainable side of an adapted encoder consists of.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// Low-rank `A`, `B` pairs.
    LowRank,
    /// Episode-local copies of the targeted projection weights and biases.
    FullTune,
}

pub fn lora_a_name(layer: usize, p: Projection) -> String {
    format!("lora.layer{layer}.{}.a", p.tag())
}

pub fn lora_b_name(layer: usize, p: Projection) -> String {
    format!("lora.layer{layer}.{}.b", p.tag())
}

/// Trainable parameters attached to a frozen model.
#[derive(Clone, Debug)]
pub struct AdapterSet<F> {
    kind: AdapterKind,
    config: LoraConfig,
    params: ParamStore<F>,
    /// State restored by `reset` instead of a fresh draw (pre-initialized
    /// low-rank adapters and full-tune copies).
    restore: Option<ParamStore<F>>,
}

impl<F: Float> AdapterSet<F> {
    /// LoRA adapters: `A` uniform in `±1/√d`, `B = 0`.
    pub fn lora(model: &Model<F>, config: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        let vit = &model.config.vision;
        config.validate(vit)?;
        let d = vit.embed_dim;
        let mut params = ParamStore::new();
        for layer in config.target_layers() {
            for p in config.target_matrices() {
                model.params.get(&projection_weight_name(layer, p))?;
                params.insert(lora_a_name(layer, p), Tensor::zeros(&[config.rank, d]), true)?;
                params.insert(lora_b_name(layer, p), Tensor::zeros(&[d, config.rank]), true)?;
            }
        }
        let mut set = Self {
            kind: AdapterKind::LowRank,
            config: config.clone(),
            params,
            restore: None,
        };
        set.redraw(rng);
        Ok(set)
    }

    /// Image encoder tuning baseline: the targeted projections (weights and
    /// biases) become trainable through copies.
    pub fn full_tune(model: &Model<F>, config: &LoraConfig) -> Result<Self> {
        let vit = &model.config.vision;
        if config.matrices.is_empty() || config.layers.is_empty() {
            return Err(Error::invalid("full tuning needs at least one target matrix and layer"));
        }
        if let Some(&l) = config.layers.iter().find(|&&l| l == 0 || l > vit.num_layers) {
            return Err(Error::invalid(format!("layer {l} out of range 1..={}", vit.num_layers)));
        }
        let mut params = ParamStore::new();
        for layer in config.target_layers() {
            for p in config.target_matrices() {
                for name in [projection_weight_name(layer, p), projection_bias_name(layer, p)] {
                    let base = model.params.get(&name)?;
                    params.insert(format!("full.{name}"), base.value.clone(), true)?;
                }
            }
        }
        Ok(Self {
            kind: AdapterKind::FullTune,
            config: config.clone(),
            restore: Some(params.clone()),
            params,
        })
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// True when `reset` restores a stored state instead of re-drawing `A`.
    pub fn is_pre_initialized(&self) -> bool {
        self.kind == AdapterKind::LowRank && self.restore.is_some()
    }

    fn redraw(&mut self, rng: &mut Rng) {
        let bound = init_bound(self.params.at(0).value.shape()[1]);
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        for p in self.params.iter_mut() {
            if p.name.ends_with(".a") {
                p.value.data_mut().iter_mut().for_each(|v| *v = lit(dist.sample(rng)));
            } else {
                p.value.data_mut().iter_mut().for_each(|v| *v = F::zero());
            }
            p.value.clear_grad();
        }
    }

    /// Returns the adapters to their episode-start state: `B = 0` with a
    /// fresh `A` from `rng`, or the stored state for pre-initialized and
    /// full-tune sets.
    pub fn reset(&mut self, rng: &mut Rng) {
        match &self.restore {
            Some(saved) => self.params = saved.clone(),
            None => self.redraw(rng),
        }
    }

    /// Freezes the current values as the state `reset` returns to.
    pub fn pin(&mut self) {
        self.restore = Some(self.params.clone());
    }

    /// Writes low-rank adapters with their configuration to an LTTW file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if self.kind != AdapterKind::LowRank {
            return Err(Error::invalid("only low-rank adapters can be saved"));
        }
        let c = &self.config;
        let mut meta = vec![c.rank as f64, c.scale, c.layers.len() as f64];
        meta.extend(c.layers.iter().map(|&l| l as f64));
        meta.push(c.matrices.len() as f64);
        meta.extend(c.matrices.iter().map(|&m| Projection::ALL.iter().position(|&p| p == m).unwrap() as f64));
        let meta = Tensor::from_vec(meta).cast::<F>();
        let bound = Tensor::scalar(init_bound(self.params.at(0).value.shape()[1])).cast::<F>();
        let mut entries: Vec<(&str, &Tensor<F>)> = vec![("meta.lora", &meta), ("meta.lora_init_bound", &bound)];
        entries.extend(self.params.iter().map(|p| (p.name.as_str(), &p.value)));
        save_entries(path, &entries)
    }

    /// Loads pre-initialized low-rank adapters for `model`; `reset` returns
    /// to the loaded values.
    pub fn load(model: &Model<F>, path: &Path) -> Result<Self> {
        let entries = load_entries::<f64>(path)?;
        let meta = entries
            .iter()
            .find(|(n, _)| n == "meta.lora")
            .ok_or_else(|| Error::MissingParameter("meta.lora".into()))?
            .1
            .data()
            .to_vec();
        let config = decode_meta(&meta)?;
        let mut set = Self::lora(model, &config, &mut crate::rng::stream(0, "adapter-load"))?;
        for p in set.params.iter_mut() {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::MissingParameter(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("load_adapters", t.shape(), p.value.shape()));
            }
            p.value = t.cast();
        }
        if entries.len() != set.params.len() + 2 {
            return Err(Error::Format("adapter file has unexpected entries".into()));
        }
        set.pin();
        Ok(set)
    }
}

fn decode_meta(meta: &[f64]) -> Result<LoraConfig> {
    let bad = || Error::Format("malformed adapter config record".into());
    let int = |x: f64| if x >= 0.0 && x.fract() == 0.0 { Ok(x as usize) } else { Err(bad()) };
    let mut it = meta.iter().copied();
    let rank = int(it.next().ok_or_else(bad)?)?;
    let scale = it.next().ok_or_else(bad)?;
    let nl = int(it.next().ok_or_else(bad)?)?;
    let layers = (0..nl).map(|_| int(it.next().ok_or_else(bad)?)).collect::<Result<Vec<_>>>()?;
    let nm = int(it.next().ok_or_else(bad)?)?;
    let matrices = (0..nm)
        .map(|_| {
            let i = int(it.next().ok_or_else(bad)?)?;
            Projection::ALL.get(i).copied().ok_or_else(bad)
        })
        .collect::<Result<Vec<_>>>()?;
    if it.next().is_some() {
        return Err(bad());
    }
    Ok(LoraConfig {
        rank,
        scale,
        matrices,
        layers,
    })
}

/// Frozen base model plus an adapter set.
#[derive(Clone, Debug)]
pub struct AdaptedEncoder<'a, F> {
    pub base: &'a Model<F>,
    pub adapters: AdapterSet<F>,
}

/// Result of placing an adapted encoder on a tape.
pub struct BoundAdapted<F> {
    pub vit: BoundVit<F>,
    /// One variable per adapter parameter, in store order.
    pub adapter_vars: Vec<Var>,
}

impl<'a, F: Float> AdaptedEncoder<'a, F> {
    pub fn attach(base: &'a Model<F>, config: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            base,
            adapters: AdapterSet::lora(base, config, rng)?,
        })
    }

    pub fn with_adapters(base: &'a Model<F>, adapters: AdapterSet<F>) -> Self {
        Self { base, adapters }
    }

    /// Binds the frozen base and the adapters; only adapters record
    /// gradients. With `trainable = false` adapters are constants too.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Result<BoundAdapted<F>> {
        let mut vit = BoundVit::bind_frozen(tape, &self.base.params, &self.base.config.vision)?;
        let adapter_vars: Vec<Var> = self
            .adapters
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable && p.trainable))
            .collect();
        let cfg = &self.adapters.config;
        let mut slot = 0;
        for layer in cfg.target_layers() {
            for p in cfg.target_matrices() {
                let proj = vit.projection_mut(layer, p)?;
                match self.adapters.kind {
                    AdapterKind::LowRank => {
                        proj.low_rank = Some(LowRank {
                            a: adapter_vars[slot],
                            b: adapter_vars[slot + 1],
                            scale: lit(cfg.scale),
                        });
                    }
                    AdapterKind::FullTune => {
                        proj.w = adapter_vars[slot];
                        proj.bias = Some(adapter_vars[slot + 1]);
                    }
                }
                slot += 2;
            }
        }
        Ok(BoundAdapted { vit, adapter_vars })
    }

    /// Same contract as [`Model::encode_image`], through the adapters.
    pub fn encode_image(&self, image: &Tensor<F>, mask: Option<&[usize]>) -> Result<crate::encoder::ImageEncoding<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        crate::encoder::encode_image_with(&mut tape, &bound.vit, &self.base.config.vision, image, mask)
    }

    pub fn reset(&mut self, rng: &mut Rng) {
        self.adapters.reset(rng);
    }
}
