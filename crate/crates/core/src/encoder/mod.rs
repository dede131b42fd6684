//! Miniature CLIP-style dual encoder.
//!
//! A ViT image encoder and a causal transformer text encoder project into a
//! shared embedding space; classification is a temperature-scaled softmax
//! over cosine similarities with precomputed class text features.

mod checkpoint;
mod table;
pub mod tokenizer;
mod transformer;

pub use checkpoint::{load_entries, read_checkpoint, read_entries, save_entries, write_checkpoint, write_entries};
pub use table::{build_text_table, classify, ensemble_average, TextFeatureTable};
pub use transformer::{patchify, Binder, BoundLinear, BoundText, BoundVit, LowRank, VitOutput};

use std::fmt;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{lit, Float, ParamStore, Tape, Tensor, Var};

/// Largest allowed inverse temperature, also the initial value.
pub const MAX_INV_TEMPERATURE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Width of the shared image/text embedding space.
    pub output_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            output_dim: 64,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers < 2 {
            return Err(Error::invalid("the image encoder needs at least two layers"));
        }
        if self.channels == 0 || self.mlp_ratio == 0 || self.output_dim == 0 {
            return Err(Error::invalid("channels, mlp ratio and output dim must be positive"));
        }
        Ok(())
    }

    /// Patches per image, excluding the class token.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Tokens entering the transformer for an unmasked image.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub context_len: usize,
    pub width: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            context_len: 16,
            width: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.width % self.num_heads != 0 {
            return Err(Error::invalid("text width must be divisible by the head count"));
        }
        if self.context_len < 3 || self.num_layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("text context, layers and mlp ratio must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vision: VitConfig,
    pub text: TextConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()
    }

    fn to_meta(&self) -> Vec<f64> {
        let (v, t) = (&self.vision, &self.text);
        [
            v.image_size,
            v.patch_size,
            v.channels,
            v.embed_dim,
            v.num_layers,
            v.num_heads,
            v.mlp_ratio,
            v.output_dim,
            t.context_len,
            t.width,
            t.num_layers,
            t.num_heads,
            t.mlp_ratio,
        ]
        .iter()
        .map(|&x| x as f64)
        .collect()
    }

    fn from_meta(meta: &[f64]) -> Result<Self> {
        if meta.len() != 13 || meta.iter().any(|&x| x < 0.0 || x.fract() != 0.0) {
            return Err(Error::Format("malformed model config record".into()));
        }
        let m: Vec<usize> = meta.iter().map(|&x| x as usize).collect();
        let config = ModelConfig {
            vision: VitConfig {
                image_size: m[0],
                patch_size: m[1],
                channels: m[2],
                embed_dim: m[3],
                num_layers: m[4],
                num_heads: m[5],
                mlp_ratio: m[6],
                output_dim: m[7],
            },
            text: TextConfig {
                context_len: m[8],
                width: m[9],
                num_layers: m[10],
                num_heads: m[11],
                mlp_ratio: m[12],
            },
        };
        config.validate()?;
        Ok(config)
    }
}

/// Attention projection matrices an adapter can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    #[serde(rename = "q")]
    Query,
    #[serde(rename = "k")]
    Key,
    #[serde(rename = "v")]
    Value,
    #[serde(rename = "o")]
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Query, Projection::Key, Projection::Value, Projection::Output];

    pub fn tag(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
            Projection::Output => "o",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "q" => Ok(Projection::Query),
            "k" => Ok(Projection::Key),
            "v" => Ok(Projection::Value),
            "o" => Ok(Projection::Output),
            other => Err(Error::invalid(format!("unknown attention matrix `{other}`"))),
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Name of the weight matrix of a projection in a 1-based image layer.
pub fn projection_weight_name(layer: usize, proj: Projection) -> String {
    format!("img.layer{layer}.attn.w{}", proj.tag())
}

pub fn projection_bias_name(layer: usize, proj: Projection) -> String {
    format!("img.layer{layer}.attn.b{}", proj.tag())
}

/// Per-channel pixel statistics used to normalize every image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// `(x − mean_c) / std_c` for a `[C, H, W]` image.
    pub fn apply<F: Float>(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != self.mean.len() {
            return Err(Error::shape("normalize", shape, &[self.mean.len(), 0, 0]));
        }
        let plane = shape[1] * shape[2];
        let mut out = image.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (lit::<F>(self.mean[c]), lit::<F>(self.std[c]));
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }
}

/// Output of [`Model::encode_image`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoding<F> {
    pub class_embedding: Vec<F>,
    /// `[kept patches, output_dim]`.
    pub visual_tokens: Tensor<F>,
}

/// Frozen-or-trainable dual encoder weights plus preprocessing state.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub norm: NormStats,
}

fn normal<F: Float>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| lit::<F>(dist.sample(rng))).collect()).expect("shape")
}

fn xavier<F: Float>(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Tensor<F> {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::new(&[out_dim, in_dim], (0..out_dim * in_dim).map(|_| lit::<F>(dist.sample(rng))).collect())
        .expect("shape")
}

fn add_block<F: Float>(p: &mut ParamStore<F>, prefix: &str, width: usize, hidden: usize, rng: &mut Rng) -> Result<()> {
    p.insert(format!("{prefix}.ln1.g"), Tensor::full(&[width], F::one()), true)?;
    p.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[width]), true)?;
    for proj in Projection::ALL {
        p.insert(format!("{prefix}.attn.w{}", proj.tag()), xavier(width, width, rng), true)?;
        p.insert(format!("{prefix}.attn.b{}", proj.tag()), Tensor::zeros(&[width]), true)?;
    }
    p.insert(format!("{prefix}.ln2.g"), Tensor::full(&[width], F::one()), true)?;
    p.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[width]), true)?;
    p.insert(format!("{prefix}.mlp.fc1.w"), xavier(hidden, width, rng), true)?;
    p.insert(format!("{prefix}.mlp.fc1.b"), Tensor::zeros(&[hidden]), true)?;
    p.insert(format!("{prefix}.mlp.fc2.w"), xavier(width, hidden, rng), true)?;
    p.insert(format!("{prefix}.mlp.fc2.b"), Tensor::zeros(&[width]), true)?;
    Ok(())
}

impl<F: Float> Model<F> {
    /// Fresh, fully trainable weights.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, t) = (&config.vision, &config.text);
        let mut p = ParamStore::new();
        let d = v.embed_dim;
        p.insert("img.patch.w", xavier(d, v.patch_dim(), rng), true)?;
        p.insert("img.patch.b", Tensor::zeros(&[d]), true)?;
        p.insert("img.cls", normal(&[1, d], 0.02, rng), true)?;
        p.insert("img.pos", normal(&[v.seq_len(), d], 0.02, rng), true)?;
        for l in 1..=v.num_layers {
            add_block(&mut p, &format!("img.layer{l}"), d, d * v.mlp_ratio, rng)?;
        }
        p.insert("img.ln_post.g", Tensor::full(&[d], F::one()), true)?;
        p.insert("img.ln_post.b", Tensor::zeros(&[d]), true)?;
        p.insert("img.proj", normal(&[v.output_dim, d], (d as f64).powf(-0.5), rng), true)?;

        let w = t.width;
        p.insert("txt.tok", normal(&[tokenizer::vocab_size(), w], 0.02, rng), true)?;
        p.insert("txt.pos", normal(&[t.context_len, w], 0.01, rng), true)?;
        for l in 1..=t.num_layers {
            add_block(&mut p, &format!("txt.layer{l}"), w, w * t.mlp_ratio, rng)?;
        }
        p.insert("txt.ln_final.g", Tensor::full(&[w], F::one()), true)?;
        p.insert("txt.ln_final.b", Tensor::zeros(&[w]), true)?;
        p.insert("txt.proj", normal(&[v.output_dim, w], (w as f64).powf(-0.5), rng), true)?;
        p.insert("logit_scale", Tensor::scalar(lit::<F>(MAX_INV_TEMPERATURE.ln())), true)?;
        Ok(Self {
            config: config.clone(),
            params: p,
            norm: NormStats::identity(config.vision.channels),
        })
    }

    /// Marks every weight frozen.
    pub fn freeze(&mut self) {
        self.params.set_trainable(false);
    }

    /// `1/τ` used to sharpen cosine similarities.
    pub fn inv_temperature(&self) -> F {
        self.params.get("logit_scale").expect("model has a logit scale").value.data()[0].exp()
    }

    /// Clamps the learnable logit scale so that `1/τ ≤ 100`.
    pub fn clamp_logit_scale(&mut self) {
        let max = lit::<F>(MAX_INV_TEMPERATURE.ln());
        let p = self.params.get_mut("logit_scale").expect("model has a logit scale");
        let v = &mut p.value.data_mut()[0];
        *v = v.min(max);
    }

    pub fn bind_image(&self, tape: &mut Tape<F>) -> Result<BoundVit<F>> {
        BoundVit::bind(tape, &self.params, &self.config.vision)
    }

    pub fn bind_text(&self, tape: &mut Tape<F>) -> Result<BoundText<F>> {
        BoundText::bind(tape, &self.params, &self.config.text)
    }

    pub fn bind_logit_scale(&self, tape: &mut Tape<F>) -> Result<Var> {
        let p = self.params.get("logit_scale")?;
        let ls = tape.leaf(p.value.clone(), p.trainable);
        Ok(tape.exp(ls))
    }

    /// Encodes one normalized `[C, H, W]` image, dropping the patches in
    /// `mask` (class token is never dropped).
    pub fn encode_image(&self, image: &Tensor<F>, mask: Option<&[usize]>) -> Result<ImageEncoding<F>> {
        let mut tape = Tape::new();
        let vit = self.bind_image(&mut tape)?;
        encode_image_with(&mut tape, &vit, &self.config.vision, image, mask)
    }

    /// Unnormalized text embedding of a token sequence.
    pub fn encode_text(&self, token_ids: &[usize]) -> Result<Vec<F>> {
        let mut tape = Tape::new();
        let txt = self.bind_text(&mut tape)?;
        let out = txt.forward(&mut tape, &[token_ids.to_vec()])?;
        Ok(tape.value(out).to_vec())
    }

    pub fn encode_caption(&self, caption: &str) -> Result<Vec<F>> {
        self.encode_text(&tokenizer::tokenize(caption, self.config.text.context_len)?)
    }
}

/// Shared path for [`Model::encode_image`] and adapted encoders.
pub fn encode_image_with<F: Float>(
    tape: &mut Tape<F>,
    vit: &BoundVit<F>,
    config: &VitConfig,
    image: &Tensor<F>,
    mask: Option<&[usize]>,
) -> Result<ImageEncoding<F>> {
    let expected = [config.channels, config.image_size, config.image_size];
    if image.shape() != expected {
        return Err(Error::shape("encode_image", image.shape(), &expected));
    }
    let keep = match mask {
        Some(m) => Some(vec![kept_patches(config.num_patches(), m)?]),
        None => None,
    };
    let patches = tape.constant(patchify(std::slice::from_ref(image), config.patch_size)?);
    let out = vit.forward(tape, patches, 1, keep.as_deref(), true)?;
    let tokens = out.tokens.expect("tokens requested");
    Ok(ImageEncoding {
        class_embedding: tape.value(out.cls).to_vec(),
        visual_tokens: tape.tensor(tokens),
    })
}

/// Ascending patch indices that survive `masked`.
pub fn kept_patches(num_patches: usize, masked: &[usize]) -> Result<Vec<usize>> {
    let mut drop = vec![false; num_patches];
    for &i in masked {
        if i >= num_patches {
            return Err(Error::invalid(format!("mask index {i} out of range for {num_patches} patches")));
        }
        if drop[i] {
            return Err(Error::invalid(format!("mask index {i} repeated")));
        }
        drop[i] = true;
    }
    Ok((0..num_patches).filter(|&i| !drop[i]).collect())
}

/// Symmetric InfoNCE over a batch of matched, L2-normalized pairs.
///
/// `inv_temperature` is a one-element variable multiplying the similarity
/// matrix.
pub fn contrastive_loss<F: Float>(tape: &mut Tape<F>, image_embs: Var, text_embs: Var, inv_temperature: Var) -> Result<Var> {
    let (bi, bt) = (tape.shape(image_embs)[0], tape.shape(text_embs)[0]);
    if bi != bt {
        return Err(Error::shape("contrastive_loss", tape.shape(image_embs), tape.shape(text_embs)));
    }
    let sims = tape.matmul_nt(image_embs, text_embs)?;
    let logits = tape.mul_scalar(sims, inv_temperature)?;
    let targets: Vec<usize> = (0..bi).collect();
    let per_image = tape.log_softmax(logits);
    let li = tape.nll(per_image, &targets)?;
    let logits_t = tape.transpose(logits)?;
    let per_text = tape.log_softmax(logits_t);
    let lt = tape.nll(per_text, &targets)?;
    let sum = tape.add(li, lt)?;
    Ok(tape.scale(sum, lit::<F>(0.5)))
}
