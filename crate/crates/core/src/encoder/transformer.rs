//! Tape-bound transformer stacks for both towers.

use super::{tokenizer, Projection, TextConfig, VitConfig};
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore, Tape, Tensor, Var};

/// Parallel low-rank path `scale · B·(A·x)` added to a projection.
#[derive(Clone, Copy, Debug)]
pub struct LowRank<F> {
    /// `[rank, in]`
    pub a: Var,
    /// `[out, rank]`
    pub b: Var,
    pub scale: F,
}

/// `y = x·Wᵀ + b` with an optional low-rank update.
#[derive(Clone, Debug)]
pub struct BoundLinear<F> {
    /// `[out, in]`
    pub w: Var,
    pub bias: Option<Var>,
    pub low_rank: Option<LowRank<F>>,
}

impl<F: Float> BoundLinear<F> {
    fn bind(tape: &mut Tape<F>, params: &mut Binder<F>, w: &str, b: Option<&str>) -> Result<Self> {
        Ok(Self {
            w: params.bind(tape, w)?,
            bias: b.map(|name| params.bind(tape, name)).transpose()?,
            low_rank: None,
        })
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let mut y = tape.matmul_nt(x, self.w)?;
        if let Some(b) = self.bias {
            y = tape.add_row(y, b)?;
        }
        if let Some(lr) = self.low_rank {
            let down = tape.matmul_nt(x, lr.a)?;
            let up = tape.matmul_nt(down, lr.b)?;
            let delta = tape.scale(up, lr.scale);
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }
}

/// Places named parameters on a tape and remembers which slot each came from,
/// so gradients can be routed back to the store.
pub struct Binder<'a, F> {
    params: &'a ParamStore<F>,
    frozen: bool,
    bound: Vec<(usize, Var)>,
}

impl<'a, F: Float> Binder<'a, F> {
    pub fn new(params: &'a ParamStore<F>) -> Self {
        Self {
            params,
            frozen: false,
            bound: Vec::new(),
        }
    }

    /// Binds everything as constants regardless of the trainable flags.
    pub fn frozen(params: &'a ParamStore<F>) -> Self {
        Self {
            frozen: true,
            ..Self::new(params)
        }
    }

    pub fn bind(&mut self, tape: &mut Tape<F>, name: &str) -> Result<Var> {
        let slot = self.params.slot(name)?;
        let p = self.params.at(slot);
        let v = tape.leaf(p.value.clone(), p.trainable && !self.frozen);
        self.bound.push((slot, v));
        Ok(v)
    }

    pub fn finish(self) -> Vec<(usize, Var)> {
        self.bound
    }
}

#[derive(Clone, Debug)]
struct BoundBlock<F> {
    ln1: (Var, Var),
    q: BoundLinear<F>,
    k: BoundLinear<F>,
    v: BoundLinear<F>,
    o: BoundLinear<F>,
    ln2: (Var, Var),
    fc1: BoundLinear<F>,
    fc2: BoundLinear<F>,
}

impl<F: Float> BoundBlock<F> {
    fn bind(tape: &mut Tape<F>, params: &mut Binder<F>, prefix: &str) -> Result<Self> {
        fn ln<F: Float>(tape: &mut Tape<F>, params: &mut Binder<F>, name: String) -> Result<(Var, Var)> {
            Ok((params.bind(tape, &format!("{name}.g"))?, params.bind(tape, &format!("{name}.b"))?))
        }
        fn proj<F: Float>(tape: &mut Tape<F>, params: &mut Binder<F>, prefix: &str, p: Projection) -> Result<BoundLinear<F>> {
            BoundLinear::bind(
                tape,
                params,
                &format!("{prefix}.attn.w{}", p.tag()),
                Some(&format!("{prefix}.attn.b{}", p.tag())),
            )
        }
        Ok(Self {
            ln1: ln(tape, params, format!("{prefix}.ln1"))?,
            q: proj(tape, params, prefix, Projection::Query)?,
            k: proj(tape, params, prefix, Projection::Key)?,
            v: proj(tape, params, prefix, Projection::Value)?,
            o: proj(tape, params, prefix, Projection::Output)?,
            ln2: ln(tape, params, format!("{prefix}.ln2"))?,
            fc1: BoundLinear::bind(tape, params, &format!("{prefix}.mlp.fc1.w"), Some(&format!("{prefix}.mlp.fc1.b")))?,
            fc2: BoundLinear::bind(tape, params, &format!("{prefix}.mlp.fc2.w"), Some(&format!("{prefix}.mlp.fc2.b")))?,
        })
    }

    fn projection_mut(&mut self, p: Projection) -> &mut BoundLinear<F> {
        match p {
            Projection::Query => &mut self.q,
            Projection::Key => &mut self.k,
            Projection::Value => &mut self.v,
            Projection::Output => &mut self.o,
        }
    }

    /// Pre-norm residual block over `batch` sequences of `seq` tokens.
    fn forward(&self, tape: &mut Tape<F>, x: Var, batch: usize, seq: usize, heads: usize, causal: bool) -> Result<Var> {
        let h = tape.layer_norm(x, self.ln1.0, self.ln1.1)?;
        let q = self.q.forward(tape, h)?;
        let k = self.k.forward(tape, h)?;
        let v = self.v.forward(tape, h)?;
        let a = tape.attention(q, k, v, batch, seq, heads, causal)?;
        let o = self.o.forward(tape, a)?;
        let x = tape.add(x, o)?;
        let h = tape.layer_norm(x, self.ln2.0, self.ln2.1)?;
        let m = self.fc1.forward(tape, h)?;
        let m = tape.gelu(m);
        let m = self.fc2.forward(tape, m)?;
        tape.add(x, m)
    }
}

/// Outputs of one batched image forward.
#[derive(Clone, Copy, Debug)]
pub struct VitOutput {
    /// `[batch, output_dim]` projected class tokens.
    pub cls: Var,
    /// `[batch·(seq_len − 1), output_dim]` projected visual tokens, if requested.
    pub tokens: Option<Var>,
    /// Tokens per image that entered the transformer.
    pub seq_len: usize,
    pub batch: usize,
}

impl VitOutput {
    pub fn token_count(&self) -> usize {
        self.seq_len * self.batch
    }
}

/// Image encoder weights placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundVit<F> {
    config: VitConfig,
    patch: BoundLinear<F>,
    cls: Var,
    pos: Var,
    blocks: Vec<BoundBlock<F>>,
    ln_post: (Var, Var),
    proj: Var,
    bound: Vec<(usize, Var)>,
}

impl<F: Float> BoundVit<F> {
    pub fn bind(tape: &mut Tape<F>, store: &ParamStore<F>, config: &VitConfig) -> Result<Self> {
        Self::bind_with(tape, Binder::new(store), config)
    }

    /// Binds with every base weight treated as a constant.
    pub fn bind_frozen(tape: &mut Tape<F>, store: &ParamStore<F>, config: &VitConfig) -> Result<Self> {
        Self::bind_with(tape, Binder::frozen(store), config)
    }

    fn bind_with(tape: &mut Tape<F>, mut params: Binder<F>, config: &VitConfig) -> Result<Self> {
        let p = &mut params;
        let patch = BoundLinear::bind(tape, p, "img.patch.w", Some("img.patch.b"))?;
        let cls = p.bind(tape, "img.cls")?;
        let pos = p.bind(tape, "img.pos")?;
        let blocks = (1..=config.num_layers)
            .map(|l| BoundBlock::bind(tape, p, &format!("img.layer{l}")))
            .collect::<Result<Vec<_>>>()?;
        let ln_post = (p.bind(tape, "img.ln_post.g")?, p.bind(tape, "img.ln_post.b")?);
        let proj = p.bind(tape, "img.proj")?;
        Ok(Self {
            config: config.clone(),
            patch,
            cls,
            pos,
            blocks,
            ln_post,
            proj,
            bound: params.finish(),
        })
    }

    /// `(store slot, variable)` for every parameter placed on the tape.
    pub fn bound(&self) -> &[(usize, Var)] {
        &self.bound
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    /// Projection of a 1-based layer, for attaching adapters.
    pub fn projection_mut(&mut self, layer: usize, p: Projection) -> Result<&mut BoundLinear<F>> {
        let n = self.blocks.len();
        if layer == 0 || layer > n {
            return Err(Error::invalid(format!("layer {layer} out of range 1..={n}")));
        }
        Ok(self.blocks[layer - 1].projection_mut(p))
    }

    /// Encodes `batch` images given as stacked patch rows `[batch·P, patch_dim]`.
    ///
    /// `keep[b]` lists the ascending patch indices of image `b` that survive
    /// masking; every image must keep the same count. Positional embeddings
    /// are added before masked tokens are removed.
    pub fn forward(&self, tape: &mut Tape<F>, patches: Var, batch: usize, keep: Option<&[Vec<usize>]>, with_tokens: bool) -> Result<VitOutput> {
        let p = self.config.num_patches();
        let s = p + 1;
        let rows = tape.shape(patches)[0];
        if rows != batch * p {
            return Err(Error::shape("vit_forward", tape.shape(patches), &[batch * p, self.config.patch_dim()]));
        }
        let emb = self.patch.forward(tape, patches)?;
        let cls = tape.gather_rows(self.cls, &vec![0; batch])?;
        let stacked = tape.concat(&[cls, emb], 0)?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(b).chain((0..p).map(move |j| batch + b * p + j)))
            .collect();
        let seq = tape.gather_rows(stacked, &order)?;
        let pos_order: Vec<usize> = (0..batch).flat_map(|_| 0..s).collect();
        let pos = tape.gather_rows(self.pos, &pos_order)?;
        let mut x = tape.add(seq, pos)?;

        let mut seq_len = s;
        if let Some(keep) = keep {
            if keep.len() != batch {
                return Err(Error::invalid(format!("{} keep lists for a batch of {batch}", keep.len())));
            }
            let kept = keep.first().map_or(p, |k| k.len());
            if keep.iter().any(|k| k.len() != kept) {
                return Err(Error::invalid("every image in a batch must keep the same number of patches"));
            }
            if kept < p {
                let mut idx = Vec::with_capacity(batch * (kept + 1));
                for (b, k) in keep.iter().enumerate() {
                    idx.push(b * s);
                    for &j in k {
                        if j >= p {
                            return Err(Error::invalid(format!("patch index {j} out of range for {p} patches")));
                        }
                        idx.push(b * s + 1 + j);
                    }
                }
                x = tape.gather_rows(x, &idx)?;
                seq_len = kept + 1;
            }
        }

        for block in &self.blocks {
            x = block.forward(tape, x, batch, seq_len, self.config.num_heads, false)?;
        }
        let x = tape.layer_norm(x, self.ln_post.0, self.ln_post.1)?;
        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq_len).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        let cls = tape.matmul_nt(cls, self.proj)?;
        let tokens = if with_tokens && seq_len > 1 {
            let rows: Vec<usize> = (0..batch)
                .flat_map(|b| (1..seq_len).map(move |t| b * seq_len + t))
                .collect();
            let t = tape.gather_rows(x, &rows)?;
            Some(tape.matmul_nt(t, self.proj)?)
        } else {
            None
        };
        Ok(VitOutput {
            cls,
            tokens,
            seq_len,
            batch,
        })
    }
}

/// Text encoder weights placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundText<F> {
    config: TextConfig,
    tok: Var,
    pos: Var,
    blocks: Vec<BoundBlock<F>>,
    ln_final: (Var, Var),
    proj: Var,
    bound: Vec<(usize, Var)>,
}

impl<F: Float> BoundText<F> {
    pub fn bind(tape: &mut Tape<F>, store: &ParamStore<F>, config: &TextConfig) -> Result<Self> {
        let mut params = Binder::new(store);
        let p = &mut params;
        let tok = p.bind(tape, "txt.tok")?;
        let pos = p.bind(tape, "txt.pos")?;
        let blocks = (1..=config.num_layers)
            .map(|l| BoundBlock::bind(tape, p, &format!("txt.layer{l}")))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = (p.bind(tape, "txt.ln_final.g")?, p.bind(tape, "txt.ln_final.b")?);
        let proj = p.bind(tape, "txt.proj")?;
        Ok(Self {
            config: config.clone(),
            tok,
            pos,
            blocks,
            ln_final,
            proj,
            bound: params.finish(),
        })
    }

    pub fn bound(&self) -> &[(usize, Var)] {
        &self.bound
    }

    /// `[batch, output_dim]` embeddings read at each sequence's end token.
    ///
    /// Sequences are right-padded; causal attention keeps padding invisible
    /// to the end token.
    pub fn forward(&self, tape: &mut Tape<F>, sequences: &[Vec<usize>]) -> Result<Var> {
        if sequences.is_empty() {
            return Err(Error::invalid("no text to encode"));
        }
        let vocab = tokenizer::vocab_size();
        let len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 || len > self.config.context_len {
            return Err(Error::invalid(format!("text length {len} outside 1..={}", self.config.context_len)));
        }
        let mut ids = Vec::with_capacity(sequences.len() * len);
        let mut ends = Vec::with_capacity(sequences.len());
        for (b, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::invalid("empty token sequence"));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= vocab) {
                return Err(Error::UnknownToken(format!("#{bad}")));
            }
            ids.extend_from_slice(seq);
            ids.extend(std::iter::repeat(tokenizer::PAD).take(len - seq.len()));
            ends.push(b * len + seq.len() - 1);
        }
        let x = tape.gather_rows(self.tok, &ids)?;
        let pos_idx: Vec<usize> = (0..sequences.len()).flat_map(|_| 0..len).collect();
        let pos = tape.gather_rows(self.pos, &pos_idx)?;
        let mut x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, x, sequences.len(), len, self.config.num_heads, true)?;
        }
        let x = tape.gather_rows(x, &ends)?;
        let x = tape.layer_norm(x, self.ln_final.0, self.ln_final.1)?;
        tape.matmul_nt(x, self.proj)
    }
}

/// Splits `[C, H, W]` images into row-major patches, one row per patch
/// laid out as `(channel, dy, dx)`.
pub fn patchify<F: Float>(images: &[Tensor<F>], patch: usize) -> Result<Tensor<F>> {
    let first = images.first().ok_or_else(|| Error::invalid("no images to patchify"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || patch == 0 || shape[1] % patch != 0 || shape[2] % patch != 0 {
        return Err(Error::shape("patchify", &shape, &[patch]));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (ph, pw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let mut out = Vec::with_capacity(images.len() * ph * pw * dim);
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::shape("patchify", img.shape(), &shape));
        }
        let data = img.data();
        for py in 0..ph {
            for px in 0..pw {
                for ch in 0..c {
                    for dy in 0..patch {
                        let row = ch * h * w + (py * patch + dy) * w + px * patch;
                        out.extend_from_slice(&data[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(&[images.len() * ph * pw, dim], out)
}
