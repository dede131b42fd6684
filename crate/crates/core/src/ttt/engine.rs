use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::losses::{mae_loss, mem_loss, mem_loss_value, select_confident, selection_size};
use super::{Mode, ReconTarget, TttConfig};
use crate::encoder::{kept_patches, patchify, Model, TextFeatureTable};
use crate::error::{Error, Result};
use crate::lora::{AdaptedEncoder, AdapterSet};
use crate::metrics::{self, EceReport, ResourceReport};
use crate::rng::{episode_rng, stream};
use crate::tensor::{lit, AdamW, AdamWConfig, Float, Tape, Tensor, Var};
use crate::views::{make_views, sample_mask};

/// One unlabeled test image (the label is only used for scoring).
#[derive(Clone, Debug)]
pub struct Instance<F> {
    pub id: String,
    /// Raw `[C, H, W]` pixels; normalization happens inside the engine.
    pub image: Tensor<F>,
    pub label: usize,
}

/// Tokens entering the transformer in one optimization step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    /// Full-batch pass that scores every view for selection.
    pub selection_views: usize,
    pub selection_tokens: usize,
    /// Separate unmasked pass over the selected views (only when the
    /// selection pass is not part of the loss graph).
    pub target_views: usize,
    pub target_tokens: usize,
    /// Masked pass of the reconstruction loss.
    pub masked_views: usize,
    pub masked_tokens: usize,
}

/// Outcome of one episode. Serialized as one line of `episodes.jsonl`;
/// wall time is kept out of that file so it stays reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub confidence: f64,
    pub correct: bool,
    /// Final class probabilities on the original view.
    pub probs: Vec<f64>,
    /// Losses of the first step, before any update.
    pub mem_loss: Option<f64>,
    pub mae_loss: Option<f64>,
    pub total_loss: Option<f64>,
    /// Weighted loss of every step.
    pub step_losses: Vec<f64>,
    /// Views selected in the first step.
    pub selected: Vec<usize>,
    pub trainable_params: usize,
    pub tokens: TokenCounts,
    pub peak_tape_nodes: usize,
    #[serde(skip)]
    pub wall_ms: f64,
}

struct StepGraph<F> {
    tape: Tape<F>,
    loss: Option<Var>,
    adapter_vars: Vec<Var>,
    mem: Option<f64>,
    mae: Option<f64>,
    selected: Vec<usize>,
    tokens: TokenCounts,
    peak_nodes: usize,
}

/// Episodic test-time training over a frozen model.
pub struct Engine<'a, F> {
    model: &'a Model<F>,
    table: &'a TextFeatureTable<F>,
    config: TttConfig,
    encoder: Option<AdaptedEncoder<'a, F>>,
    inv_temperature: F,
    reset_events: usize,
}

impl<'a, F: Float> Engine<'a, F> {
    /// `adapters` overrides the freshly attached LoRA set (pre-initialized
    /// adapters); it is ignored in zero-shot and full-tune modes.
    pub fn new(model: &'a Model<F>, table: &'a TextFeatureTable<F>, config: TttConfig, adapters: Option<AdapterSet<F>>) -> Result<Self> {
        config.validate(&model.config.vision)?;
        if table.dim() != model.config.vision.output_dim {
            return Err(Error::shape(
                "engine",
                &[table.num_classes(), table.dim()],
                &[model.config.vision.output_dim],
            ));
        }
        let encoder = match config.mode {
            Mode::ZeroShot => None,
            Mode::FullTune => Some(AdaptedEncoder::with_adapters(model, AdapterSet::full_tune(model, &config.lora)?)),
            _ => {
                let set = match adapters {
                    Some(set) => set,
                    None => AdapterSet::lora(model, &config.lora, &mut stream(config.seed, "attach"))?,
                };
                Some(AdaptedEncoder::with_adapters(model, set))
            }
        };
        Ok(Self {
            model,
            table,
            inv_temperature: model.inv_temperature(),
            config,
            encoder,
            reset_events: 0,
        })
    }

    pub fn config(&self) -> &TttConfig {
        &self.config
    }

    /// Completed end-of-episode adapter resets.
    pub fn reset_events(&self) -> usize {
        self.reset_events
    }

    pub fn trainable_params(&self) -> usize {
        self.encoder.as_ref().map_or(0, |e| e.adapters.trainable_count())
    }

    pub fn encoder(&self) -> Option<&AdaptedEncoder<'a, F>> {
        self.encoder.as_ref()
    }

    pub fn encoder_mut(&mut self) -> Option<&mut AdaptedEncoder<'a, F>> {
        self.encoder.as_mut()
    }

    /// Class probabilities of the normalized original image under the
    /// current weights, without adapting.
    pub fn predict(&self, image: &Tensor<F>) -> Result<Vec<F>> {
        let v = &self.model.config.vision;
        let mut rng = stream(0, "predict");
        let views = make_views(image, 1, v.image_size, &self.model.norm, &self.config.augment, &mut rng)?;
        let patches = patchify(&views.views, v.patch_size)?;
        self.probabilities(&patches, 1)
    }

    fn probabilities(&self, patches: &Tensor<F>, batch: usize) -> Result<Vec<F>> {
        let mut tape = Tape::new();
        let vit = match &self.encoder {
            Some(enc) => enc.bind(&mut tape, false)?.vit,
            None => crate::encoder::BoundVit::bind_frozen(&mut tape, &self.model.params, &self.model.config.vision)?,
        };
        let x = tape.constant(patches.clone());
        let out = vit.forward(&mut tape, x, batch, None, false)?;
        let p = self.table.probabilities(&mut tape, out.cls, self.inv_temperature)?;
        Ok(tape.value(p).to_vec())
    }

    /// Runs one episode for `instance`, seeded by the run seed and its id.
    pub fn run_episode(&mut self, instance: &Instance<F>) -> Result<EpisodeResult> {
        let start = Instant::now();
        let mut rng = episode_rng(self.config.seed, &instance.id);
        let v = self.model.config.vision.clone();
        let trainable_params = self.trainable_params();
        let mut first: Option<StepGraph<F>> = None;
        let mut step_losses = Vec::new();
        let mut peak = 0;

        let probs = if self.config.mode == Mode::ZeroShot {
            self.predict(&instance.image)?
        } else {
            let enc = self.encoder.as_mut().expect("adapted modes own an encoder");
            enc.reset(&mut rng);
            let views = make_views(
                &instance.image,
                self.config.num_views,
                v.image_size,
                &self.model.norm,
                &self.config.augment,
                &mut rng,
            )?;
            let patches = patchify(&views.views, v.patch_size)?;
            let opt_config = AdamWConfig::new(self.config.lr, self.config.weight_decay);
            let mut opt = AdamW::new(opt_config, enc.adapters.params());
            for _ in 0..self.config.steps {
                let mut g = self.step_graph(&patches, &mut rng)?;
                peak = peak.max(g.peak_nodes);
                let enc = self.encoder.as_mut().expect("adapted modes own an encoder");
                if let Some(loss) = g.loss {
                    step_losses.push(g.tape.scalar(loss).to_f64_lossy());
                    g.tape.backward(loss)?;
                    peak = peak.max(g.tape.len());
                    enc.adapters.params_mut().accumulate_grads(&g.tape, &g.adapter_vars)?;
                    opt.step(enc.adapters.params_mut())?;
                } else {
                    step_losses.push(0.0);
                }
                if first.is_none() {
                    first = Some(g);
                }
            }
            let view0 = gather_views(&patches, &[0], v.num_patches())?;
            let probs = self.probabilities(&view0, 1)?;
            let enc = self.encoder.as_mut().expect("adapted modes own an encoder");
            enc.reset(&mut rng);
            self.reset_events += 1;
            log::debug!("episode {} done; adapters reset ({} resets)", instance.id, self.reset_events);
            probs
        };

        let probs: Vec<f64> = probs.iter().map(|p| p.to_f64_lossy()).collect();
        let predicted = argmax(&probs);
        let first = first.as_ref();
        let (mem, mae) = (first.and_then(|g| g.mem), first.and_then(|g| g.mae));
        let total = first.map(|_| {
            super::total_loss(mem.unwrap_or(0.0), mae.unwrap_or(0.0), self.config.lambda_mem, self.config.lambda_mae)
        });
        Ok(EpisodeResult {
            id: instance.id.clone(),
            label: instance.label,
            predicted,
            confidence: probs[predicted],
            correct: predicted == instance.label,
            probs,
            mem_loss: mem,
            mae_loss: mae,
            total_loss: total,
            step_losses,
            selected: first.map(|g| g.selected.clone()).unwrap_or_default(),
            trainable_params,
            tokens: first.map(|g| g.tokens).unwrap_or_default(),
            peak_tape_nodes: peak,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Weighted loss of the current adapters on `patches` without updating,
    /// drawing masks from `rng`.
    pub fn evaluate_loss(&self, patches: &Tensor<F>, rng: &mut crate::rng::Rng) -> Result<Option<f64>> {
        let g = self.step_graph(patches, rng)?;
        Ok(g.loss.map(|l| g.tape.scalar(l).to_f64_lossy()))
    }

    /// Weighted loss of the current adapters and its gradient with respect
    /// to every adapter parameter (store order), without updating.
    pub fn loss_gradients(&self, patches: &Tensor<F>, rng: &mut crate::rng::Rng) -> Result<Option<(f64, Vec<Vec<F>>)>> {
        let mut g = self.step_graph(patches, rng)?;
        let Some(loss) = g.loss else { return Ok(None) };
        g.tape.backward(loss)?;
        let grads = g
            .adapter_vars
            .iter()
            .map(|&v| {
                let n = g.tape.shape(v).iter().product();
                g.tape.grad(v).map_or_else(|| vec![F::zero(); n], |d| d.to_vec())
            })
            .collect();
        Ok(Some((g.tape.scalar(loss).to_f64_lossy(), grads)))
    }

    /// Builds the loss graph of one step over the `[N·P, patch_dim]` views.
    fn step_graph(&self, patches: &Tensor<F>, rng: &mut crate::rng::Rng) -> Result<StepGraph<F>> {
        let enc = self.encoder.as_ref().ok_or_else(|| Error::invalid("zero-shot mode has no loss"))?;
        let c = &self.config;
        let v = &self.model.config.vision;
        let (np, seq) = (v.num_patches(), v.seq_len());
        let n = patches.shape()[0] / np;
        let k_classes = self.table.num_classes();
        let (use_mem, use_mae) = (c.lambda_mem > 0.0, c.lambda_mae > 0.0);
        let visual = c.recon_target == ReconTarget::VisualTokens;
        let mut tokens = TokenCounts {
            selection_views: n,
            selection_tokens: n * seq,
            ..TokenCounts::default()
        };

        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape, true)?;
        let mut peak_nodes = 0;
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let (mem, selected, target) = if use_mem {
            // Selection, entropy loss and the reconstruction target all come
            // from one graph over every view.
            let x = tape.constant(patches.clone());
            let out = bound.vit.forward(&mut tape, x, n, None, use_mae && visual)?;
            let probs = self.table.probabilities(&mut tape, out.cls, self.inv_temperature)?;
            let selected = select_confident(tape.value(probs), k_classes, c.cutoff);
            let sel = tape.gather_rows(probs, &selected)?;
            let mem = mem_loss(&mut tape, sel)?;
            terms.push((mem, c.lambda_mem));
            let target = if !use_mae {
                None
            } else if visual {
                let rows: Vec<usize> = selected.iter().flat_map(|&s| s * np..(s + 1) * np).collect();
                Some(tape.gather_rows(out.tokens.expect("tokens requested"), &rows)?)
            } else {
                Some(tape.gather_rows(out.cls, &selected)?)
            };
            (tape.scalar(mem).to_f64_lossy(), selected, target)
        } else {
            // Score views on a throwaway graph; only the selected views
            // enter the loss graph.
            let mut scratch = Tape::new();
            let frozen = enc.bind(&mut scratch, false)?;
            let x = scratch.constant(patches.clone());
            let out = frozen.vit.forward(&mut scratch, x, n, None, false)?;
            let probs = self.table.probabilities(&mut scratch, out.cls, self.inv_temperature)?;
            let values: Vec<f64> = scratch.value(probs).iter().map(|p| p.to_f64_lossy()).collect();
            peak_nodes = scratch.len();
            let selected = select_confident(&values, k_classes, c.cutoff);
            let rows: Vec<&[f64]> = selected.iter().map(|&s| &values[s * k_classes..(s + 1) * k_classes]).collect();
            let mem = mem_loss_value(&rows)?;
            let target = if use_mae {
                let x = tape.constant(gather_views(patches, &selected, np)?);
                let out = bound.vit.forward(&mut tape, x, selected.len(), None, visual)?;
                tokens.target_views = selected.len();
                tokens.target_tokens = selected.len() * seq;
                Some(if visual { out.tokens.expect("tokens requested") } else { out.cls })
            } else {
                None
            };
            (mem, selected, target)
        };

        let mut mae = None;
        if let Some(target) = target {
            let k = selected.len();
            let mut keep = Vec::with_capacity(k);
            for _ in 0..k {
                let mask = sample_mask(np, c.mask_ratio, rng)?;
                keep.push(kept_patches(np, &mask.masked)?);
            }
            let kept = keep[0].len();
            if visual && kept == 0 {
                return Err(Error::invalid("mask ratio leaves no visible patches to reconstruct"));
            }
            let x = tape.constant(gather_views(patches, &selected, np)?);
            let out = bound.vit.forward(&mut tape, x, k, Some(&keep), visual)?;
            tokens.masked_views = k;
            tokens.masked_tokens = k * out.seq_len;
            let loss = if visual {
                let rows: Vec<usize> = keep
                    .iter()
                    .enumerate()
                    .flat_map(|(i, kp)| kp.iter().map(move |&j| i * np + j))
                    .collect();
                let t = tape.gather_rows(target, &rows)?;
                mae_loss(&mut tape, t, out.tokens.expect("tokens requested"), c.detach_target)?
            } else {
                mae_loss(&mut tape, target, out.cls, c.detach_target)?
            };
            mae = Some(tape.scalar(loss).to_f64_lossy());
            terms.push((loss, c.lambda_mae));
        }

        let mut loss = None;
        for (term, w) in terms {
            if w == 0.0 {
                continue;
            }
            let scaled = tape.scale(term, lit(w));
            loss = Some(match loss {
                None => scaled,
                Some(acc) => tape.add(acc, scaled)?,
            });
        }
        debug_assert_eq!(selected.len(), selection_size(n, c.cutoff));
        peak_nodes = peak_nodes.max(tape.len());
        Ok(StepGraph {
            tape,
            loss,
            adapter_vars: bound.adapter_vars,
            mem: Some(mem),
            mae,
            selected,
            tokens,
            peak_nodes,
        })
    }
}

/// Rows of the selected views from stacked `[N·P, d]` patches.
fn gather_views<F: Float>(patches: &Tensor<F>, selected: &[usize], np: usize) -> Result<Tensor<F>> {
    let d = patches.shape()[1];
    let mut out = Vec::with_capacity(selected.len() * np * d);
    for &s in selected {
        out.extend_from_slice(&patches.data()[s * np * d..(s + 1) * np * d]);
    }
    Tensor::new(&[selected.len() * np, d], out)
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
}

/// Episodes plus aggregates for one split.
#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub episodes: Vec<EpisodeResult>,
    pub report: super::RunReport,
    pub resources: ResourceReport,
    pub ece: EceReport,
    pub reset_events: usize,
}

/// Runs one episode per instance in stream order and aggregates.
/// Aggregates are computed in id order so they do not depend on the stream
/// order.
pub fn run_stream<F: Float>(
    instances: &[Instance<F>],
    dataset: &str,
    model: &Model<F>,
    table: &TextFeatureTable<F>,
    config: &TttConfig,
    adapters: Option<AdapterSet<F>>,
) -> Result<StreamOutput> {
    if instances.is_empty() {
        return Err(Error::invalid(format!("split `{dataset}` is empty")));
    }
    let mut engine = Engine::new(model, table, config.clone(), adapters)?;
    let mut episodes = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let r = engine.run_episode(inst)?;
        log::info!(
            "[{}/{}] {} {}: predicted {} (label {}) in {:.1} ms",
            i + 1,
            instances.len(),
            config.mode,
            r.id,
            r.predicted,
            r.label,
            r.wall_ms
        );
        episodes.push(r);
    }
    let mut sorted: Vec<&EpisodeResult> = episodes.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let predictions: Vec<usize> = sorted.iter().map(|e| e.predicted).collect();
    let labels: Vec<usize> = sorted.iter().map(|e| e.label).collect();
    let confidences: Vec<f64> = sorted.iter().map(|e| e.confidence).collect();
    let correct: Vec<bool> = sorted.iter().map(|e| e.correct).collect();
    let ece = metrics::ece(&confidences, &correct, metrics::DEFAULT_ECE_BINS)?;
    let mean = |f: fn(&EpisodeResult) -> Option<f64>| {
        let vals: Vec<f64> = sorted.iter().filter_map(|e| f(e)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let walls: Vec<f64> = episodes.iter().map(|e| e.wall_ms).collect();
    let median_ms = metrics::median(&walls).unwrap_or(0.0);
    let report = super::RunReport {
        mode: config.mode.name().to_string(),
        dataset: dataset.to_string(),
        seed: config.seed,
        top1: metrics::top1_accuracy(&predictions, &labels)?,
        ece: ece.ece,
        mean_mem_loss: mean(|e| e.mem_loss),
        mean_mae_loss: mean(|e| e.mae_loss),
        trainable_params: engine.trainable_params(),
        median_episode_ms: median_ms,
    };
    let resources = ResourceReport {
        trainable_params: engine.trainable_params(),
        // Full tuning trains copies that replace base weights.
        total_params: model.params.total_count()
            + if config.mode == Mode::FullTune { 0 } else { engine.trainable_params() },
        peak_tape_nodes: episodes.iter().map(|e| e.peak_tape_nodes).max().unwrap_or(0),
        wall_ms_per_episode: median_ms,
    };
    Ok(StreamOutput {
        episodes,
        report,
        resources,
        ece,
        reset_events: engine.reset_events(),
    })
}
