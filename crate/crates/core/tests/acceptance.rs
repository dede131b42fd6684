//! Acceptance suite. Builds the synthetic world once (data, pretrained
//! checkpoint, text table), checks every criterion and prints one PASS/FAIL
//! line per criterion. Exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use lora_ttt::bench::{self, shift_split, Dataset, PretrainConfig, ShiftKind, SyntheticShiftSpec, DEFAULT_TEMPLATES, TEST_SPLIT};
use lora_ttt::encoder::{patchify, write_checkpoint, Model, ModelConfig, Projection, TextConfig, TextFeatureTable, VitConfig};
use lora_ttt::lora::{trainable_parameter_count, AdaptedEncoder, AdapterSet, LoraConfig};
use lora_ttt::metrics::{self, ece};
use lora_ttt::rng::{stream, Rng};
use lora_ttt::tensor::{AdamW, AdamWConfig, ParamStore, Tape, Tensor};
use lora_ttt::ttt::{
    mem_loss, run_stream, select_confident, selection_size, Engine, Instance, Mode, ReconTarget, StreamOutput, TttConfig,
};
use lora_ttt::views::{make_views, mask_count, sample_mask};

type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn median(values: &[f64]) -> f64 {
    metrics::median(values).expect("non-empty")
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

// ---------------------------------------------------------------- world

struct World {
    _dir: tempfile::TempDir,
    root: PathBuf,
    dataset: Dataset,
    model: Model<f32>,
    table: TextFeatureTable<f32>,
}

impl World {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn ckpt(&self) -> PathBuf {
        self.root.join("model.lttw")
    }
    fn table_path(&self) -> PathBuf {
        self.root.join("classes.lttc")
    }
}

fn build_world() -> World {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let start = Instant::now();
    bench::generate(&SyntheticShiftSpec::default(), &root.join("data")).unwrap();
    let dataset = Dataset::open(&root.join("data")).unwrap();
    let (model, log) = bench::pretrain(
        &dataset,
        &ModelConfig::default(),
        &PretrainConfig::default(),
        &mut stream(0, "pretrain"),
    )
    .unwrap();
    write_checkpoint(&root.join("model.lttw"), &model).unwrap();
    let templates: Vec<String> = DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect();
    bench::embed_text(
        &root.join("model.lttw"),
        &dataset.manifest.class_names,
        &templates,
        &root.join("classes.lttc"),
    )
    .unwrap();
    // Runs use the table exactly as written to disk.
    let table = TextFeatureTable::load(&root.join("classes.lttc")).unwrap();
    println!(
        "world: {} items, pretraining loss {:.4} -> {:.4} in {:.0} s",
        dataset.manifest.items.len(),
        log.epoch_losses.first().unwrap(),
        log.epoch_losses.last().unwrap(),
        start.elapsed().as_secs_f64()
    );
    World {
        _dir: dir,
        root,
        dataset,
        model,
        table,
    }
}

// ---------------------------------------------------------------- sweep

struct Run {
    mode: Mode,
    split: String,
    seed: u64,
    secs: f64,
    out: StreamOutput,
}

struct Sweep {
    clean_top1: f64,
    runs: Vec<Run>,
}

impl Sweep {
    fn get(&self, mode: Mode, split: &str, seed: u64) -> &Run {
        self.runs
            .iter()
            .find(|r| r.mode == mode && r.split == split && r.seed == seed)
            .expect("run exists")
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const SWEEP_MODES: [Mode; 4] = [Mode::ZeroShot, Mode::LoraTtt, Mode::LoraTttM, Mode::LoraTttA];

fn shifted_splits() -> Vec<String> {
    ShiftKind::CORRUPTIONS.iter().map(|&k| shift_split(k)).collect()
}

fn sweep(w: &World) -> Sweep {
    let clean = w.dataset.instances::<f32>(TEST_SPLIT).unwrap();
    let zs = TttConfig::default().with_mode(Mode::ZeroShot);
    let clean_top1 = run_stream(&clean, TEST_SPLIT, &w.model, &w.table, &zs, None).unwrap().report.top1;
    let mut runs = Vec::new();
    for split in shifted_splits() {
        let instances = w.dataset.instances::<f32>(&split).unwrap();
        for seed in SEEDS {
            for mode in SWEEP_MODES {
                let mut cfg = TttConfig::default().with_mode(mode);
                cfg.seed = seed;
                let start = Instant::now();
                let out = run_stream(&instances, &split, &w.model, &w.table, &cfg, None).unwrap();
                runs.push(Run {
                    mode,
                    split: split.clone(),
                    seed,
                    secs: start.elapsed().as_secs_f64(),
                    out,
                });
            }
        }
    }
    Sweep { clean_top1, runs }
}

// ---------------------------------------------------------------- 1

fn toy_model(seed: u64) -> Model<f64> {
    let config = ModelConfig {
        vision: VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            output_dim: 6,
        },
        text: TextConfig {
            context_len: 8,
            width: 8,
            num_layers: 1,
            num_heads: 2,
            mlp_ratio: 2,
        },
    };
    let mut m = Model::init(config, &mut stream(seed, "toy")).unwrap();
    m.freeze();
    // A moderate temperature keeps the toy probabilities away from saturation.
    m.params.get_mut("logit_scale").unwrap().value.data_mut()[0] = 10f64.ln();
    m
}

fn toy_table(seed: u64, classes: usize, dim: usize) -> TextFeatureTable<f64> {
    let mut rng = stream(seed, "toy-table");
    let mut data = Vec::new();
    for _ in 0..classes {
        let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / n));
    }
    let names = (0..classes).map(|k| format!("class {k}")).collect();
    TextFeatureTable::new(names, Tensor::new(&[classes, dim], data).unwrap()).unwrap()
}

/// Max over all adapter entries of |analytic − central difference|,
/// relative to the largest finite-difference gradient magnitude.
fn engine_gradient_error(seed: u64, mode: Mode, target: ReconTarget) -> f64 {
    const H: f64 = 1e-6;
    let model = toy_model(seed);
    let table = toy_table(seed, 5, 6);
    let mut cfg = TttConfig {
        num_views: 8,
        cutoff: 0.25,
        recon_target: target,
        seed,
        lora: LoraConfig {
            rank: 2,
            scale: 1.5,
            matrices: Projection::ALL.to_vec(),
            layers: vec![1, 2],
        },
        ..TttConfig::default()
    }
    .with_mode(mode);
    cfg.lambda_mae = if mode == Mode::LoraTttM { 0.0 } else { 2.0 };
    let mut engine = Engine::new(&model, &table, cfg.clone(), None).unwrap();
    let mut rng = stream(seed, "adapters");
    for p in engine.encoder_mut().unwrap().adapters.params_mut().iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    let image = Tensor::new(&[3, 8, 8], (0..192).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let views = make_views(&image, cfg.num_views, 8, &model.norm, &cfg.augment, &mut stream(seed, "views")).unwrap();
    let patches = patchify(&views.views, 4).unwrap();
    let masks = || stream(seed, "masks");
    let (_, grads) = engine.loss_gradients(&patches, &mut masks()).unwrap().unwrap();

    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (slot, analytic) in grads.iter().enumerate() {
        for (j, &a) in analytic.iter().enumerate() {
            let mut eval = |delta: f64| {
                let enc = engine.encoder_mut().unwrap();
                enc.adapters.params_mut().at_mut(slot).value.data_mut()[j] += delta;
                let l = engine.evaluate_loss(&patches, &mut masks()).unwrap().unwrap();
                engine.encoder_mut().unwrap().adapters.params_mut().at_mut(slot).value.data_mut()[j] -= delta;
                l
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            diff = diff.max((a - numeric).abs());
            scale = scale.max(numeric.abs());
        }
    }
    diff / scale.max(1e-4)
}

fn c1_gradient_integrity() -> Verdict {
    let start = Instant::now();
    let cases = [
        (Mode::LoraTttM, ReconTarget::ClassToken),
        (Mode::LoraTttA, ReconTarget::ClassToken),
        (Mode::LoraTttA, ReconTarget::VisualTokens),
        (Mode::LoraTtt, ReconTarget::ClassToken),
        (Mode::LoraTtt, ReconTarget::VisualTokens),
    ];
    let mut worst = 0.0f64;
    for seed in 0..5 {
        for (mode, target) in cases {
            let e = engine_gradient_error(seed, mode, target);
            ensure!(e < 1e-4, "episode {seed}, {mode} {target:?}: relative error {e:.2e}");
            worst = worst.max(e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("max relative error {worst:.2e} over 5 episodes x 5 loss setups in {secs:.1} s"))
}

// ---------------------------------------------------------------- 2

fn logits(embedding: &[f32], table: &TextFeatureTable<f32>, inv_t: f32) -> Vec<f32> {
    let n = embedding.iter().map(|v| v * v).sum::<f32>().sqrt();
    table
        .features()
        .data()
        .chunks(table.dim())
        .map(|row| inv_t * row.iter().zip(embedding).map(|(t, e)| t * e / n).sum::<f32>())
        .collect()
}

fn c2_identity_at_init(w: &World) -> Verdict {
    let enc = AdaptedEncoder::attach(&w.model, &LoraConfig::default(), &mut stream(0, "identity")).unwrap();
    let mut images: Vec<Tensor<f32>> = w
        .dataset
        .instances::<f32>(TEST_SPLIT)
        .unwrap()
        .into_iter()
        .map(|i| i.image)
        .collect();
    let mut rng = stream(0, "random-images");
    while images.len() < 100 {
        images.push(Tensor::new(&[3, 32, 32], (0..3072).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap());
    }
    let inv_t = w.model.inv_temperature();
    let mut worst = 0.0f32;
    for img in &images {
        let x = w.model.norm.apply(img).unwrap();
        let base = logits(&w.model.encode_image(&x, None).unwrap().class_embedding, &w.table, inv_t);
        let adapted = logits(&enc.encode_image(&x, None).unwrap().class_embedding, &w.table, inv_t);
        for (a, b) in base.iter().zip(&adapted) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst == 0.0, "max abs logit difference {worst:e}");
    Ok(format!("max abs logit difference 0 over {} images", images.len()))
}

// ---------------------------------------------------------------- 3

fn c3_episodic_reset(w: &World) -> Verdict {
    let probes: Vec<Tensor<f32>> = w
        .dataset
        .instances::<f32>(TEST_SPLIT)
        .unwrap()
        .into_iter()
        .take(3)
        .map(|i| i.image)
        .collect();
    let zs = Engine::new(&w.model, &w.table, TttConfig::default().with_mode(Mode::ZeroShot), None).unwrap();
    let reference: Vec<Vec<u32>> = probes.iter().map(|p| bits(&zs.predict(p).unwrap())).collect();
    let mut stream_instances: Vec<Instance<f32>> = w.dataset.instances(TEST_SPLIT).unwrap();
    stream_instances.extend(w.dataset.instances(&shift_split(ShiftKind::Blur)).unwrap());
    stream_instances.truncate(100);
    ensure!(stream_instances.len() == 100, "only {} instances", stream_instances.len());

    let mut engine = Engine::new(&w.model, &w.table, TttConfig::default(), None).unwrap();
    let base_hash = w.model.params.digest();
    let same = |e: &Engine<f32>| probes.iter().zip(&reference).all(|(p, r)| bits(&e.predict(p).unwrap()) == *r);
    ensure!(same(&engine), "adapted predictions differ from zero-shot before the first episode");
    for (i, inst) in stream_instances.iter().enumerate() {
        engine.run_episode(inst).unwrap();
        ensure!(same(&engine), "predictions changed after episode {i}");
        ensure!(w.model.params.digest() == base_hash, "base weights changed in episode {i}");
        let identity = engine
            .encoder()
            .unwrap()
            .adapters
            .params()
            .iter()
            .filter(|p| p.name.ends_with(".b"))
            .all(|p| p.value.data().iter().all(|&v| v == 0.0));
        ensure!(identity, "adapters not back at B = 0 after episode {i}");
    }
    ensure!(engine.reset_events() == 100, "{} resets for 100 episodes", engine.reset_events());
    Ok(format!("100 episodes, 100 resets, base hash {base_hash:016x} constant"))
}

// ---------------------------------------------------------------- 4

fn c4_order_invariance(w: &World, sweep: &Sweep) -> Verdict {
    let split = shift_split(ShiftKind::GaussianNoise);
    // A 50-instance stream, permuted, against the same ids in the sweep run.
    let mut instances = w.dataset.instances::<f32>(&split).unwrap();
    instances.truncate(50);
    ensure!(instances.len() == 50, "stream has {} instances", instances.len());
    instances.shuffle(&mut stream(4, "permutation"));
    let permuted = run_stream(&instances, &split, &w.model, &w.table, &TttConfig::default(), None).unwrap();
    let original = &sweep.get(Mode::LoraTtt, &split, 0).out;
    let ids: Vec<&String> = original.episodes.iter().map(|e| &e.id).take(50).collect();
    ensure!(
        ids.iter().copied().ne(permuted.episodes.iter().map(|e| &e.id)),
        "permutation left the order unchanged"
    );
    for e in &original.episodes[..50] {
        let p = permuted.episodes.iter().find(|p| p.id == e.id).unwrap();
        let same_probs = e.probs.iter().map(|v| v.to_bits()).eq(p.probs.iter().map(|v| v.to_bits()));
        ensure!(
            same_probs && e.predicted == p.predicted && serde_json::to_string(e).unwrap() == serde_json::to_string(p).unwrap(),
            "episode {} differs under permutation",
            e.id
        );
    }
    Ok("50 per-instance predictions and probabilities bit-identical".into())
}

// ---------------------------------------------------------------- 5

fn entropy_oracle(p: &[f64]) -> f64 {
    p.iter().map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 }).sum()
}

fn random_simplex(rng: &mut Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0f64..4.0).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn c5_oracles() -> Verdict {
    let mut rng = stream(5, "oracles");

    // marginal entropy of the mean prediction
    let mut mem_err = 0.0f64;
    for _ in 0..1000 {
        let (n, k) = (rng.random_range(1..12), rng.random_range(2..20));
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, k)).collect();
        let mut mean = vec![0.0; k];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[n, k], rows.concat()).unwrap());
        let l = mem_loss(&mut tape, x).unwrap();
        mem_err = mem_err.max((tape.scalar(l) - entropy_oracle(&mean)).abs());
    }
    ensure!(mem_err <= 1e-12, "mem_loss error {mem_err:e}");

    // confident-view selection against a full sort
    for trial in 0..1000 {
        let (n, k) = (rng.random_range(1..130), rng.random_range(2..12));
        let cutoff = [0.05, 0.1, 0.25, 0.5, 1.0][trial % 5];
        let probs: Vec<f64> = (0..n).flat_map(|_| random_simplex(&mut rng, k)).collect();
        let mut by_entropy: Vec<(f64, usize)> =
            probs.chunks(k).enumerate().map(|(i, r)| (entropy_oracle(r), i)).collect();
        by_entropy.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let keep = ((cutoff * n as f64).floor() as usize).max(1);
        let expected: Vec<usize> = by_entropy[..keep].iter().map(|&(_, i)| i).collect();
        ensure!(select_confident(&probs, k, cutoff) == expected, "selection differs in trial {trial}");
    }

    // calibration error against brute-force binning
    let mut ece_err = 0.0f64;
    for _ in 0..20 {
        let conf: Vec<f64> = (0..1000)
            .map(|i| if i % 50 == 0 { (i / 50) as f64 / 20.0 } else { rng.random_range(0.0..=1.0) })
            .collect();
        let correct: Vec<bool> = conf.iter().map(|&c| rng.random::<f64>() < c).collect();
        let mut brute = 0.0;
        for b in 0..20 {
            let (lo, hi) = (b as f64 / 20.0, (b + 1) as f64 / 20.0);
            let members: Vec<usize> = (0..conf.len())
                .filter(|&i| (conf[i] > lo && conf[i] <= hi) || (b == 0 && conf[i] == 0.0))
                .collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / m;
            let avg = members.iter().map(|&i| conf[i]).sum::<f64>() / m;
            brute += m / conf.len() as f64 * (acc - avg).abs();
        }
        ece_err = ece_err.max((ece(&conf, &correct, 20).unwrap().ece - brute).abs());
    }
    ensure!(ece_err <= 1e-12, "ece error {ece_err:e}");

    // AdamW against the hand-written recurrence
    let mut adam_err = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..40);
        let (lr, wd) = (rng.random_range(1e-4..1e-2), rng.random_range(0.0..0.5));
        let mut w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(w.clone()), true).unwrap();
        let cfg = AdamWConfig::new(lr, wd);
        let mut opt = AdamW::new(cfg, &store);
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        for t in 1..=25 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            store.at_mut(0).value.set_grad(g.clone()).unwrap();
            opt.step(&mut store).unwrap();
            for i in 0..n {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / (1.0 - cfg.beta1.powi(t));
                let v_hat = v[i] / (1.0 - cfg.beta2.powi(t));
                w[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps)) + lr * wd * w[i];
            }
            for (a, b) in store.at(0).value.data().iter().zip(&w) {
                adam_err = adam_err.max((a - b).abs());
            }
        }
    }
    ensure!(adam_err <= 1e-12, "adamw error {adam_err:e}");
    Ok(format!(
        "mem {mem_err:.1e}, selection exact in 1000 trials, ece {ece_err:.1e}, adamw {adam_err:.1e}"
    ))
}

// ---------------------------------------------------------------- 6

fn c6_cardinalities(sweep: &Sweep) -> Verdict {
    let mut rng = stream(6, "masks");
    for p in 1..=256usize {
        for ratio in [0.25, 0.5, 0.75] {
            let expected = (ratio * p as f64).floor() as usize;
            ensure!(mask_count(p, ratio) == expected, "mask_count({p}, {ratio})");
            let mask = sample_mask(p, ratio, &mut rng).unwrap();
            let mut idx = mask.masked.clone();
            idx.sort_unstable();
            idx.dedup();
            ensure!(
                mask.masked.len() == expected && idx.len() == expected && idx.iter().all(|&i| i < p),
                "sample_mask({p}, {ratio}) masked {} patches",
                mask.masked.len()
            );
        }
    }
    for n in 1..=256usize {
        for rho in [0.01, 0.1, 0.25, 0.5, 1.0] {
            let expected = ((rho * n as f64).floor() as usize).max(1);
            ensure!(selection_size(n, rho) == expected, "selection_size({n}, {rho})");
        }
    }
    ensure!(selection_size(64, 0.1) == 6, "N=64, rho=0.1 selects {}", selection_size(64, 0.1));
    let episodes = sweep.runs.iter().filter(|r| r.mode != Mode::ZeroShot).flat_map(|r| &r.out.episodes);
    let mut count = 0;
    for e in episodes {
        ensure!(e.selected.len() == 6, "episode {} selected {} views", e.id, e.selected.len());
        count += 1;
    }
    Ok(format!("masks exact for P <= 256, 6 of 64 views selected in all {count} adapted episodes"))
}

// ---------------------------------------------------------------- 7

fn c7_parameter_accounting() -> Verdict {
    let d = 768;
    let config = ModelConfig {
        vision: VitConfig {
            embed_dim: d,
            num_heads: 12,
            mlp_ratio: 1,
            ..VitConfig::default()
        },
        text: TextConfig {
            width: 16,
            num_layers: 1,
            ..TextConfig::default()
        },
    };
    let layers_total = config.vision.num_layers;
    let model = Model::<f32>::init(config, &mut stream(7, "wide")).unwrap();
    use Projection::*;
    let layer_sets = [
        ("last", LoraConfig::last_layers(layers_total, 1)),
        ("last-2", LoraConfig::last_layers(layers_total, 2)),
        ("all", LoraConfig::last_layers(layers_total, layers_total)),
    ];
    let matrix_sets: [&[Projection]; 4] = [&[Value], &[Value, Query], &[Key, Query], &[Key, Value, Query, Output]];
    let mut checked = 0;
    for (_, layers) in &layer_sets {
        for rank in [4, 16, 64] {
            for matrices in matrix_sets {
                let cfg = LoraConfig {
                    rank,
                    scale: 1.0,
                    matrices: matrices.to_vec(),
                    layers: layers.clone(),
                };
                let set = AdapterSet::lora(&model, &cfg, &mut stream(7, "grid")).unwrap();
                let enumerated: usize = set.params().iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum();
                let formula = trainable_parameter_count(&cfg, d);
                ensure!(
                    enumerated == formula && set.trainable_count() == formula,
                    "rank {rank}, {matrices:?}, layers {layers:?}: enumerated {enumerated}, formula {formula}"
                );
                checked += 1;
            }
        }
    }
    let reference = LoraConfig {
        rank: 16,
        scale: 1.0,
        matrices: vec![Key, Value, Query, Output],
        layers: LoraConfig::last_layers(layers_total, 2),
    };
    let runtime = AdapterSet::lora(&model, &reference, &mut stream(7, "ref")).unwrap().trainable_count();
    ensure!(
        trainable_parameter_count(&reference, d) == 196_608 && runtime == 196_608,
        "reference point gives {runtime}"
    );
    Ok(format!("{checked} grid points match; d=768, r=16, kvqo, 2 layers = 196608"))
}

// ---------------------------------------------------------------- 8

fn c8_directional_efficacy(sweep: &Sweep) -> Verdict {
    ensure!(sweep.clean_top1 >= 0.7, "clean zero-shot top-1 {:.3} below the 0.7 gate", sweep.clean_top1);
    let mut strict = 0;
    let mut lines = Vec::new();
    let mut secs = 0.0;
    for split in shifted_splits() {
        let zs = median(&SEEDS.map(|s| sweep.get(Mode::ZeroShot, &split, s).out.report.top1));
        let ttt = median(&SEEDS.map(|s| sweep.get(Mode::LoraTtt, &split, s).out.report.top1));
        secs += SEEDS
            .iter()
            .map(|&s| sweep.get(Mode::ZeroShot, &split, s).secs + sweep.get(Mode::LoraTtt, &split, s).secs)
            .sum::<f64>();
        ensure!(zs < sweep.clean_top1, "{split}: zero-shot {zs:.3} is not below clean {:.3}", sweep.clean_top1);
        lines.push(format!("{}: {zs:.2}->{ttt:.2}", split.trim_start_matches("test_")));
        ensure!(ttt >= zs, "{split}: lora-ttt median {ttt:.3} below zero-shot {zs:.3}");
        if ttt > zs {
            strict += 1;
        }
    }
    ensure!(strict >= 2, "strict improvement on only {strict} of 4 shifts ({})", lines.join(", "));
    ensure!(secs < 900.0, "runs took {secs:.0} s");
    Ok(format!(
        "clean {:.2}; {}; {strict}/4 strictly better; {secs:.0} s",
        sweep.clean_top1,
        lines.join(", ")
    ))
}

// ---------------------------------------------------------------- 9

fn c9_calibration(sweep: &Sweep) -> Verdict {
    // Per seed, the mean ECE over the four shifted splits.
    let splits = shifted_splits();
    let per_seed = |mode: Mode| -> f64 {
        median(&SEEDS.map(|s| {
            splits.iter().map(|sp| sweep.get(mode, sp, s).out.report.ece).sum::<f64>() / splits.len() as f64
        }))
    };
    let (zs, m, a) = (per_seed(Mode::ZeroShot), per_seed(Mode::LoraTttM), per_seed(Mode::LoraTttA));
    let detail = format!("ECE zero-shot {zs:.4}, lora-ttt-m {m:.4}, lora-ttt-a {a:.4}");
    ensure!(a <= m, "{detail}: lora-ttt-a above lora-ttt-m");
    ensure!((a - zs).abs() <= (m - zs).abs(), "{detail}: lora-ttt-a drifts further from zero-shot");
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn c10_efficiency(w: &World, sweep: &Sweep) -> Verdict {
    let params = |mode: Mode| {
        Engine::new(&w.model, &w.table, TttConfig::default().with_mode(mode), None)
            .unwrap()
            .trainable_params()
    };
    let (p_zs, p_a, p_ttt, p_full) = (
        params(Mode::ZeroShot),
        params(Mode::LoraTttA),
        params(Mode::LoraTtt),
        params(Mode::FullTune),
    );
    ensure!(p_zs < p_a && p_a <= p_ttt && p_ttt < p_full, "params {p_zs}, {p_a}, {p_ttt}, {p_full}");

    let wall = |mode: Mode| {
        let all: Vec<f64> = sweep
            .runs
            .iter()
            .filter(|r| r.mode == mode)
            .flat_map(|r| r.out.episodes.iter().map(|e| e.wall_ms))
            .collect();
        median(&all)
    };
    let (t_zs, t_a, t_ttt) = (wall(Mode::ZeroShot), wall(Mode::LoraTttA), wall(Mode::LoraTtt));
    ensure!(t_zs < t_a && t_a <= t_ttt, "median ms zero-shot {t_zs:.1}, lora-ttt-a {t_a:.1}, lora-ttt {t_ttt:.1}");

    let v = &w.model.config.vision;
    let (np, seq) = (v.num_patches(), v.seq_len());
    let cfg = TttConfig::default();
    let k = selection_size(cfg.num_views, cfg.cutoff);
    let masked_seq = 1 + np - mask_count(np, cfg.mask_ratio);
    let mut ratio = 0.0;
    for r in sweep.runs.iter().filter(|r| r.mode == Mode::LoraTttA) {
        for e in &r.out.episodes {
            let t = e.tokens;
            ensure!(
                t.selection_views == cfg.num_views && t.target_views == k && t.masked_views == k,
                "episode {}: token accounting {t:?}",
                e.id
            );
            ensure!(
                t.target_tokens == k * seq && t.masked_tokens == k * masked_seq,
                "episode {}: token accounting {t:?}",
                e.id
            );
            ratio = t.masked_tokens as f64 / (t.masked_views * seq) as f64;
        }
    }
    ensure!((0.4..=0.6).contains(&ratio), "masked views keep {ratio:.2} of their tokens");
    Ok(format!(
        "params {p_zs} < {p_a} <= {p_ttt} < {p_full}; median ms {t_zs:.1} < {t_a:.1} <= {t_ttt:.1}; \
         loss branch sees {k}/{} views at {:.0}% tokens",
        cfg.num_views,
        ratio * 100.0
    ))
}

// ---------------------------------------------------------------- 11

fn c11_determinism(w: &World) -> Verdict {
    let run = |out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_lora-ttt"))
            .args(["run", "--mode", "lora-ttt", "--split", "test_occlusion", "--seed", "3"])
            .arg("--ckpt")
            .arg(w.ckpt())
            .arg("--table")
            .arg(w.table_path())
            .arg("--data")
            .arg(w.data())
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read(out.join("episodes.jsonl")).unwrap()
    };
    let a = run(&w.root.join("det-a"));
    let b = run(&w.root.join("det-b"));
    ensure!(a == b, "episodes.jsonl differs between identical runs");
    Ok(format!("{} identical bytes", a.len()))
}

fn main() {
    let start = Instant::now();
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    verdicts.push((1, "gradient integrity", guarded(c1_gradient_integrity)));
    let w = build_world();
    verdicts.push((2, "LoRA identity at init", guarded(|| c2_identity_at_init(&w))));
    verdicts.push((3, "episodic reset", guarded(|| c3_episodic_reset(&w))));
    let sweep = sweep(&w);
    verdicts.push((4, "order invariance", guarded(|| c4_order_invariance(&w, &sweep))));
    verdicts.push((5, "oracle equivalences", guarded(c5_oracles)));
    verdicts.push((6, "mask and selection cardinalities", guarded(|| c6_cardinalities(&sweep))));
    verdicts.push((7, "parameter accounting", guarded(c7_parameter_accounting)));
    verdicts.push((8, "directional efficacy", guarded(|| c8_directional_efficacy(&sweep))));
    verdicts.push((9, "calibration trend", guarded(|| c9_calibration(&sweep))));
    verdicts.push((10, "efficiency trend", guarded(|| c10_efficiency(&w, &sweep))));
    verdicts.push((11, "determinism", guarded(|| c11_determinism(&w))));

    let mut failed = 0;
    for (id, name, v) in &verdicts {
        match v {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({detail})");
            }
        }
    }
    println!(
        "{} passed, {failed} failed in {:.0} s",
        verdicts.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
