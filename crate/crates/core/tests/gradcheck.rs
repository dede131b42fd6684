//! Analytic gradients against central finite differences in f64.

use lora_ttt::encoder::{contrastive_loss, patchify, BoundText, BoundVit, Model, ModelConfig, TextConfig, VitConfig};
use lora_ttt::lora::{AdaptedEncoder, LoraConfig};
use lora_ttt::rng::stream;
use lora_ttt::tensor::{ParamStore, Tape, Tensor, Var};
use lora_ttt::ttt::{mae_loss, mem_loss};
use rand::Rng as _;

const H: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, "gradcheck");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Denominator floor: parameters whose true gradient is zero (key biases,
/// by shift invariance of softmax) would otherwise divide rounding noise by
/// nothing.
const SCALE_FLOOR: f64 = 1e-4;

/// Worst per-input `max|analytic − numeric| / max(max|numeric|, SCALE_FLOOR)`.
///
/// `build` maps leaf variables to a scalar loss.
fn check(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = build(&mut t, &vars);
        t.scalar(l)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
        let mut numeric = vec![0.0; x.numel()];
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += H;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * H;
            let down = eval(&xs);
            numeric[j] = (up - down) / (2.0 * H);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(SCALE_FLOOR);
        let err = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(err / scale);
    }
    worst
}

/// Contracts any output with a fixed random weight so every element
/// contributes a distinct gradient.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = t.constant(random(t.shape(y), seed));
    let p = t.mul(y, w).unwrap();
    t.sum(p)
}

macro_rules! unary {
    ($name:ident, $shape:expr, |$t:ident, $x:ident| $body:expr) => {
        #[test]
        fn $name() {
            let err = check(&[random(&$shape, 1)], &|$t, v| {
                let $x = v[0];
                let y = $body;
                project($t, y, 99)
            });
            assert!(err < 1e-6, "relative error {err}");
        }
    };
}

unary!(exp_gradient, [3, 4], |t, x| t.exp(x));
unary!(transpose_gradient, [3, 5], |t, x| t.transpose(x).unwrap());
unary!(scale_gradient, [6], |t, x| t.scale(x, -2.5));
unary!(mean_gradient, [2, 7], |t, x| t.mean(x));
unary!(sum_gradient, [2, 7], |t, x| t.sum(x));
unary!(mean_rows_gradient, [5, 3], |t, x| t.mean_rows(x).unwrap());
unary!(gelu_gradient, [4, 4], |t, x| t.gelu(x));
unary!(softmax_gradient, [3, 6], |t, x| t.softmax(x));
unary!(log_softmax_gradient, [3, 6], |t, x| t.log_softmax(x));
unary!(l2_normalize_gradient, [3, 5], |t, x| t.l2_normalize(x));
unary!(slice_gradient, [4, 6], |t, x| t.slice(x, 1, 2, 5).unwrap());
unary!(slice_rows_gradient, [4, 6], |t, x| t.slice(x, 0, 1, 3).unwrap());
unary!(gather_rows_gradient, [4, 3], |t, x| t.gather_rows(x, &[2, 0, 2, 3]).unwrap());

#[test]
fn detach_blocks_gradient() {
    // d(x·stop(x))/dx = x, which finite differences cannot see
    let x = random(&[2, 2], 1);
    let mut t = Tape::new();
    let v = t.leaf(x.clone(), true);
    let d = t.detach(v);
    let y = t.mul(v, d).unwrap();
    let l = t.sum(y);
    t.backward(l).unwrap();
    assert_eq!(t.grad(v).unwrap(), x.data());
}

#[test]
fn entropy_gradient() {
    // strictly positive probability rows
    let err = check(&[random(&[3, 5], 2)], &|t, v| {
        let p = t.softmax(v[0]);
        let h = t.entropy(p);
        project(t, h, 7)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn nll_gradient() {
    let err = check(&[random(&[4, 5], 3)], &|t, v| {
        let lp = t.log_softmax(v[0]);
        t.nll(lp, &[0, 4, 2, 2]).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn binary_elementwise_gradients() {
    let xs = [random(&[3, 4], 4), random(&[3, 4], 5)];
    for op in 0..4 {
        let err = check(&xs, &|t, v| {
            let y = match op {
                0 => t.add(v[0], v[1]).unwrap(),
                1 => t.sub(v[0], v[1]).unwrap(),
                2 => t.mul(v[0], v[1]).unwrap(),
                _ => t.mse(v[0], v[1]).unwrap(),
            };
            project(t, y, 11)
        });
        assert!(err < 1e-6, "op {op}: {err}");
    }
}

#[test]
fn matmul_gradients() {
    let err = check(&[random(&[3, 4], 6), random(&[4, 5], 7)], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project(t, y, 12)
    });
    assert!(err < 1e-6, "{err}");
    let err = check(&[random(&[3, 4], 6), random(&[5, 4], 7)], &|t, v| {
        let y = t.matmul_nt(v[0], v[1]).unwrap();
        project(t, y, 13)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn broadcast_gradients() {
    let err = check(&[random(&[3, 4], 8), random(&[4], 9)], &|t, v| {
        let y = t.add_row(v[0], v[1]).unwrap();
        project(t, y, 14)
    });
    assert!(err < 1e-6, "{err}");
    let err = check(&[random(&[3, 4], 8), random(&[1], 9)], &|t, v| {
        let y = t.mul_scalar(v[0], v[1]).unwrap();
        project(t, y, 15)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn concat_gradients() {
    for axis in 0..2 {
        let err = check(&[random(&[2, 3], 10), random(&[2, 3], 11)], &|t, v| {
            let y = t.concat(&[v[0], v[1], v[0]], axis).unwrap();
            project(t, y, 16)
        });
        assert!(err < 1e-6, "axis {axis}: {err}");
    }
}

#[test]
fn layer_norm_gradient() {
    let xs = [random(&[3, 6], 12), random(&[6], 13), random(&[6], 14)];
    let err = check(&xs, &|t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        project(t, y, 17)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn attention_gradients() {
    for causal in [false, true] {
        let xs = [random(&[6, 4], 15), random(&[6, 4], 16), random(&[6, 4], 17)];
        let err = check(&xs, &|t, v| {
            let y = t.attention(v[0], v[1], v[2], 2, 3, 2, causal).unwrap();
            project(t, y, 18)
        });
        assert!(err < 1e-6, "causal {causal}: {err}");
    }
}

#[test]
fn contrastive_loss_gradient() {
    let xs = [random(&[4, 3], 18), random(&[4, 3], 19), Tensor::new(&[1], vec![3.0]).unwrap()];
    let err = check(&xs, &|t, v| {
        let a = t.l2_normalize(v[0]);
        let b = t.l2_normalize(v[1]);
        contrastive_loss(t, a, b, v[2]).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

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
    m
}

/// Like [`check`] for parameters held in a store: `build` binds the store
/// on a tape and returns the loss plus the `(slot, var)` pairs to probe.
fn check_store(
    store: &mut ParamStore<f64>,
    slots: &[usize],
    build: &dyn Fn(&ParamStore<f64>, &mut Tape<f64>) -> (Var, Vec<(usize, Var)>),
) -> f64 {
    let mut tape = Tape::new();
    let (loss, bound) = build(store, &mut tape);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for &slot in slots {
        let var = bound.iter().find(|(s, _)| *s == slot).expect("slot bound").1;
        let n = store.at(slot).value.numel();
        let analytic = tape.grad(var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let x = store.at(slot).value.data()[j];
            let eval = |v: f64, store: &mut ParamStore<f64>| {
                store.at_mut(slot).value.data_mut()[j] = v;
                let mut t = Tape::new();
                let (l, _) = build(store, &mut t);
                t.scalar(l)
            };
            let up = eval(x + H, store);
            let down = eval(x - H, store);
            store.at_mut(slot).value.data_mut()[j] = x;
            numeric[j] = (up - down) / (2.0 * H);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(SCALE_FLOOR);
        let err = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(err / scale);
    }
    worst
}

#[test]
fn image_encoder_gradient_reaches_every_weight() {
    let mut model = toy_model(3);
    model.params.set_trainable(true);
    let images: Vec<Tensor<f64>> = (0..3).map(|i| random(&[3, 8, 8], 40 + i)).collect();
    let patches = patchify(&images, 4).unwrap();
    let text = random(&[3, 6], 50);
    let vit_cfg = model.config.vision.clone();
    let slots: Vec<usize> = (0..model.params.len())
        .filter(|&s| model.params.at(s).name.starts_with("img."))
        .collect();
    let err = check_store(&mut model.params, &slots, &|store, t| {
        let vit = BoundVit::bind(t, store, &vit_cfg).unwrap();
        let x = t.constant(patches.clone());
        let out = vit.forward(t, x, 3, None, false).unwrap();
        let img = t.l2_normalize(out.cls);
        let txt = t.constant(text.clone());
        let txt = t.l2_normalize(txt);
        let s = t.constant(Tensor::new(&[1], vec![5.0]).unwrap());
        (contrastive_loss(t, img, txt, s).unwrap(), vit.bound().to_vec())
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn text_encoder_gradient_reaches_every_weight() {
    let mut model = toy_model(4);
    model.params.set_trainable(true);
    let txt_cfg = model.config.text.clone();
    let seqs = vec![vec![1, 7, 9, 2], vec![1, 12, 2], vec![1, 5, 6, 8, 11, 2]];
    let images = random(&[3, 6], 51);
    let slots: Vec<usize> = (0..model.params.len())
        .filter(|&s| model.params.at(s).name.starts_with("txt."))
        .collect();
    let err = check_store(&mut model.params, &slots, &|store, t| {
        let txt = BoundText::bind(t, store, &txt_cfg).unwrap();
        let e = txt.forward(t, &seqs).unwrap();
        let e = t.l2_normalize(e);
        let img = t.constant(images.clone());
        let img = t.l2_normalize(img);
        let s = t.constant(Tensor::new(&[1], vec![5.0]).unwrap());
        (contrastive_loss(t, img, e, s).unwrap(), txt.bound().to_vec())
    });
    assert!(err < 1e-5, "{err}");
}

/// Probes every adapter entry of a LoRA set on both layers of a 2-layer
/// ViT, with B randomized so that both factors receive gradient.
fn adapter_check(seed: u64, loss: &dyn Fn(&mut Tape<f64>, &BoundVit<f64>, Var) -> Var) -> f64 {
    let model = toy_model(seed);
    let images: Vec<Tensor<f64>> = (0..4).map(|i| random(&[3, 8, 8], seed * 100 + i)).collect();
    let patches = patchify(&images, 4).unwrap();
    let cfg = LoraConfig {
        rank: 2,
        scale: 1.5,
        layers: vec![1, 2],
        ..LoraConfig::default()
    };
    let enc = AdaptedEncoder::attach(&model, &cfg, &mut stream(seed, "attach")).unwrap();
    let mut set = enc.adapters;
    let mut rng = stream(seed, "b");
    for p in set.params_mut().iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    let mut store = set.params().clone();
    let slots: Vec<usize> = (0..store.len()).collect();
    check_store(&mut store, &slots, &|store, t| {
        let mut s = set.clone();
        *s.params_mut() = store.clone();
        let enc = AdaptedEncoder::with_adapters(&model, s);
        let bound = enc.bind(t, true).unwrap();
        let x = t.constant(patches.clone());
        let l = loss(t, &bound.vit, x);
        (l, bound.adapter_vars.iter().copied().enumerate().collect())
    })
}

#[test]
fn mem_loss_gradient_through_lora() {
    for seed in 1..=5 {
        let table = random(&[5, 6], 60 + seed);
        let err = adapter_check(seed, &|t, vit, x| {
            let out = vit.forward(t, x, 4, None, false).unwrap();
            let e = t.l2_normalize(out.cls);
            let f = t.constant(table.clone());
            let f = t.l2_normalize(f);
            let logits = t.matmul_nt(e, f).unwrap();
            let logits = t.scale(logits, 10.0);
            let p = t.softmax(logits);
            let sel = t.gather_rows(p, &[2, 0]).unwrap();
            mem_loss(t, sel).unwrap()
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn mae_loss_gradients_through_lora() {
    for seed in 1..=5 {
        for visual in [false, true] {
            let err = adapter_check(seed, &|t, vit, x| {
                let full = vit.forward(t, x, 4, None, visual).unwrap();
                let keep: Vec<Vec<usize>> = vec![vec![0, 3]; 4];
                let masked = vit.forward(t, x, 4, Some(&keep), visual).unwrap();
                if visual {
                    let rows: Vec<usize> = (0..4).flat_map(|b| [b * 4, b * 4 + 3]).collect();
                    let target = t.gather_rows(full.tokens.unwrap(), &rows).unwrap();
                    mae_loss(t, target, masked.tokens.unwrap(), false).unwrap()
                } else {
                    mae_loss(t, full.cls, masked.cls, false).unwrap()
                }
            });
            assert!(err < 1e-4, "seed {seed} visual {visual}: {err}");
        }
    }
}
