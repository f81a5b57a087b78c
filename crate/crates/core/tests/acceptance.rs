//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so the summary lines always
//! reach stdout. Pass criterion numbers to run a subset:
//! `cargo test --release --test acceptance -- 1 3 7`.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use celdecomp::cli;
use celdecomp::compositor::{
    normal_to_multiply_shadow, multiply_convertible, read_stack_dir, recompose, write_stack_dir, BlendMode, LayerRole,
    RasterImage, QUANT_STEP,
};
use celdecomp::evalkit::{layer_leakage, lmse, off_diagonal, psnr, ssim};
use celdecomp::flowtrain::{
    changed_arrays, decompose_with_mode, encode_samples, flow_at, loss_drop, pretrain_backbone,
    sample_flow_with, train_encoded, TrainConfig, TrainOutcome,
};
use celdecomp::latentcodec::{extend_channels, layer_images, train_codec, Codec, CodecConfig, CodecTrainConfig};
use celdecomp::layernet::{ForwardMode, Model, TokenLayout, ADAPTER, BASE, LAYER_EMBEDDING, PROMPT};
use celdecomp::nn::Tensor;
use celdecomp::objective::{
    composition_loss, lineart_loss, mse_layer_loss, sparsity_loss, total_loss, total_loss_with_grad, Ablation,
    LossWeights,
};
use celdecomp::synthgen::{generate_sample, LayeredSample, SampleSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances.
const CODEC_TOL: f32 = 1e-6;
const IDENTITY_TOL: f32 = 1e-6;
const LOSS_TOL: f64 = 1e-6;
const FD_REL_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;
const PSNR_TOL: f64 = 1e-6;
const SSIM_TOL: f64 = 1e-4;
const LMSE_TOL: f64 = 1e-8;
const LOSS_DROP: f64 = 0.5;
const PSNR_GAIN_DB: f64 = 5.0;

// Desk-scale run.
const DESK_H: usize = 64;
const DESK_W: usize = 48;
const DESK_TRAIN: u64 = 45;
const HELD_OUT_SEED: u64 = 1000;
const HELD_OUT: u64 = 8;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

type Criterion = (u32, &'static str, fn() -> Verdict);

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rgb = Codec::init(
        CodecConfig {
            channels: 3,
            ..CodecConfig::default()
        },
        7,
    )
    .unwrap();
    let rgba = extend_channels(&rgb).unwrap();
    let wd = rgba.params.get("dec.3.weight").unwrap();
    let per = wd.numel() / 4;
    let alpha_slice_zero = wd.data()[3 * per..].iter().all(|v| *v == 0.0);
    let alpha_bias = rgba.params.get("dec.3.bias").unwrap().data()[3];
    let (mut enc_gap, mut alpha_gap, mut rgb_gap) = (0f32, 0f32, 0f32);
    for i in 0..100 {
        let (h, w) = [(32, 32), (16, 24), (40, 20)][i % 3];
        let img = common::random_image(&mut rng, h, w, true);
        let z3 = rgb.encode(&img).unwrap();
        let z4 = rgba.encode(&img).unwrap();
        enc_gap = enc_gap.max(z3.max_abs_diff(&z4));
        let d4 = rgba.decode(&z4).unwrap();
        let d3 = rgb.decode(&z3).unwrap();
        alpha_gap = alpha_gap.max(d4.pixels().chunks_exact(4).map(|p| (p[3] - 1.0).abs()).fold(0.0, f32::max));
        rgb_gap = rgb_gap.max(max_diff(d3.pixels(), d4.pixels()));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = enc_gap <= CODEC_TOL && alpha_gap <= CODEC_TOL && alpha_slice_zero && alpha_bias == 1.0 && secs < 60.0;
    verdict(
        ok,
        format!(
            "encode gap {enc_gap:.1e}, alpha gap {alpha_gap:.1e}, rgb decode gap {rgb_gap:.1e}, alpha weights zero {alpha_slice_zero}, b_D[3] = {alpha_bias}, {secs:.1}s"
        ),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..64);
        let x0: Vec<f32> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let s = sample_flow_with(&x0, &mut rng).unwrap();
        let at0 = flow_at(&x0, &s.x1, 0.0).unwrap();
        let at1 = flow_at(&x0, &s.x1, 1.0).unwrap();
        let v_exact = (0..n).all(|i| s.v_t[i] == x0[i] - s.x1[i]);
        let t_ok = (0.0..1.0).contains(&s.t);
        let interp_ok = (0..n).all(|i| s.x_t[i] == s.t * x0[i] + (1.0 - s.t) * s.x1[i]);
        if at0.x_t != s.x1 || at1.x_t != x0 || !v_exact || !t_ok || !interp_ok {
            bad += 1;
        }
    }
    verdict(bad == 0, format!("{bad} of 1000 draws violated x_0/x_1 endpoints or v = x0 - x1"))
}

/// Fills every all-zero backbone array with small noise so identities are not vacuous.
fn perturb_backbone(m: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = m.params.names().filter(|n| n.starts_with(BASE)).cloned().collect();
    for n in names {
        let t = m.params.get_mut(&n).unwrap();
        if t.data().iter().all(|v| *v == 0.0) {
            let shape = t.shape().to_vec();
            *t = Tensor::randn(&shape, 0.05, &mut rng);
        }
    }
}

fn desk_model_config() -> celdecomp::layernet::ModelConfig {
    TrainConfig::desk().resolved().unwrap().model
}

fn criterion_3() -> Verdict {
    let cfg = desk_model_config();
    let mut m = Model::init(cfg.clone(), 3).unwrap();
    perturb_backbone(&mut m, 33);
    let e = m.params.get_mut(LAYER_EMBEDDING).unwrap();
    *e = Tensor::zeros(e.shape());
    let b_zero = m
        .params
        .iter()
        .filter(|(n, _)| n.ends_with("lora_b"))
        .all(|(_, t)| t.data().iter().all(|v| *v == 0.0));
    let layout = TokenLayout::new(DESK_H / 4, DESK_W / 4, cfg.patch, cfg.prompt_tokens).unwrap();
    let d = cfg.token_features();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut gap = 0f32;
    let mut scale = 0f32;
    let inputs: Vec<(Tensor, f32)> = (0..20)
        .map(|_| (Tensor::randn(&[1, layout.image_len(), d], 1.0, &mut rng), rng.random()))
        .collect();
    for (x, t) in &inputs {
        let base = m.forward_tokens(x, &[*t], &layout, ForwardMode::BASE).unwrap();
        let adapted = m.forward_tokens(x, &[*t], &layout, m.adapted_mode()).unwrap();
        gap = gap.max(base.max_abs_diff(&adapted));
        scale = scale.max(base.data().iter().fold(0.0, |a, v| a.max(v.abs())));
    }
    // Non-vacuity: a nonzero B must change the output.
    let mut moved = m.clone();
    let bname = "adapter/blocks.0.v.lora_b".to_string();
    let b = moved.params.get_mut(&bname).unwrap();
    let shape = b.shape().to_vec();
    *b = Tensor::randn(&shape, 0.1, &mut rng);
    let (x, t) = &inputs[0];
    let shift = moved
        .forward_tokens(x, &[*t], &layout, moved.adapted_mode())
        .unwrap()
        .max_abs_diff(&m.forward_tokens(x, &[*t], &layout, ForwardMode::BASE).unwrap());
    verdict(
        gap <= IDENTITY_TOL && b_zero && shift > 1e-3,
        format!("max |adapted - frozen| {gap:.1e} (output scale {scale:.2}), B = 0: {b_zero}, nonzero B shifts output by {shift:.2e}"),
    )
}

fn random_segments(rng: &mut ChaCha8Rng, n: usize) -> [Vec<f64>; 4] {
    std::array::from_fn(|_| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
}

fn refs(v: &[Vec<f64>; 4]) -> [&[f64]; 4] {
    [&v[0][..], &v[1][..], &v[2][..], &v[3][..]]
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = LossWeights::default();
    let mut oracle_gap = 0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..200);
        let p = random_segments(&mut rng, n);
        let t = random_segments(&mut rng, n);
        let (pr, tr) = (refs(&p), refs(&t));
        let b = total_loss(&pr, &tr, &w, Ablation::Full).unwrap();
        let oracle = [
            common::l1_oracle(&p[0], &t[0]),
            common::mse_oracle(&p[1], &t[1]),
            common::mse_oracle(&p[2], &t[2]),
            common::mse_oracle(&p[3], &t[3]),
            common::sparse_oracle(&p[2], &p[3]),
            common::comp_oracle(&p, &t),
        ];
        let lib = [
            lineart_loss(pr[0], tr[0]).unwrap(),
            mse_layer_loss(pr[1], tr[1]).unwrap(),
            mse_layer_loss(pr[2], tr[2]).unwrap(),
            mse_layer_loss(pr[3], tr[3]).unwrap(),
            sparsity_loss(pr[2], pr[3]).unwrap(),
            composition_loss(&pr, &tr).unwrap(),
        ];
        let weighted: f64 = oracle.iter().zip(w.as_array()).map(|(o, wi)| o * wi).sum();
        for k in 0..6 {
            oracle_gap = oracle_gap.max((b.components()[k] - oracle[k]).abs()).max((lib[k] - oracle[k]).abs());
        }
        oracle_gap = oracle_gap.max((b.total - weighted).abs());
    }

    // Central differences on each component in isolation (one-hot weights).
    let mut worst = 0f64;
    let n = 24;
    for comp in 0..6 {
        let mut wa = [0.0; 6];
        wa[comp] = 1.0;
        let wc = LossWeights {
            lineart: wa[0],
            flat: wa[1],
            highlight: wa[2],
            shadow: wa[3],
            sparse: wa[4],
            comp: wa[5],
        };
        let p = random_segments(&mut rng, n);
        let mut t = random_segments(&mut rng, n);
        // Keep |p - t| and |p| away from the L1 kinks.
        for i in 0..4 {
            for e in 0..n {
                if (p[i][e] - t[i][e]).abs() < 1e-2 {
                    t[i][e] += 0.1;
                }
            }
        }
        let (_, grads) = total_loss_with_grad(&refs(&p), &refs(&t), &wc, Ablation::Full).unwrap();
        for _ in 0..10 {
            let (seg, e) = loop {
                let seg = rng.random_range(0..4);
                let e = rng.random_range(0..n);
                if p[seg][e].abs() > 1e-2 {
                    break (seg, e);
                }
            };
            let eval = |delta: f64| {
                let mut q = p.clone();
                q[seg][e] += delta;
                total_loss(&refs(&q), &refs(&t), &wc, Ablation::Full).unwrap().total
            };
            let fd = (eval(FD_EPS) - eval(-FD_EPS)) / (2.0 * FD_EPS);
            let an = grads[seg][e];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            if fd.abs().max(an.abs()) > 1e-10 {
                worst = worst.max(rel);
            }
        }
    }
    verdict(
        oracle_gap <= LOSS_TOL && worst <= FD_REL_TOL,
        format!("max |component - oracle| {oracle_gap:.1e}, worst gradient relative error {worst:.1e} over 60 points"),
    )
}

fn criterion_5() -> Verdict {
    let cfg = TrainConfig {
        steps: 50,
        ..TrainConfig::desk()
    };
    let codec = extend_channels(&Codec::init(CodecConfig { channels: 3, ..CodecConfig::default() }, 5).unwrap()).unwrap();
    let samples: Vec<_> = (0..6)
        .map(|s| generate_sample(&SampleSpec::with_seed(s).sized(32, 32)).unwrap())
        .collect();
    let pairs: Vec<_> = samples.iter().map(|s| (&s.source, &s.stack)).collect();
    let data = encode_samples(&codec, &pairs, &cfg.clone().resolved().unwrap().model).unwrap();
    let mut backbone = Model::init(cfg.clone().resolved().unwrap().model, 5).unwrap();
    perturb_backbone(&mut backbone, 55);
    let out = train_encoded(&data, &backbone, &cfg, |_, _, _| Ok(())).unwrap();
    let frozen_identical = backbone
        .params
        .iter()
        .filter(|(n, _)| n.starts_with(BASE))
        .all(|(n, t)| out.model.params.get(n).unwrap().data().iter().map(|v| v.to_bits()).eq(t.data().iter().map(|v| v.to_bits())));
    let changed = changed_arrays(&backbone, &out.model);
    let only_adapters = changed.iter().all(|n| n.starts_with(ADAPTER));
    let lora = changed.iter().filter(|n| n.contains("lora")).count();
    let e = changed.contains(LAYER_EMBEDDING);
    let prompt = changed.contains(PROMPT);
    verdict(
        frozen_identical && only_adapters && lora > 0 && e && prompt,
        format!(
            "frozen arrays bit-identical: {frozen_identical}; changed {} arrays, all adapter-side: {only_adapters} (LoRA {lora}, E {e}, prompt {prompt})",
            changed.len()
        ),
    )
}

fn criterion_6() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (mut recompose_gap, mut disk_gap, mut multiply_gap, mut multiply_q_gap) = (0f32, 0f32, 0f32, 0f32);
    let mut unguarded = 0usize;
    for seed in 0..100 {
        let s = generate_sample(&SampleSpec::with_seed(seed)).unwrap();
        let normal = recompose(&s.stack).unwrap();
        recompose_gap = recompose_gap.max(normal.max_abs_diff(&s.source));

        let sd = dir.path().join(format!("s{seed}"));
        write_stack_dir(&sd, &s.source, &s.stack).unwrap();
        let (src, stack) = read_stack_dir(&sd).unwrap();
        disk_gap = disk_gap.max(recompose(&stack).unwrap().max_abs_diff(&src));

        let base = s.stack.backdrop_of(LayerRole::Shadow).unwrap();
        let shadow = s.stack.layer(LayerRole::Shadow);
        let mult = normal_to_multiply_shadow(&base, shadow).unwrap();
        for (layer, gap) in [(mult.clone(), &mut multiply_gap), (mult.quantized(), &mut multiply_q_gap)] {
            let mut conv = s.stack.clone();
            conv.replace(LayerRole::Shadow, layer).unwrap();
            conv.set_mode(LayerRole::Shadow, BlendMode::Multiply);
            let back = recompose(&conv).unwrap();
            let (h, w) = normal.dims();
            for y in 0..h {
                for x in 0..w {
                    let (b, sh) = (base.pixel(y, x), shadow.pixel(y, x));
                    for c in 0..3 {
                        if multiply_convertible(b, sh, c) {
                            *gap = gap.max((back.pixel(y, x)[c] - normal.pixel(y, x)[c]).abs());
                            unguarded += 1;
                        }
                    }
                }
            }
        }
    }
    let ok = recompose_gap <= QUANT_STEP && disk_gap <= QUANT_STEP && multiply_gap <= QUANT_STEP && multiply_q_gap <= QUANT_STEP;
    verdict(
        ok,
        format!(
            "recompose gap {recompose_gap:.1e} (after PNG round trip {disk_gap:.1e}); multiply round trip {multiply_gap:.1e}, with 8-bit multiply layer {multiply_q_gap:.1e} over {unguarded} unguarded channel values; limit {QUANT_STEP:.2e}"
        ),
    )
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut dp, mut ds, mut dl) = (0f64, 0f64, 0f64);
    let mut invariant = true;
    for i in 0..20 {
        let a = common::random_image(&mut rng, 32, 32, i % 2 == 0);
        let b = common::random_image(&mut rng, 32, 32, i % 2 == 0);
        dp = dp.max((psnr(&a, &b).unwrap() - common::psnr_oracle(&a, &b)).abs());
        ds = ds.max((ssim(&a, &b).unwrap() - common::ssim_oracle(&a, &b)).abs());
        dl = dl.max((lmse(&a, &b).unwrap() - common::lmse_oracle(&a, &b)).abs());

        // Power-of-two rescaling keeps every product exact.
        let opaque = common::random_image(&mut rng, 32, 32, true);
        let other = common::random_image(&mut rng, 32, 32, true);
        let reference = lmse(&opaque, &other).unwrap();
        for s in [0.5f32, 0.25] {
            let scaled = RasterImage::from_fn(32, 32, |y, x| {
                let p = other.pixel(y, x);
                [p[0] * s, p[1] * s, p[2] * s, 1.0]
            });
            invariant &= lmse(&opaque, &scaled).unwrap() == reference;
            let self_scaled = RasterImage::from_fn(32, 32, |y, x| {
                let p = opaque.pixel(y, x);
                [p[0] * s, p[1] * s, p[2] * s, 1.0]
            });
            invariant &= lmse(&opaque, &self_scaled).unwrap() <= 1e-12;
        }
    }
    // Constant image against constant plus uniform noise.
    let flat = RasterImage::filled(32, 32, [0.5, 0.5, 0.5, 1.0]).unwrap();
    let noisy = RasterImage::from_fn(32, 32, |_, _| {
        let v = 0.5 + rng.random_range(-0.1f32..0.1);
        [v, v, v, 1.0]
    });
    ds = ds.max((ssim(&flat, &noisy).unwrap() - common::ssim_oracle(&flat, &noisy)).abs());
    verdict(
        dp <= PSNR_TOL && ds <= SSIM_TOL && dl <= LMSE_TOL && invariant,
        format!("psnr gap {dp:.1e} dB, ssim gap {ds:.1e}, lmse gap {dl:.1e}, lmse scale invariance exact: {invariant}"),
    )
}

struct Desk {
    held: Vec<LayeredSample>,
    codec: Codec,
    backbone: Model,
    runs: HashMap<(Ablation, u64), TrainOutcome>,
    secs: BTreeMap<&'static str, f64>,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let mut secs = BTreeMap::new();
        let spec = SampleSpec::default().sized(DESK_H, DESK_W);
        let gen = |seed: u64| generate_sample(&SampleSpec { seed, ..spec.clone() }).unwrap();
        let train: Vec<_> = (0..DESK_TRAIN).map(gen).collect();
        let held: Vec<_> = (HELD_OUT_SEED..HELD_OUT_SEED + HELD_OUT).map(gen).collect();

        let t = Instant::now();
        let sources: Vec<_> = train.iter().map(|s| s.source.clone()).collect();
        let layers: Vec<_> = train.iter().map(|s| layer_images(&s.stack)).collect();
        let ccfg = CodecTrainConfig {
            rgb_steps: 250,
            rgba_steps: 1000,
            ..CodecTrainConfig::default()
        };
        let (codec, _) = train_codec(&sources, &layers, &ccfg).unwrap();
        secs.insert("codec", t.elapsed().as_secs_f64());

        let t = Instant::now();
        let base_cfg = TrainConfig::desk();
        let (backbone, _) = pretrain_backbone(&codec, &base_cfg, &spec).unwrap();
        secs.insert("backbone", t.elapsed().as_secs_f64());

        let pairs: Vec<_> = train.iter().map(|s| (&s.source, &s.stack)).collect();
        let data = encode_samples(&codec, &pairs, &base_cfg.clone().resolved().unwrap().model).unwrap();
        let mut runs = HashMap::new();
        for seed in ABLATION_SEEDS {
            for ablation in Ablation::ALL {
                let t = Instant::now();
                let cfg = TrainConfig {
                    seed,
                    ablation,
                    ..TrainConfig::desk()
                };
                runs.insert((ablation, seed), train_encoded(&data, &backbone, &cfg, |_, _, _| Ok(())).unwrap());
                if seed == 0 && ablation == Ablation::Full {
                    secs.insert("full seed-0 fine-tune", t.elapsed().as_secs_f64());
                }
            }
        }
        Desk {
            held,
            codec,
            backbone,
            runs,
            secs,
        }
    })
}

/// Mean recomposition PSNR and mean off-diagonal leakage over the held-out set.
fn held_out_scores(d: &Desk, model: &Model, mode: ForwardMode) -> (f64, f64) {
    let steps = TrainConfig::desk().euler_steps;
    let (mut p, mut l) = (0.0, 0.0);
    for (k, s) in d.held.iter().enumerate() {
        let st = decompose_with_mode(&s.source, model, &d.codec, steps, k as u64, mode).unwrap();
        p += psnr(&recompose(&st).unwrap(), &s.source).unwrap();
        l += off_diagonal(&layer_leakage(&st, &s.stack).unwrap()).sum::<f64>() / 12.0;
    }
    let n = d.held.len() as f64;
    (p / n, l / n)
}

fn criterion_8() -> Verdict {
    let d = desk();
    let run = &d.runs[&(Ablation::Full, 0)];
    let (head, tail) = loss_drop(&run.history, 10, 50).unwrap();
    let drop = 1.0 - tail / head;
    let untrained = Model::init(desk_model_config(), 0).unwrap();
    let (p_untrained, _) = held_out_scores(d, &untrained, untrained.adapted_mode());
    let (p_trained, _) = held_out_scores(d, &run.model, run.model.adapted_mode());
    let (p_frozen, _) = held_out_scores(d, &d.backbone, d.backbone.adapted_mode());
    let a = drop >= LOSS_DROP;
    let b = p_trained - p_untrained >= PSNR_GAIN_DB;
    let total: f64 = d.secs.values().sum();
    verdict(
        a && b,
        format!(
            "(a) {}: smoothed loss {tail:.3} vs first-10 mean {head:.3} = {:.1}% drop (need {:.0}%); (b) {}: trained {p_trained:.2} dB vs untrained {p_untrained:.2} dB = {:+.2} dB (need +{PSNR_GAIN_DB}); pretrained backbone with zero adapters {p_frozen:.2} dB; timings {:?}, {total:.0}s",
            if a { "pass" } else { "FAIL" },
            100.0 * drop,
            100.0 * LOSS_DROP,
            if b { "pass" } else { "FAIL" },
            p_trained - p_untrained,
            d.secs.iter().map(|(k, v)| format!("{k} {v:.0}s")).collect::<Vec<_>>(),
        ),
    )
}

fn criterion_9() -> Verdict {
    let d = desk();
    let mut mean: HashMap<Ablation, (f64, f64)> = HashMap::new();
    for ablation in Ablation::ALL {
        let (mut p, mut l) = (0.0, 0.0);
        for seed in ABLATION_SEEDS {
            let m = &d.runs[&(ablation, seed)].model;
            let (ps, ls) = held_out_scores(d, m, m.adapted_mode());
            p += ps;
            l += ls;
        }
        let n = ABLATION_SEEDS.len() as f64;
        mean.insert(ablation, (p / n, l / n));
    }
    let (full, no_lse, no_lw) = (mean[&Ablation::Full], mean[&Ablation::NoLse], mean[&Ablation::NoLwloss]);
    let a = full.0 >= no_lw.0;
    let b = full.1 <= no_lse.1;
    verdict(
        a && b,
        format!(
            "PSNR full {:.3} vs no_lwloss {:.3} dB ({}); leakage full {:.5} vs no_lse {:.5} ({}); no_lse PSNR {:.3}, no_lwloss leakage {:.5}",
            full.0,
            no_lw.0,
            if a { "pass" } else { "FAIL" },
            full.1,
            no_lse.1,
            if b { "pass" } else { "FAIL" },
            no_lse.0,
            no_lw.1
        ),
    )
}

fn snapshot(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, celdecomp::checkpoint::file_hash(&p).unwrap());
            }
        }
    }
    out
}

fn cli_chain(root: &Path) -> Vec<i32> {
    let p = |s: &str| root.join(s).display().to_string();
    let cmds: Vec<Vec<String>> = vec![
        vec!["gen-data", "--n", "6", "--seed", "0", "--height", "32", "--width", "32", "--out", &p("data")],
        vec!["gen-data", "--n", "2", "--seed", "50", "--height", "32", "--width", "32", "--out", &p("held")],
        vec!["train-codec", "--data", &p("data"), "--out", &p("codec"), "--rgb-steps", "5", "--rgba-steps", "10"],
        vec![
            "train", "--data", &p("data"), "--codec", &p("codec/codec.ckpt"), "--out", &p("run"), "--steps", "4",
            "--backbone-steps", "4", "--checkpoint-every", "2",
        ],
        vec![
            "decompose", "--image", &p("held/sample_000050/source.png"), "--checkpoint", &p("run/checkpoints/step_4"),
            "--codec", &p("codec/codec.ckpt"), "--out", &p("dec"), "--steps", "4",
        ],
        vec!["recompose", "--stack", &p("dec"), "--out", &p("recomposed.png")],
        vec![
            "eval", "--data", &p("held"), "--checkpoint", &p("run/checkpoints/step_4"), "--codec", &p("codec/codec.ckpt"),
            "--out", &p("eval"), "--steps", "4",
        ],
        vec!["eval", "--data", &p("held"), "--ground-truth", "--out", &p("eval_gt")],
        vec![
            "ablate", "--data", &p("data"), "--eval-data", &p("held"), "--codec", &p("codec/codec.ckpt"), "--backbone",
            &p("run/backbone.ckpt"), "--out", &p("ablate"), "--steps", "3", "--euler-steps", "3",
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    cmds.iter()
        .map(|c| {
            let mut argv = vec!["celdecomp".to_string()];
            argv.extend(c.iter().cloned());
            cli::run(argv)
        })
        .collect()
}

fn criterion_10() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c1 = cli_chain(a.path());
    let first = snapshot(a.path());
    let c2 = cli_chain(a.path());
    let second = snapshot(a.path());
    let c3 = cli_chain(b.path());
    let other = snapshot(b.path());
    let codes_ok = [&c1, &c2, &c3].iter().all(|c| c.iter().all(|x| *x == 0));
    let rerun_identical = first == second;
    // A fresh directory differs only where absolute paths are recorded.
    let path_free = |k: &str| !k.ends_with("run_manifest.json") && !k.ends_with("summary.json") && !k.ends_with("config.json");
    let mismatched: Vec<_> = first
        .iter()
        .filter(|(k, v)| path_free(k) && other.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    let layers_match = {
        let (_, stack) = read_stack_dir(&a.path().join("dec")).unwrap();
        let png = celdecomp::compositor::read_png(&a.path().join("dec/recomposed.png")).unwrap();
        recompose(&stack).unwrap().quantized() == png
    };
    verdict(
        codes_ok && rerun_identical && mismatched.is_empty() && layers_match,
        format!(
            "{} artifacts; exit codes all 0: {codes_ok}; rerun hash-identical: {rerun_identical}; fresh-dir mismatches {mismatched:?}; recomposed.png matches layers: {layers_match}",
            first.len()
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let wanted: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 10] = [
        (1, "channel-extension invariance", criterion_1),
        (2, "rectified-flow identities", criterion_2),
        (3, "adaptation identity", criterion_3),
        (4, "loss correctness", criterion_4),
        (5, "freeze discipline", criterion_5),
        (6, "compositing round trip", criterion_6),
        (7, "metric oracles", criterion_7),
        (8, "desk-scale training", criterion_8),
        (9, "ablation direction", criterion_9),
        (10, "CLI determinism", criterion_10),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} [{tag}] {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), v.detail);
        if !v.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
