//! Rectified-flow training of the adapters and Euler sampling.
//!
//! Convention: `x_t = t * x0 + (1 - t) * x1` with data `x0` and noise `x1`,
//! so sampling integrates from `t = 0` (noise) to `t = 1` (data).

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compositor::{LayerStack, RasterImage};
use crate::error::{Error, Result};
use crate::latentcodec::{layer_images, Codec, LatentGrid};
use crate::layernet::{patchify, unpack_layers, ForwardMode, Model, ModelConfig, TokenLayout, ADAPTER, BASE, PROMPT};
use crate::nn::{Adam, AdamConfig, Graph, Tensor};
use crate::objective::{csv_row, equal_bounds, split_layers, total_loss_with_grad, Ablation, LossBreakdown, LossWeights, CSV_HEADER};
use crate::synthgen::{generate_sample, SampleSpec};

pub const FIXED_PROMPT: &str =
    "Anime illustration, layered rendering, lineart layer, flat color layer, light layer, shadow layer";

/// Seeds of the synthetic samples used to pretrain a backbone start here.
pub const BACKBONE_SEED_BASE: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x0: Vec<f32>,
    pub x1: Vec<f32>,
    pub t: f32,
    pub x_t: Vec<f32>,
    pub v_t: Vec<f32>,
}

/// Builds the interpolant for given endpoints and time.
pub fn flow_at(x0: &[f32], x1: &[f32], t: f32) -> Result<FlowSample> {
    if x0.len() != x1.len() {
        return Err(Error::shape("flow endpoints differ in length"));
    }
    Ok(FlowSample {
        x_t: x0.iter().zip(x1).map(|(a, b)| t * a + (1.0 - t) * b).collect(),
        v_t: x0.iter().zip(x1).map(|(a, b)| a - b).collect(),
        x0: x0.to_vec(),
        x1: x1.to_vec(),
        t,
    })
}

/// Draws `x1 ~ N(0, I)` and `t ~ U(0, 1)`.
pub fn sample_flow_with<R: Rng + ?Sized>(x0: &[f32], rng: &mut R) -> Result<FlowSample> {
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite clean latent".into()));
    }
    let x1: Vec<f32> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let t: f32 = rng.random();
    flow_at(x0, &x1, t)
}

pub fn sample_flow(x0: &[f32], seed: u64) -> Result<FlowSample> {
    sample_flow_with(x0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub euler_steps: usize,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    /// Backbone pretraining, used when no backbone checkpoint is supplied.
    pub backbone_steps: usize,
    pub backbone_lr: f32,
    pub backbone_samples: usize,
    pub prompt: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 4,
            lr: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
            ablation: Ablation::Full,
            euler_steps: 20,
            checkpoint_every: 0,
            model: ModelConfig::default(),
            backbone_steps: 300,
            backbone_lr: 1e-3,
            backbone_samples: 45,
            prompt: FIXED_PROMPT.to_string(),
        }
    }
}

impl TrainConfig {
    /// CPU-sized settings: 2x2 latent patches, a longer backbone warm-up and a
    /// larger adapter learning rate.
    pub fn desk() -> Self {
        Self {
            lr: 1e-2,
            backbone_steps: 2000,
            model: ModelConfig {
                patch: 2,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    /// Applies the ablation to the model flags.
    pub fn resolved(mut self) -> Result<Self> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.euler_steps == 0 {
            return Err(Error::Config("euler_steps must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        self.weights.validate()?;
        self.model.use_lse = self.ablation.uses_lse();
        self.model.validate()?;
        Ok(self)
    }
}

#[derive(Clone, Debug)]
pub struct EncodedSample {
    /// Clean layer tokens `[4n, D]` in model space.
    pub x0: Vec<f32>,
    /// Condition tokens `[n, D]`.
    pub cond: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct EncodedSet {
    pub layout: TokenLayout,
    pub features: usize,
    pub samples: Vec<EncodedSample>,
}

fn encode_tokens(codec: &Codec, images: &[&RasterImage], patch: usize) -> Result<Vec<Vec<f32>>> {
    codec
        .encode_batch(images)?
        .iter()
        .map(|z| patchify(&codec.to_model_space(z), patch))
        .collect()
}

/// Encodes sources and layers once; the codec is frozen for the whole run.
pub fn encode_samples(codec: &Codec, pairs: &[(&RasterImage, &LayerStack)], model: &ModelConfig) -> Result<EncodedSet> {
    let first = pairs.first().ok_or_else(|| Error::Config("no samples to encode".into()))?;
    if codec.latent_channels() != model.latent_channels {
        return Err(Error::Config(format!(
            "codec has {} latent channels, model expects {}",
            codec.latent_channels(),
            model.latent_channels
        )));
    }
    let (h, w) = first.0.dims();
    let f = crate::latentcodec::FACTOR;
    let layout = TokenLayout::new(h / f, w / f, model.patch, model.prompt_tokens)?;
    let mut samples = Vec::with_capacity(pairs.len());
    for (src, stack) in pairs {
        let layers = layer_images(stack);
        let mut imgs: Vec<&RasterImage> = layers.iter().collect();
        imgs.push(src);
        let toks = encode_tokens(codec, &imgs, model.patch)?;
        let mut x0 = Vec::with_capacity(4 * toks[0].len());
        for t in &toks[..4] {
            x0.extend_from_slice(t);
        }
        samples.push(EncodedSample {
            x0,
            cond: toks[4].clone(),
        });
    }
    Ok(EncodedSet {
        layout,
        features: model.token_features(),
        samples,
    })
}

/// Which arrays receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Backbone plus prompt, plain flow objective, no adapters.
    Pretrain,
    /// Adapters, layer embedding and prompt only.
    Adapt,
}

impl Phase {
    pub fn trains(self, name: &str) -> bool {
        match self {
            Phase::Pretrain => name.starts_with(BASE) || name == PROMPT,
            Phase::Adapt => name.starts_with(ADAPTER),
        }
    }
}

/// Trainer state that persists across steps.
pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub phase: Phase,
    pub weights: LossWeights,
    pub ablation: Ablation,
    /// Permute the four layer segments of every draw, hiding slot identity.
    pub shuffle_slots: bool,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: Model, phase: Phase, lr: f32, weights: LossWeights, ablation: Ablation, seed: u64) -> Self {
        Self {
            model,
            opt: Adam::new(AdamConfig {
                lr,
                ..AdamConfig::default()
            }),
            phase,
            weights,
            ablation,
            shuffle_slots: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
        }
    }

    fn mode(&self) -> ForwardMode {
        match self.phase {
            Phase::Pretrain => ForwardMode::BASE,
            Phase::Adapt => self.model.adapted_mode(),
        }
    }

    fn next_batch(&mut self, n: usize, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One optimizer update on a batch drawn from `data`.
    pub fn step(&mut self, data: &EncodedSet, batch: usize) -> Result<LossBreakdown> {
        let idx = self.next_batch(data.samples.len(), batch);
        let layout = &data.layout;
        let d = data.features;
        let (noisy, img) = (layout.noisy_len() * d, layout.image_len() * d);
        let mut x_img = Vec::with_capacity(batch * img);
        let mut targets = Vec::with_capacity(batch * noisy);
        let mut ts = Vec::with_capacity(batch);
        for &i in &idx {
            let s = &data.samples[i];
            let flow = if self.shuffle_slots {
                let seg = s.x0.len() / 4;
                let mut slots = [0, 1, 2, 3];
                slots.shuffle(&mut self.rng);
                let x0: Vec<f32> = slots.iter().flat_map(|k| &s.x0[k * seg..(k + 1) * seg]).copied().collect();
                sample_flow_with(&x0, &mut self.rng)?
            } else {
                sample_flow_with(&s.x0, &mut self.rng)?
            };
            x_img.extend_from_slice(&flow.x_t);
            x_img.extend_from_slice(&s.cond);
            targets.extend_from_slice(&flow.v_t);
            ts.push(flow.t);
        }
        let mut g = Graph::new();
        let phase = self.phase;
        let p = self.model.bind(&mut g, |n| phase.trains(n));
        let xv = g.constant(Tensor::from_vec(&[batch, layout.image_len(), d], x_img)?);
        let out = self.model.forward_graph(&mut g, &p, xv, &ts, layout, self.mode())?;

        let (breakdown, grad) = batch_loss(g.value(out).data(), &targets, batch, &self.weights, self.objective())?;
        if !breakdown.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: {breakdown:?}",
                self.opt.steps_taken() + 1
            )));
        }
        let loss = g.external_loss(out, breakdown.total as f32, Tensor::from_vec(&[batch, layout.noisy_len(), d], grad)?)?;
        let grads = g.backward(loss)?;
        self.opt.begin_step();
        for (name, var) in &p {
            if !phase.trains(name) {
                continue;
            }
            if let Some(gr) = grads.get(*var) {
                let param = self.model.params.get_mut(name)?;
                self.opt.update(name, param, gr);
            }
        }
        Ok(breakdown)
    }

    fn objective(&self) -> Ablation {
        match self.phase {
            Phase::Pretrain => Ablation::NoLwloss,
            Phase::Adapt => self.ablation,
        }
    }
}

/// Layer-wise loss over a batch: segment `i` gathers layer `i` of every batch element.
fn batch_loss(
    pred: &[f32],
    target: &[f32],
    batch: usize,
    weights: &LossWeights,
    ablation: Ablation,
) -> Result<(LossBreakdown, Vec<f32>)> {
    let per = pred.len() / batch;
    let bounds = equal_bounds(per)?;
    let seg = per / 4;
    let gather = |v: &[f32]| -> Result<[Vec<f64>; 4]> {
        let mut out: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(batch * seg));
        for b in 0..batch {
            let parts = split_layers(&v[b * per..(b + 1) * per], &bounds)?;
            for i in 0..4 {
                out[i].extend(parts[i].iter().map(|x| *x as f64));
            }
        }
        Ok(out)
    };
    let (p, t) = (gather(pred)?, gather(target)?);
    let pr = [&p[0][..], &p[1][..], &p[2][..], &p[3][..]];
    let tr = [&t[0][..], &t[1][..], &t[2][..], &t[3][..]];
    let (breakdown, g) = total_loss_with_grad(&pr, &tr, weights, ablation)?;
    let mut grad = vec![0.0f32; pred.len()];
    for b in 0..batch {
        for i in 0..4 {
            let dst = &mut grad[b * per + i * seg..b * per + (i + 1) * seg];
            for (o, v) in dst.iter_mut().zip(&g[i][b * seg..(b + 1) * seg]) {
                *o = *v as f32;
            }
        }
    }
    Ok((breakdown, grad))
}

/// Synthetic samples disjoint from any dataset seeds, for backbone pretraining.
pub fn backbone_corpus(n: usize, spec: &SampleSpec, seed: u64) -> Result<Vec<(RasterImage, LayerStack)>> {
    (0..n as u64)
        .map(|i| {
            let s = generate_sample(&SampleSpec {
                seed: BACKBONE_SEED_BASE + seed * 10_000 + i,
                ..spec.clone()
            })?;
            Ok((s.source, s.stack))
        })
        .collect()
}

/// Trains a backbone (and prompt block) with the plain flow objective.
pub fn pretrain_backbone(codec: &Codec, cfg: &TrainConfig, spec: &SampleSpec) -> Result<(Model, Vec<LossBreakdown>)> {
    let cfg = cfg.clone().resolved()?;
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    let corpus = backbone_corpus(cfg.backbone_samples.max(1), spec, cfg.seed)?;
    let pairs: Vec<(&RasterImage, &LayerStack)> = corpus.iter().map(|(a, b)| (a, b)).collect();
    let data = encode_samples(codec, &pairs, &cfg.model)?;
    let mut tr = Trainer::new(model, Phase::Pretrain, cfg.backbone_lr, cfg.weights, Ablation::NoLwloss, cfg.seed ^ 0x5eed);
    tr.shuffle_slots = true;
    let mut hist = Vec::with_capacity(cfg.backbone_steps);
    for _ in 0..cfg.backbone_steps {
        hist.push(tr.step(&data, cfg.batch)?);
    }
    let mut model = tr.model;
    model.config.use_lse = cfg.model.use_lse;
    Ok((model, hist))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<LossBreakdown>,
}

/// Adapter fine-tuning on encoded data. The backbone arrays are never written.
pub fn train_encoded(data: &EncodedSet, backbone: &Model, cfg: &TrainConfig, mut on_step: impl FnMut(usize, &Model, &LossBreakdown) -> Result<()>) -> Result<TrainOutcome> {
    let cfg = cfg.clone().resolved()?;
    if backbone.config.token_features() != data.features {
        return Err(Error::Config("backbone token size does not match the encoded data".into()));
    }
    let mut model = backbone.clone();
    model.config.use_lse = cfg.model.use_lse;
    let mut tr = Trainer::new(model, Phase::Adapt, cfg.lr, cfg.weights, cfg.ablation, cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let b = tr.step(data, cfg.batch)?;
        on_step(step, &tr.model, &b)?;
        history.push(b);
    }
    Ok(TrainOutcome {
        model: tr.model,
        history,
    })
}

/// Writes `config.json`, `metrics.csv` and `checkpoints/step_{n}` while training.
pub fn train_to_dir(data: &EncodedSet, backbone: &Model, cfg: &TrainConfig, run_dir: &Path) -> Result<TrainOutcome> {
    let cfg = cfg.clone().resolved()?;
    std::fs::create_dir_all(run_dir.join("checkpoints")).map_err(|e| Error::io(run_dir, e))?;
    let cfg_path = run_dir.join("config.json");
    let text = serde_json::to_string_pretty(&cfg).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&cfg_path, text + "\n").map_err(|e| Error::io(&cfg_path, e))?;

    let csv_path = run_dir.join("metrics.csv");
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| Error::load(&csv_path, e))?;
    csv.write_record(CSV_HEADER).map_err(|e| Error::load(&csv_path, e))?;
    let ck = |step: usize, m: &Model| m.save(&run_dir.join("checkpoints").join(format!("step_{step}")));
    if cfg.steps == 0 {
        ck(0, backbone)?;
    }
    let every = cfg.checkpoint_every;
    let out = train_encoded(data, backbone, &cfg, |step, m, b| {
        csv.write_record(csv_row(step, b, &cfg.weights))
            .map_err(|e| Error::load(&csv_path, e))?;
        if step == cfg.steps || (every > 0 && step % every == 0) {
            ck(step, m)?;
        }
        Ok(())
    })?;
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(out)
}

/// Arrays whose values differ between two models.
pub fn changed_arrays(before: &Model, after: &Model) -> BTreeSet<String> {
    before
        .params
        .iter()
        .filter(|(k, v)| after.params.get(k).map_or(true, |w| w != *v))
        .map(|(k, _)| k.clone())
        .collect()
}

/// Explicit Euler from `t = 0` to `t = 1`.
pub fn euler_integrate(
    mut x: Vec<f32>,
    steps: usize,
    mut velocity: impl FnMut(&[f32], f32) -> Result<Vec<f32>>,
) -> Result<Vec<f32>> {
    if steps == 0 {
        return Err(Error::Config("at least one Euler step is required".into()));
    }
    let dt = 1.0 / steps as f32;
    for k in 0..steps {
        let v = velocity(&x, k as f32 * dt)?;
        if v.len() != x.len() {
            return Err(Error::shape("velocity length differs from state"));
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

/// Samples four layers for `image`, starting from seeded Gaussian noise.
pub fn decompose(image: &RasterImage, model: &Model, codec: &Codec, steps: usize, seed: u64) -> Result<LayerStack> {
    decompose_with_mode(image, model, codec, steps, seed, model.adapted_mode())
}

pub fn decompose_with_mode(
    image: &RasterImage,
    model: &Model,
    codec: &Codec,
    steps: usize,
    seed: u64,
    mode: ForwardMode,
) -> Result<LayerStack> {
    if codec.latent_channels() != model.config.latent_channels || codec.channels() != 4 {
        return Err(Error::Config("codec does not match the model (latent channels or RGBA)".into()));
    }
    let (h, w) = image.dims();
    let f = crate::latentcodec::FACTOR;
    if h % (f * model.config.patch) != 0 || w % (f * model.config.patch) != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} must be a multiple of {}; resize it first",
            f * model.config.patch
        )));
    }
    let cond = encode_tokens(codec, &[image], model.config.patch)?.remove(0);
    let layout = TokenLayout::new(h / f, w / f, model.config.patch, model.config.prompt_tokens)?;
    let d = model.config.token_features();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x1: Vec<f32> = (0..layout.noisy_len() * d).map(|_| rng.sample(StandardNormal)).collect();
    let x = euler_integrate(x1, steps, |x, t| {
        let mut tokens = x.to_vec();
        tokens.extend_from_slice(&cond);
        let xt = Tensor::from_vec(&[1, layout.image_len(), d], tokens)?;
        Ok(model.forward_tokens(&xt, &[t], &layout, mode)?.into_data())
    })?;
    latents_to_stack(&x, &layout, model.config.latent_channels, codec)
}

/// Decodes model-space noisy tokens into a stack with default modes and order.
pub fn latents_to_stack(tokens: &[f32], layout: &TokenLayout, c: usize, codec: &Codec) -> Result<LayerStack> {
    let grids = unpack_layers(tokens, layout, c)?.remove(0);
    let raw: Vec<LatentGrid> = grids.iter().map(|z| codec.from_model_space(z)).collect();
    let refs: Vec<&LatentGrid> = raw.iter().collect();
    let [l, fl, hi, sh]: [RasterImage; 4] = codec
        .decode_batch(&refs)?
        .try_into()
        .map_err(|_| Error::shape("expected four decoded layers"))?;
    LayerStack::new(l, fl, hi, sh)
}

/// Mean of the first `head` values and of the last `tail` values.
pub fn loss_drop(history: &[LossBreakdown], head: usize, tail: usize) -> Option<(f64, f64)> {
    if history.len() < head.max(tail) || head == 0 || tail == 0 {
        return None;
    }
    let mean = |s: &[LossBreakdown]| s.iter().map(|b| b.total).sum::<f64>() / s.len() as f64;
    Some((mean(&history[..head]), mean(&history[history.len() - tail..])))
}
