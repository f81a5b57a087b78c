//! Small convolutional autoencoder between RGBA images and latent grids.
//!
//! Array names in checkpoints (all `f32`):
//!
//! | name            | shape                  |
//! |-----------------|------------------------|
//! | `enc.0.weight`  | `[hidden0, ch, 3, 3]`  |
//! | `enc.1.weight`  | `[hidden0, hidden0, 3, 3]` (stride 2) |
//! | `enc.2.weight`  | `[hidden1, hidden0, 3, 3]` (stride 2) |
//! | `enc.3.weight`  | `[latent, hidden1, 3, 3]` |
//! | `dec.0.weight`  | `[hidden1, latent, 3, 3]` |
//! | `dec.1.weight`  | `[hidden0, hidden1, 3, 3]` (after 2x upsample) |
//! | `dec.2.weight`  | `[hidden0, hidden0, 3, 3]` (after 2x upsample) |
//! | `dec.3.weight`  | `[ch, hidden0, 3, 3]`  |
//!
//! Each weight has a matching `.bias` of length `out`. `ch` is 3 or 4.
//! Per-channel latent statistics used to normalize diffusion targets live in
//! the checkpoint header.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::compositor::{LayerRole, RasterImage};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, ParamSet, Tensor, Var};

pub const FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub channels: usize,
    pub latent_channels: usize,
    pub hidden: [usize; 2],
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            latent_channels: 8,
            hidden: [24, 48],
        }
    }
}

/// `h x w x c` latent, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl LatentGrid {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::shape(format!(
                "latent {h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &LatentGrid) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    fn from_chw(c: usize, h: usize, w: usize, chw: &[f32]) -> Self {
        let mut data = vec![0.0; h * w * c];
        for ci in 0..c {
            for p in 0..h * w {
                data[p * c + ci] = chw[ci * h * w + p];
            }
        }
        Self { h, w, c, data }
    }

    fn write_chw(&self, out: &mut [f32]) {
        let hw = self.h * self.w;
        for p in 0..hw {
            for ci in 0..self.c {
                out[ci * hw + p] = self.data[p * self.c + ci];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamSet,
    /// Per-channel affine map raw latent -> model space: `(z - shift) / scale`.
    pub latent_shift: Vec<f32>,
    pub latent_scale: Vec<f32>,
}

const ENC: [(usize, usize); 4] = [(1, 0), (2, 0), (2, 1), (1, 2)];

fn conv_param(params: &mut ParamSet, name: &str, cout: usize, cin: usize, rng: &mut ChaCha8Rng) {
    let std = (2.0 / (cin * 9) as f32).sqrt();
    params.insert(format!("{name}.weight"), Tensor::randn(&[cout, cin, 3, 3], std, rng));
    params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

impl Codec {
    /// Fresh codec with He-initialized convolutions.
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        if !(config.channels == 3 || config.channels == 4) {
            return Err(Error::Config(format!("codec channels must be 3 or 4, got {}", config.channels)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h0, h1] = config.hidden;
        let (ch, lat) = (config.channels, config.latent_channels);
        let mut p = ParamSet::new();
        conv_param(&mut p, "enc.0", h0, ch, &mut rng);
        conv_param(&mut p, "enc.1", h0, h0, &mut rng);
        conv_param(&mut p, "enc.2", h1, h0, &mut rng);
        conv_param(&mut p, "enc.3", lat, h1, &mut rng);
        conv_param(&mut p, "dec.0", h1, lat, &mut rng);
        conv_param(&mut p, "dec.1", h0, h1, &mut rng);
        conv_param(&mut p, "dec.2", h0, h0, &mut rng);
        conv_param(&mut p, "dec.3", ch, h0, &mut rng);
        Ok(Self {
            latent_shift: vec![0.0; lat],
            latent_scale: vec![1.0; lat],
            config,
            params: p,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn image_tensor(&self, images: &[&RasterImage]) -> Result<Tensor> {
        let (h, w) = images
            .first()
            .map(|i| i.dims())
            .ok_or_else(|| Error::shape("empty image batch"))?;
        if h % FACTOR != 0 || w % FACTOR != 0 {
            return Err(Error::shape(format!(
                "image {h}x{w} not divisible by {FACTOR}; resize to a multiple of {FACTOR}"
            )));
        }
        let ch = self.channels();
        let mut data = vec![0.0; images.len() * ch * h * w];
        for (n, img) in images.iter().enumerate() {
            if img.dims() != (h, w) {
                return Err(Error::shape("image batch has mixed sizes"));
            }
            let base = n * ch * h * w;
            for (p, px) in img.pixels().chunks_exact(4).enumerate() {
                for c in 0..ch {
                    data[base + c * h * w + p] = px[c];
                }
            }
        }
        Tensor::from_vec(&[images.len(), ch, h, w], data)
    }

    /// Binds every array as a graph leaf.
    pub(crate) fn bind(&self, g: &mut Graph, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable)))
            .collect()
    }

    pub(crate) fn encoder_graph(&self, g: &mut Graph, p: &BTreeMap<String, Var>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (stride, _)) in ENC.iter().enumerate() {
            h = g.conv2d(h, p[&format!("enc.{i}.weight")], p[&format!("enc.{i}.bias")], *stride, 1)?;
            if i < 3 {
                h = g.silu(h);
            }
        }
        Ok(h)
    }

    /// Raw (unclamped) decoder output `[N, ch, H, W]`.
    pub(crate) fn decoder_graph(&self, g: &mut Graph, p: &BTreeMap<String, Var>, z: Var) -> Result<Var> {
        let mut h = z;
        for i in 0..4 {
            if i == 1 || i == 2 {
                h = g.upsample2x(h)?;
            }
            h = g.conv2d(h, p[&format!("dec.{i}.weight")], p[&format!("dec.{i}.bias")], 1, 1)?;
            if i < 3 {
                h = g.silu(h);
            }
        }
        Ok(h)
    }

    /// Encodes each image independently; batching never mixes images.
    pub fn encode_batch(&self, images: &[&RasterImage]) -> Result<Vec<LatentGrid>> {
        let x = self.image_tensor(images)?;
        let (h, w) = images[0].dims();
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x);
        let z = self.encoder_graph(&mut g, &p, xv)?;
        let zt = g.value(z);
        let (lh, lw, c) = (h / FACTOR, w / FACTOR, self.latent_channels());
        let per = c * lh * lw;
        let out: Vec<LatentGrid> = (0..images.len())
            .map(|n| LatentGrid::from_chw(c, lh, lw, &zt.data()[n * per..(n + 1) * per]))
            .collect();
        if let Some(bad) = out.iter().position(|l| !l.is_finite()) {
            return Err(Error::Numeric(format!("non-finite latent for image {bad}")));
        }
        Ok(out)
    }

    pub fn encode(&self, image: &RasterImage) -> Result<LatentGrid> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    pub fn decode_batch(&self, latents: &[&LatentGrid]) -> Result<Vec<RasterImage>> {
        let first = latents.first().ok_or_else(|| Error::shape("empty latent batch"))?;
        let (lh, lw, c) = first.shape();
        if c != self.latent_channels() {
            return Err(Error::shape(format!(
                "latent has {c} channels, codec expects {}",
                self.latent_channels()
            )));
        }
        let mut data = vec![0.0; latents.len() * c * lh * lw];
        for (n, l) in latents.iter().enumerate() {
            if l.shape() != (lh, lw, c) {
                return Err(Error::shape("latent batch has mixed shapes"));
            }
            l.write_chw(&mut data[n * c * lh * lw..(n + 1) * c * lh * lw]);
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(Tensor::from_vec(&[latents.len(), c, lh, lw], data)?);
        let y = self.decoder_graph(&mut g, &p, zv)?;
        let yt = g.value(y);
        let (h, w, ch) = (lh * FACTOR, lw * FACTOR, self.channels());
        Ok((0..latents.len())
            .map(|n| {
                let base = n * ch * h * w;
                RasterImage::from_fn(h, w, |yy, xx| {
                    let at = |c: usize| yt.data()[base + c * h * w + yy * w + xx];
                    let alpha = if ch == 4 { at(3) } else { 1.0 };
                    [at(0), at(1), at(2), alpha]
                })
            })
            .collect())
    }

    /// Decoded image, clamped to `[0, 1]`.
    pub fn decode(&self, latent: &LatentGrid) -> Result<RasterImage> {
        Ok(self.decode_batch(&[latent])?.remove(0))
    }

    pub fn to_model_space(&self, z: &LatentGrid) -> LatentGrid {
        let mut out = z.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            let c = i % z.c;
            *v = (*v - self.latent_shift[c]) / self.latent_scale[c];
        }
        out
    }

    pub fn from_model_space(&self, z: &LatentGrid) -> LatentGrid {
        let mut out = z.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            let c = i % z.c;
            *v = *v * self.latent_scale[c] + self.latent_shift[c];
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.params.clone(),
            json!({
                "kind": "codec",
                "config": self.config,
                "factor": FACTOR,
                "latent_shift": self.latent_shift,
                "latent_scale": self.latent_scale,
            }),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("codec") {
            return Err(Error::Config("checkpoint is not a codec".into()));
        }
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("codec checkpoint lacks `{k}`")))
        };
        let parse = |e: serde_json::Error| Error::Config(format!("codec checkpoint: {e}"));
        let config: CodecConfig = serde_json::from_value(field("config")?).map_err(parse)?;
        let codec = Self {
            latent_shift: serde_json::from_value(field("latent_shift")?).map_err(parse)?,
            latent_scale: serde_json::from_value(field("latent_scale")?).map_err(parse)?,
            params: ck.params.clone(),
            config,
        };
        let reference = Codec::init(codec.config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            if codec.params.get(name)?.shape() != t.shape() {
                return Err(Error::Config(format!("codec array `{name}` has the wrong shape")));
            }
        }
        Ok(codec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?).map_err(|e| Error::load(path, e))
    }
}

/// Lifts a 3-channel codec to RGBA: the encoder ignores alpha and the decoder
/// emits alpha exactly 1, so RGB behaviour is unchanged.
pub fn extend_channels(codec3: &Codec) -> Result<Codec> {
    if codec3.channels() != 3 {
        return Err(Error::Precondition(format!(
            "extend_channels needs a 3-channel codec, got {}",
            codec3.channels()
        )));
    }
    let mut out = codec3.clone();
    out.config.channels = 4;

    let w = codec3.params.get("enc.0.weight")?;
    let (cout, k) = (w.dim(0), w.dim(2));
    let mut we = vec![0.0; cout * 4 * k * k];
    for o in 0..cout {
        let src = &w.data()[o * 3 * k * k..(o + 1) * 3 * k * k];
        we[o * 4 * k * k..o * 4 * k * k + 3 * k * k].copy_from_slice(src);
    }
    out.params.insert("enc.0.weight", Tensor::from_vec(&[cout, 4, k, k], we)?);

    let wd = codec3.params.get("dec.3.weight")?;
    let per = wd.numel() / 3;
    let mut wd4 = wd.data().to_vec();
    wd4.extend(std::iter::repeat_n(0.0, per));
    let mut shape = wd.shape().to_vec();
    shape[0] = 4;
    out.params.insert("dec.3.weight", Tensor::from_vec(&shape, wd4)?);

    let bd = codec3.params.get("dec.3.bias")?;
    let mut bd4 = bd.data().to_vec();
    bd4.push(1.0);
    out.params.insert("dec.3.bias", Tensor::from_vec(&[4], bd4)?);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub codec: CodecConfig,
    /// Steps on RGB sources before the channel extension.
    pub rgb_steps: usize,
    /// Steps on RGBA sources and layers after the extension.
    pub rgba_steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            codec: CodecConfig {
                channels: 3,
                ..CodecConfig::default()
            },
            rgb_steps: 150,
            rgba_steps: 450,
            batch: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CodecTrainReport {
    /// Reconstruction MSE per step, RGB phase first.
    pub losses: Vec<f32>,
    pub rgb_steps: usize,
}

fn fit_steps(
    codec: &mut Codec,
    images: &[&RasterImage],
    steps: usize,
    cfg: &CodecTrainConfig,
    rng: &mut ChaCha8Rng,
    losses: &mut Vec<f32>,
) -> Result<()> {
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    for step in 0..steps {
        // Cosine decay to a tenth of the base rate.
        let progress = step as f32 / steps.max(1) as f32;
        opt.config.lr = cfg.lr * (0.1 + 0.45 * (1.0 + (std::f32::consts::PI * progress).cos()));
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.min(images.len()) {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            batch.push(images[order[cursor]]);
            cursor += 1;
        }
        let x = codec.image_tensor(&batch)?;
        let mut g = Graph::new();
        let p = codec.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let z = codec.encoder_graph(&mut g, &p, xv)?;
        let y = codec.decoder_graph(&mut g, &p, z)?;
        let loss = g.mse_loss(y, x)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("codec loss diverged at step {step}: {value}")));
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        opt.begin_step();
        for (name, var) in &p {
            if let Some(gr) = grads.get(*var) {
                opt.update(name, codec.params.get_mut(name)?, gr);
            }
        }
    }
    Ok(())
}

/// Sets the latent normalization so model-space latents have zero mean, unit std per channel.
pub fn fit_latent_stats(codec: &mut Codec, images: &[&RasterImage]) -> Result<()> {
    let c = codec.latent_channels();
    let (mut sum, mut sq, mut n) = (vec![0f64; c], vec![0f64; c], 0usize);
    for chunk in images.chunks(16) {
        for z in codec.encode_batch(chunk)? {
            for px in z.data.chunks_exact(c) {
                for (i, v) in px.iter().enumerate() {
                    sum[i] += *v as f64;
                    sq[i] += (*v as f64).powi(2);
                }
            }
            n += z.h * z.w;
        }
    }
    for i in 0..c {
        let mean = sum[i] / n.max(1) as f64;
        let var = (sq[i] / n.max(1) as f64 - mean * mean).max(1e-8);
        codec.latent_shift[i] = mean as f32;
        codec.latent_scale[i] = var.sqrt() as f32;
    }
    Ok(())
}

/// RGB phase on sources, channel extension, RGBA phase on sources plus all
/// four layers, then latent statistics.
pub fn train_codec(
    sources: &[RasterImage],
    layers: &[[RasterImage; 4]],
    cfg: &CodecTrainConfig,
) -> Result<(Codec, CodecTrainReport)> {
    if sources.is_empty() {
        return Err(Error::Config("codec training needs at least one image".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut codec = Codec::init(
        CodecConfig {
            channels: 3,
            ..cfg.codec.clone()
        },
        cfg.seed,
    )?;
    let mut losses = Vec::new();
    let src: Vec<&RasterImage> = sources.iter().collect();
    fit_steps(&mut codec, &src, cfg.rgb_steps, cfg, &mut rng, &mut losses)?;
    let mut codec = extend_channels(&codec)?;
    let mut all: Vec<&RasterImage> = src.clone();
    for ls in layers {
        all.extend(ls.iter());
    }
    fit_steps(&mut codec, &all, cfg.rgba_steps, cfg, &mut rng, &mut losses)?;
    fit_latent_stats(&mut codec, &all)?;
    Ok((
        codec,
        CodecTrainReport {
            losses,
            rgb_steps: cfg.rgb_steps,
        },
    ))
}

/// Mean absolute change of `encode(decode(encode(x)))` relative to `encode(x)`.
pub fn idempotence_gap(codec: &Codec, images: &[&RasterImage]) -> Result<f32> {
    let z = codec.encode_batch(images)?;
    let refs: Vec<&LatentGrid> = z.iter().collect();
    let rec = codec.decode_batch(&refs)?;
    let rec_refs: Vec<&RasterImage> = rec.iter().collect();
    let z2 = codec.encode_batch(&rec_refs)?;
    let (mut s, mut n) = (0f64, 0usize);
    for (a, b) in z.iter().zip(&z2) {
        for (x, y) in a.data.iter().zip(&b.data) {
            s += (x - y).abs() as f64;
        }
        n += a.data.len();
    }
    Ok((s / n.max(1) as f64) as f32)
}

/// Layers in role-index order, as stored in a stack.
pub fn layer_images(stack: &crate::compositor::LayerStack) -> [RasterImage; 4] {
    LayerRole::ALL.map(|r| stack.layer(r).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_sample, SampleSpec};

    fn small() -> CodecConfig {
        CodecConfig {
            channels: 3,
            latent_channels: 8,
            hidden: [8, 12],
        }
    }

    fn random_image(seed: u64, h: usize, w: usize, alpha: Option<f32>) -> RasterImage {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        RasterImage::from_fn(h, w, |_, _| {
            let a = alpha.unwrap_or_else(|| r.random());
            [r.random(), r.random(), r.random(), a]
        })
    }

    #[test]
    fn extension_preserves_rgb_path_and_forces_opaque_alpha() {
        let c3 = Codec::init(small(), 4).unwrap();
        let c4 = extend_channels(&c3).unwrap();
        assert_eq!(c4.params.get("dec.3.bias").unwrap().data()[3], 1.0);
        for seed in 0..5 {
            let img = random_image(seed, 16, 12, None);
            let z3 = c3.encode(&img).unwrap();
            let z4 = c4.encode(&img).unwrap();
            assert!(z3.max_abs_diff(&z4) <= 1e-6);
            let d3 = c3.decode(&z3).unwrap();
            let d4 = c4.decode(&z4).unwrap();
            for p in d4.pixels().chunks_exact(4) {
                assert!((p[3] - 1.0).abs() <= 1e-6);
            }
            let rgb = |i: &RasterImage| -> Vec<f32> {
                i.pixels().chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()
            };
            let diff = rgb(&d3).iter().zip(rgb(&d4)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(diff <= 1e-6);
        }
    }

    #[test]
    fn extending_twice_is_a_precondition_error() {
        let c4 = extend_channels(&Codec::init(small(), 0).unwrap()).unwrap();
        assert!(matches!(extend_channels(&c4), Err(Error::Precondition(_))));
    }

    #[test]
    fn batch_encoding_matches_single() {
        let c = extend_channels(&Codec::init(small(), 1).unwrap()).unwrap();
        let imgs: Vec<RasterImage> = (0..4).map(|s| random_image(s, 8, 8, None)).collect();
        let refs: Vec<&RasterImage> = imgs.iter().collect();
        let batch = c.encode_batch(&refs).unwrap();
        for (img, z) in imgs.iter().zip(&batch) {
            assert!(c.encode(img).unwrap().max_abs_diff(z) <= 1e-6);
        }
    }

    #[test]
    fn shapes_and_errors() {
        let c = Codec::init(small(), 0).unwrap();
        let z = c.encode(&RasterImage::transparent(12, 8)).unwrap();
        assert_eq!(z.shape(), (3, 2, 8));
        assert!(z.is_finite());
        assert!(c.encode(&RasterImage::transparent(10, 8)).is_err());
        assert_eq!(c.decode(&z).unwrap().dims(), (12, 8));
        assert!(c.decode(&LatentGrid::zeros(3, 2, 5)).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let s = generate_sample(&SampleSpec::with_seed(0).sized(16, 16)).unwrap();
        let cfg = CodecTrainConfig {
            codec: small(),
            rgb_steps: 2,
            rgba_steps: 2,
            batch: 2,
            lr: 0.0,
            seed: 3,
        };
        let (trained, _) = train_codec(std::slice::from_ref(&s.source), &[layer_images(&s.stack)], &cfg).unwrap();
        let fresh = extend_channels(&Codec::init(small(), 3).unwrap()).unwrap();
        assert_eq!(trained.params, fresh.params);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut c = extend_channels(&Codec::init(small(), 2).unwrap()).unwrap();
        c.latent_shift[0] = 0.5;
        let back = Codec::from_checkpoint(&Checkpoint::from_bytes(&c.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn model_space_is_invertible() {
        let mut c = Codec::init(small(), 2).unwrap();
        c.latent_shift = (0..8).map(|i| i as f32 * 0.1).collect();
        c.latent_scale = (0..8).map(|i| 1.0 + i as f32).collect();
        let z = c.encode(&random_image(0, 8, 8, Some(1.0))).unwrap();
        assert!(c.from_model_space(&c.to_model_space(&z)).max_abs_diff(&z) < 1e-5);
    }
}
