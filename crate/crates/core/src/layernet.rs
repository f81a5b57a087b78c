//! Velocity-prediction transformer over packed layer tokens.
//!
//! A sequence holds, in order: four equal segments of noisy layer tokens
//! (lineart, flat, highlight, shadow), the condition-image tokens, then `M`
//! learned prompt tokens. Every image token carries a `(layer, row, col)`
//! rotary position; layers 1..4 are the noisy segments and 0 is the
//! condition image. Prompt tokens are position-free.
//!
//! Array names: backbone weights live under `base/`, everything adapted
//! during fine-tuning under `adapter/`:
//!
//! - `base/embed.{weight,bias}`: `[c*p*p, C]`, `[C]`
//! - `base/time1.*`, `base/time2.*`: timestep MLP, `[C, C]`
//! - `base/blocks.{i}.ada.*`: `[C, 6C]` shift/scale/gate for attention and MLP
//! - `base/blocks.{i}.{q,k,v,o}.*`: `[C, C]` attention projections
//! - `base/blocks.{i}.mlp1.*`, `base/blocks.{i}.mlp2.*`
//! - `base/final_ada.*` `[C, 2C]`, `base/final.*` `[C, c*p*p]`
//! - `adapter/blocks.{i}.{q,k,v,o}.lora_a` `[C, r]`, `.lora_b` `[r, C]`
//! - `adapter/layer_embedding` `[4, C]`
//! - `adapter/prompt` `[M, C]`

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::latentcodec::LatentGrid;
use crate::nn::{Graph, ParamSet, RopeTables, Tensor, Var};

pub const BASE: &str = "base/";
pub const ADAPTER: &str = "adapter/";
pub const LAYER_EMBEDDING: &str = "adapter/layer_embedding";
pub const PROMPT: &str = "adapter/prompt";

/// Reserved rotary layer index of the condition image.
pub const CONDITION_LAYER: usize = 0;

const LORA_SITES: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_channels: usize,
    /// Side of the square latent patch folded into one token.
    pub patch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_init_std: f32,
    pub lse_init_std: f32,
    pub use_lse: bool,
    pub prompt_tokens: usize,
    /// Rotary frequency pairs per head for the (layer, row, col) axes.
    pub rope_pairs: [usize; 3],
    pub rope_base: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            patch: 1,
            hidden: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            lora_rank: 32,
            lora_init_std: 0.02,
            lse_init_std: 0.02,
            use_lse: true,
            prompt_tokens: 8,
            rope_pairs: [2, 3, 3],
            rope_base: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        let head_dim = self.hidden / self.heads;
        if !head_dim.is_multiple_of(2) || self.rope_pairs.iter().sum::<usize>() != head_dim / 2 {
            return bad(format!(
                "rope pairs {:?} must sum to half the head dim {head_dim}",
                self.rope_pairs
            ));
        }
        if self.lora_rank == 0 {
            return bad("lora rank must be >= 1".into());
        }
        if self.patch == 0 || self.depth == 0 || self.latent_channels == 0 || self.mlp_ratio == 0 {
            return bad("patch, depth, latent_channels and mlp_ratio must be >= 1".into());
        }
        Ok(())
    }

    pub fn token_features(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }
}

/// Index bookkeeping for a packed sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub grid: (usize, usize),
    pub patch: usize,
    pub per_layer: usize,
    pub segments: [Range<usize>; 4],
    pub condition: Range<usize>,
    pub prompt: Range<usize>,
    /// `(layer, row, col)` per token; `None` for prompt tokens.
    pub positions: Vec<Option<[usize; 3]>>,
}

impl TokenLayout {
    pub fn new(h: usize, w: usize, patch: usize, prompt_tokens: usize) -> Result<Self> {
        if !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
            return Err(Error::shape(format!("latent {h}x{w} not divisible by patch {patch}")));
        }
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let segments = std::array::from_fn(|i| i * n..(i + 1) * n);
        let mut positions = Vec::with_capacity(5 * n + prompt_tokens);
        for layer in [1, 2, 3, 4, CONDITION_LAYER] {
            for r in 0..gh {
                for c in 0..gw {
                    positions.push(Some([layer, r, c]));
                }
            }
        }
        positions.extend(std::iter::repeat_n(None, prompt_tokens));
        Ok(Self {
            grid: (h, w),
            patch,
            per_layer: n,
            segments,
            condition: 4 * n..5 * n,
            prompt: 5 * n..5 * n + prompt_tokens,
            positions,
        })
    }

    pub fn noisy_len(&self) -> usize {
        4 * self.per_layer
    }

    pub fn image_len(&self) -> usize {
        5 * self.per_layer
    }

    pub fn total_len(&self) -> usize {
        self.prompt.end
    }
}

/// Condition image latent plus the prompt block.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub z_i: LatentGrid,
    pub prompt: Tensor,
}

/// Image tokens `[B, 5n, D]` (noisy then condition); prompt rows are appended
/// in hidden space at embedding time.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub layout: TokenLayout,
    pub batch: usize,
    pub features: usize,
    pub tokens: Vec<f32>,
    pub prompt: Tensor,
}

/// Folds `p x p` latent patches into token rows `[n, c*p*p]`, features ordered `(dy, dx, c)`.
pub fn patchify(z: &LatentGrid, p: usize) -> Result<Vec<f32>> {
    if !z.h.is_multiple_of(p) || !z.w.is_multiple_of(p) {
        return Err(Error::shape(format!("latent {}x{} not divisible by patch {p}", z.h, z.w)));
    }
    let (gh, gw) = (z.h / p, z.w / p);
    let mut out = Vec::with_capacity(z.data.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let pix = (gy * p + dy) * z.w + gx * p + dx;
                    out.extend_from_slice(&z.data[pix * z.c..(pix + 1) * z.c]);
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(tokens: &[f32], h: usize, w: usize, c: usize, p: usize) -> Result<LatentGrid> {
    if tokens.len() != h * w * c || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::shape("unpatchify size mismatch"));
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = vec![0.0; h * w * c];
    let mut i = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                for dx in 0..p {
                    let pix = (gy * p + dy) * w + gx * p + dx;
                    data[pix * c..(pix + 1) * c].copy_from_slice(&tokens[i..i + c]);
                    i += c;
                }
            }
        }
    }
    LatentGrid::new(h, w, c, data)
}

/// Packs one set of layer latents and its condition into a sequence.
pub fn pack_layers(layer_latents: &[LatentGrid; 4], cond: &ConditionBundle, patch: usize) -> Result<TokenSequence> {
    let shape = layer_latents[0].shape();
    if layer_latents.iter().any(|l| l.shape() != shape) {
        return Err(Error::shape("layer latents differ in shape"));
    }
    if cond.z_i.shape() != shape {
        return Err(Error::shape(format!(
            "condition latent {:?} vs layer latents {:?}",
            cond.z_i.shape(),
            shape
        )));
    }
    let (h, w, c) = shape;
    let layout = TokenLayout::new(h, w, patch, cond.prompt.dim(0))?;
    let mut tokens = Vec::with_capacity(5 * h * w * c);
    for z in layer_latents.iter().chain(std::iter::once(&cond.z_i)) {
        tokens.extend(patchify(z, patch)?);
    }
    Ok(TokenSequence {
        layout,
        batch: 1,
        features: c * patch * patch,
        tokens,
        prompt: cond.prompt.clone(),
    })
}

/// Inverse of [`pack_layers`] for the noisy part, per batch element.
pub fn unpack_layers(tokens: &[f32], layout: &TokenLayout, c: usize) -> Result<Vec<[LatentGrid; 4]>> {
    let d = c * layout.patch * layout.patch;
    let per = layout.per_layer * d;
    let stride = if tokens.len().is_multiple_of(4 * per) {
        4 * per
    } else {
        return Err(Error::shape("token buffer is not a whole number of noisy blocks"));
    };
    let (h, w) = layout.grid;
    tokens
        .chunks(stride)
        .map(|block| {
            let mut out = Vec::with_capacity(4);
            for i in 0..4 {
                out.push(unpatchify(&block[i * per..(i + 1) * per], h, w, c, layout.patch)?);
            }
            Ok(out.try_into().expect("four layers"))
        })
        .collect()
}

/// Adds row `i` of `table` (`[4, C]`) to every token of segment `i` of `[B, T, C]` tokens.
pub fn inject_layer_embedding(tokens: &Tensor, segments: &[Range<usize>; 4], table: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let e = g.constant(table.clone());
    let y = g.segment_bias(x, e, segments)?;
    Ok(g.value(y).clone())
}

/// `W0 + A B`; `W0` is not modified.
pub fn apply_lora(w0: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[d, k], &[da, r], &[rb, kb]) = (w0.shape(), a.shape(), b.shape()) else {
        return Err(Error::shape("lora operands must be 2-D"));
    };
    if d != da || r != rb || k != kb {
        return Err(Error::shape(format!(
            "lora shapes W0 {:?}, A {:?}, B {:?}",
            w0.shape(),
            a.shape(),
            b.shape()
        )));
    }
    let mut out = w0.data().to_vec();
    crate::nn::gemm(d, r, k, 1.0, a.data(), r, 1, b.data(), k, 1, 1.0, &mut out, k, 1);
    Tensor::from_vec(&[d, k], out)
}

/// Rotary tables for a layout, `[T, pairs]`.
pub fn rope_tables(layout: &TokenLayout, config: &ModelConfig) -> RopeTables {
    let pairs: usize = config.rope_pairs.iter().sum();
    let mut freqs = Vec::with_capacity(pairs);
    for (axis, &n) in config.rope_pairs.iter().enumerate() {
        for j in 0..n {
            freqs.push((axis, config.rope_base.powf(-(j as f32) / n as f32)));
        }
    }
    let t = layout.total_len();
    let mut cos = Vec::with_capacity(t * pairs);
    let mut sin = Vec::with_capacity(t * pairs);
    for pos in &layout.positions {
        for &(axis, f) in &freqs {
            let angle = pos.map_or(0.0, |p| p[axis] as f32 * f);
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    RopeTables {
        cos: Arc::new(cos),
        sin: Arc::new(sin),
        pairs,
    }
}

/// Sinusoidal features of `t * 1000`, `[B, dim]`.
pub fn timestep_features(t: &[f32], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let s = ti * 1000.0;
        for j in 0..half {
            let f = (-(10000f32.ln()) * j as f32 / half as f32).exp();
            out.push((s * f).cos());
        }
        for j in 0..half {
            let f = (-(10000f32.ln()) * j as f32 / half as f32).exp();
            out.push((s * f).sin());
        }
        out.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Tensor::from_vec(&[t.len(), dim], out).expect("timestep shape")
}

/// Which optional paths the forward pass takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub lora: bool,
    pub lse: bool,
}

impl ForwardMode {
    pub const BASE: ForwardMode = ForwardMode {
        lora: false,
        lse: false,
    };
}

pub type Bound = BTreeMap<String, Var>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

fn linear(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, std: Option<f32>, rng: &mut ChaCha8Rng) {
    let w = match std {
        Some(0.0) => Tensor::zeros(&[fan_in, fan_out]),
        Some(s) => Tensor::randn(&[fan_in, fan_out], s, rng),
        None => Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f32).sqrt(), rng),
    };
    p.insert(format!("{name}.weight"), w);
    p.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
}

impl Model {
    /// Random backbone plus identity adapters (`B = 0`).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.hidden;
        let d = config.token_features();
        let mut p = ParamSet::new();
        linear(&mut p, "base/embed", d, c, None, &mut rng);
        linear(&mut p, "base/time1", c, c, None, &mut rng);
        linear(&mut p, "base/time2", c, c, None, &mut rng);
        for i in 0..config.depth {
            let b = format!("base/blocks.{i}");
            linear(&mut p, &format!("{b}.ada"), c, 6 * c, Some(0.0), &mut rng);
            for s in LORA_SITES {
                linear(&mut p, &format!("{b}.{s}"), c, c, None, &mut rng);
            }
            linear(&mut p, &format!("{b}.mlp1"), c, config.mlp_ratio * c, None, &mut rng);
            linear(&mut p, &format!("{b}.mlp2"), config.mlp_ratio * c, c, None, &mut rng);
        }
        linear(&mut p, "base/final_ada", c, 2 * c, Some(0.0), &mut rng);
        linear(&mut p, "base/final", c, d, Some(0.0), &mut rng);
        let mut model = Self { config, params: p };
        model.reset_adapters(seed.wrapping_add(1))?;
        Ok(model)
    }

    /// Fresh adapters: `A ~ N(0, std^2)`, `B = 0`, `E ~ N(0, std^2)`, prompt `N(0, 0.02^2)`.
    pub fn reset_adapters(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &self.config;
        let (c, r) = (cfg.hidden, cfg.lora_rank);
        for i in 0..cfg.depth {
            for s in LORA_SITES {
                let base = format!("adapter/blocks.{i}.{s}");
                self.params
                    .insert(format!("{base}.lora_a"), Tensor::randn(&[c, r], cfg.lora_init_std, &mut rng));
                self.params.insert(format!("{base}.lora_b"), Tensor::zeros(&[r, c]));
            }
        }
        self.params
            .insert(LAYER_EMBEDDING, Tensor::randn(&[4, c], cfg.lse_init_std, &mut rng));
        self.params
            .insert(PROMPT, Tensor::randn(&[cfg.prompt_tokens, c], 0.02, &mut rng));
        Ok(())
    }

    /// Forward mode implied by the config for the adapted model.
    pub fn adapted_mode(&self) -> ForwardMode {
        ForwardMode {
            lora: true,
            lse: self.config.use_lse,
        }
    }

    pub fn base_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (k, v) in self.params.with_prefix(BASE) {
            p.insert(k.clone(), v.clone());
        }
        p
    }

    pub fn adapter_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (k, v) in self.params.with_prefix(ADAPTER) {
            p.insert(k.clone(), v.clone());
        }
        p
    }

    pub fn condition(&self, z_i: LatentGrid) -> Result<ConditionBundle> {
        Ok(ConditionBundle {
            z_i,
            prompt: self.params.get(PROMPT)?.clone(),
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        self.params
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable(k))))
            .collect()
    }

    fn lin(&self, g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let h = g.matmul(x, p[&format!("{name}.weight")])?;
        g.add_bias(h, p[&format!("{name}.bias")])
    }

    /// Attention projection, with `W0 + A B` when LoRA is active.
    fn proj(&self, g: &mut Graph, p: &Bound, block: usize, site: &str, x: Var, mode: ForwardMode) -> Result<Var> {
        let name = format!("base/blocks.{block}.{site}");
        let mut w = p[&format!("{name}.weight")];
        if mode.lora {
            let a = p[&format!("adapter/blocks.{block}.{site}.lora_a")];
            let b = p[&format!("adapter/blocks.{block}.{site}.lora_b")];
            let ab = g.matmul(a, b)?;
            w = g.add(w, ab)?;
        }
        let h = g.matmul(x, w)?;
        g.add_bias(h, p[&format!("{name}.bias")])
    }

    /// Embeds image tokens, appends the prompt and injects layer embeddings.
    /// Returns the `[B, T, C]` representation entering the first block.
    pub fn embed_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        x_img: Var,
        layout: &TokenLayout,
        mode: ForwardMode,
    ) -> Result<Var> {
        let batch = g.value(x_img).dim(0);
        let h = self.lin(g, p, "base/embed", x_img)?;
        let prompt = g.broadcast_batch(p[PROMPT], batch)?;
        let mut h = g.concat_tokens(&[h, prompt])?;
        if mode.lse {
            h = g.segment_bias(h, p[LAYER_EMBEDDING], &layout.segments)?;
        }
        Ok(h)
    }

    /// Full forward on packed image tokens `[B, 5n, D]`; returns noisy-token velocities `[B, 4n, D]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        x_img: Var,
        t: &[f32],
        layout: &TokenLayout,
        mode: ForwardMode,
    ) -> Result<Var> {
        let cfg = &self.config;
        let c = cfg.hidden;
        let tables = rope_tables(layout, cfg);
        let mut x = self.embed_graph(g, p, x_img, layout, mode)?;

        let tf = g.constant(timestep_features(t, c));
        let te = self.lin(g, p, "base/time1", tf)?;
        let te = g.silu(te);
        let te = self.lin(g, p, "base/time2", te)?;
        let cond = g.silu(te);

        for i in 0..cfg.depth {
            let b = format!("base/blocks.{i}");
            let ada = self.lin(g, p, &format!("{b}.ada"), cond)?;
            let part = |g: &mut Graph, k: usize| g.slice_cols(ada, k * c, c);
            let (sh1, sc1, g1) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
            let (sh2, sc2, g2) = (part(g, 3)?, part(g, 4)?, part(g, 5)?);

            let h = g.layer_norm(x, 1e-6);
            let h = g.modulate(h, sh1, sc1)?;
            let q = self.proj(g, p, i, "q", h, mode)?;
            let k = self.proj(g, p, i, "k", h, mode)?;
            let v = self.proj(g, p, i, "v", h, mode)?;
            let q = g.rope(q, cfg.heads, &tables)?;
            let k = g.rope(k, cfg.heads, &tables)?;
            let a = g.attention(q, k, v, cfg.heads)?;
            let o = self.proj(g, p, i, "o", a, mode)?;
            let o = g.mul_bcast(o, g1)?;
            x = g.add(x, o)?;

            let h = g.layer_norm(x, 1e-6);
            let h = g.modulate(h, sh2, sc2)?;
            let h = self.lin(g, p, &format!("{b}.mlp1"), h)?;
            let h = g.gelu(h);
            let h = self.lin(g, p, &format!("{b}.mlp2"), h)?;
            let h = g.mul_bcast(h, g2)?;
            x = g.add(x, h)?;
            if !g.value(x).is_finite() {
                return Err(Error::Numeric(format!("non-finite activations after block {i}")));
            }
        }

        let x = g.slice_tokens(x, 0, layout.noisy_len())?;
        let ada = self.lin(g, p, "base/final_ada", cond)?;
        let sh = g.slice_cols(ada, 0, c)?;
        let sc = g.slice_cols(ada, c, c)?;
        let h = g.layer_norm(x, 1e-6);
        let h = g.modulate(h, sh, sc)?;
        self.lin(g, p, "base/final", h)
    }

    /// Inference on packed tokens; no gradients are tracked.
    pub fn forward_tokens(&self, x_img: &Tensor, t: &[f32], layout: &TokenLayout, mode: ForwardMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_| false);
        let x = g.constant(x_img.clone());
        let out = self.forward_graph(&mut g, &p, x, t, layout, mode)?;
        Ok(g.value(out).clone())
    }

    /// Predicted velocity for one set of noisy layer latents.
    pub fn forward(&self, x_t: &[LatentGrid; 4], t: f32, cond: &ConditionBundle, mode: ForwardMode) -> Result<[LatentGrid; 4]> {
        if !t.is_finite() {
            return Err(Error::Numeric(format!("timestep {t} is not finite")));
        }
        let seq = pack_layers(x_t, cond, self.config.patch)?;
        let x = Tensor::from_vec(&[1, seq.layout.image_len(), seq.features], seq.tokens)?;
        let mut model = self.clone();
        model.params.insert(PROMPT, cond.prompt.clone());
        let out = model.forward_tokens(&x, &[t], &seq.layout, mode)?;
        Ok(unpack_layers(out.data(), &seq.layout, self.config.latent_channels)?.remove(0))
    }

    /// Representation right after embedding and layer-embedding injection.
    pub fn injected_tokens(&self, x_img: &Tensor, layout: &TokenLayout, mode: ForwardMode) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_| false);
        let x = g.constant(x_img.clone());
        let h = self.embed_graph(&mut g, &p, x, layout, mode)?;
        Ok(g.value(h).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.clone(), json!({"kind": "layernet", "config": self.config}))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("layernet") {
            return Err(Error::Config("checkpoint is not a layernet model".into()));
        }
        let config: ModelConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| Error::Config(format!("model checkpoint config: {e}")))?;
        let reference = Model::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            if ck.params.get(name)?.shape() != t.shape() {
                return Err(Error::Config(format!("model array `{name}` has the wrong shape")));
            }
        }
        Ok(Self {
            config,
            params: ck.params.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?).map_err(|e| Error::load(path, e))
    }
}
