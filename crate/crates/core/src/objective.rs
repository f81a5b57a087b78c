//! Layer-wise supervision on packed velocity predictions.
//!
//! All reductions are means, so weights do not depend on resolution. Values
//! and gradients are computed in `f64`.

use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};

/// Training variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Layer embeddings are not injected.
    NoLse,
    /// Every specialized term is replaced by one global MSE.
    NoLwloss,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoLse, Ablation::NoLwloss];

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoLse => "no_lse",
            Ablation::NoLwloss => "no_lwloss",
        }
    }

    pub fn uses_lse(self) -> bool {
        self != Ablation::NoLse
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected full, no_lse or no_lwloss)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lineart: f64,
    pub flat: f64,
    pub highlight: f64,
    pub shadow: f64,
    pub sparse: f64,
    pub comp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lineart: 2.5,
            flat: 1.0,
            highlight: 1.0,
            shadow: 1.0,
            sparse: 0.08,
            comp: 1.8,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.lineart, self.flat, self.highlight, self.shadow, self.sparse, self.comp]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the weights' JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("weights serialize");
        sha256_hex(json.as_bytes())[..16].to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_lineart: f64,
    pub l_flat: f64,
    pub l_highlight: f64,
    pub l_shadow: f64,
    pub l_sparse: f64,
    pub l_comp: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 6] {
        [self.l_lineart, self.l_flat, self.l_highlight, self.l_shadow, self.l_sparse, self.l_comp]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

pub const CSV_HEADER: [&str; 9] = [
    "step",
    "l_lineart",
    "l_flat",
    "l_highlight",
    "l_shadow",
    "l_sparse",
    "l_comp",
    "total",
    "weights_hash",
];

/// One metrics row: step, the six components, total, weights hash.
pub fn csv_row(step: usize, b: &LossBreakdown, weights: &LossWeights) -> Vec<String> {
    let mut row = vec![step.to_string()];
    row.extend(b.components().iter().map(|v| format!("{v:.9e}")));
    row.push(format!("{:.9e}", b.total));
    row.push(weights.hash());
    row
}

/// Four equal contiguous ranges covering `0..len`.
pub fn equal_bounds(len: usize) -> Result<[Range<usize>; 4]> {
    if !len.is_multiple_of(4) {
        return Err(Error::shape(format!("length {len} not divisible by 4")));
    }
    let n = len / 4;
    Ok([0..n, n..2 * n, 2 * n..3 * n, 3 * n..4 * n])
}

/// Splits a packed vector into its four layer segments (role order).
pub fn split_layers<'a, T>(v: &'a [T], bounds: &[Range<usize>; 4]) -> Result<[&'a [T]; 4]> {
    let n = bounds[0].len();
    let mut prev = 0;
    for b in bounds {
        if b.start != prev || b.len() != n || b.end > v.len() {
            return Err(Error::shape(format!("bad segment bounds {bounds:?} for length {}", v.len())));
        }
        prev = b.end;
    }
    if prev != v.len() {
        return Err(Error::shape(format!("bounds cover {prev} of {} elements", v.len())));
    }
    Ok([
        &v[bounds[0].clone()],
        &v[bounds[1].clone()],
        &v[bounds[2].clone()],
        &v[bounds[3].clone()],
    ])
}

fn same_len(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("segment lengths {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::shape("empty segment"));
    }
    Ok(a.len() as f64)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error.
pub fn lineart_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    let n = same_len(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// Mean squared error.
pub fn mse_layer_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    let n = same_len(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n)
}

/// Mean absolute value of the highlight plus that of the shadow prediction.
pub fn sparsity_loss(pred_highlight: &[f64], pred_shadow: &[f64]) -> Result<f64> {
    let mean_abs = |v: &[f64]| -> Result<f64> {
        if v.is_empty() {
            return Err(Error::shape("empty segment"));
        }
        Ok(v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64)
    };
    Ok(mean_abs(pred_highlight)? + mean_abs(pred_shadow)?)
}

/// `(1/N) * || sum_i pred_i - sum_i target_i ||^2`.
pub fn composition_loss(pred: &[&[f64]; 4], target: &[&[f64]; 4]) -> Result<f64> {
    let n = pred[0].len();
    for s in pred.iter().chain(target) {
        same_len(s, pred[0])?;
    }
    let mut acc = 0.0;
    for e in 0..n {
        let d: f64 = (0..4).map(|i| pred[i][e] - target[i][e]).sum();
        acc += d * d;
    }
    Ok(acc / n as f64)
}

fn global_mse(pred: &[&[f64]; 4], target: &[&[f64]; 4]) -> Result<f64> {
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..4 {
        n += same_len(pred[i], target[i])?;
        s += pred[i].iter().zip(target[i]).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
    }
    Ok(s / n)
}

/// All six components and the objective selected by `ablation`.
pub fn total_loss(
    pred: &[&[f64]; 4],
    target: &[&[f64]; 4],
    weights: &LossWeights,
    ablation: Ablation,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let l_lineart = lineart_loss(pred[0], target[0])?;
    let l_flat = mse_layer_loss(pred[1], target[1])?;
    let l_highlight = mse_layer_loss(pred[2], target[2])?;
    let l_shadow = mse_layer_loss(pred[3], target[3])?;
    let l_sparse = sparsity_loss(pred[2], pred[3])?;
    let l_comp = composition_loss(pred, target)?;
    let total = match ablation {
        Ablation::NoLwloss => global_mse(pred, target)?,
        _ => {
            weights.lineart * l_lineart
                + weights.flat * l_flat
                + weights.highlight * l_highlight
                + weights.shadow * l_shadow
                + weights.sparse * l_sparse
                + weights.comp * l_comp
        }
    };
    Ok(LossBreakdown {
        l_lineart,
        l_flat,
        l_highlight,
        l_shadow,
        l_sparse,
        l_comp,
        total,
    })
}

/// [`total_loss`] plus the gradient of `total` with respect to each predicted segment.
pub fn total_loss_with_grad(
    pred: &[&[f64]; 4],
    target: &[&[f64]; 4],
    weights: &LossWeights,
    ablation: Ablation,
) -> Result<(LossBreakdown, [Vec<f64>; 4])> {
    let b = total_loss(pred, target, weights, ablation)?;
    let n = pred[0].len() as f64;
    let mut grads: [Vec<f64>; 4] = std::array::from_fn(|i| vec![0.0; pred[i].len()]);
    if ablation == Ablation::NoLwloss {
        let scale = 2.0 / (4.0 * n);
        for i in 0..4 {
            for (g, (p, t)) in grads[i].iter_mut().zip(pred[i].iter().zip(target[i])) {
                *g = scale * (p - t);
            }
        }
        return Ok((b, grads));
    }
    let w = weights;
    for (g, (p, t)) in grads[0].iter_mut().zip(pred[0].iter().zip(target[0])) {
        *g = w.lineart * sign(p - t) / n;
    }
    for (i, wi) in [(1, w.flat), (2, w.highlight), (3, w.shadow)] {
        for (g, (p, t)) in grads[i].iter_mut().zip(pred[i].iter().zip(target[i])) {
            *g = wi * 2.0 * (p - t) / n;
        }
    }
    for i in [2, 3] {
        for (g, p) in grads[i].iter_mut().zip(pred[i]) {
            *g += w.sparse * sign(*p) / n;
        }
    }
    for e in 0..pred[0].len() {
        let d: f64 = (0..4).map(|i| pred[i][e] - target[i][e]).sum();
        let gc = w.comp * 2.0 * d / n;
        for g in grads.iter_mut() {
            g[e] += gc;
        }
    }
    Ok((b, grads))
}
