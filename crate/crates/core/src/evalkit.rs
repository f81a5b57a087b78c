//! Recomposition metrics and the layer-leakage diagnostic.
//!
//! All image metrics flatten RGBA over white first.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::compositor::{recompose, LayerRole, LayerStack, RasterImage};
use crate::error::{Error, Result};
use crate::flowtrain::decompose;
use crate::latentcodec::Codec;
use crate::layernet::Model;
use crate::synthgen::StoredSample;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const LMSE_WINDOW: usize = 20;
pub const LMSE_STRIDE: usize = 10;

fn same_dims(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("image dims differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn psnr(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    same_dims(a, b)?;
    let (fa, fb) = (a.flatten_over_white(), b.flatten_over_white());
    let mut sum = 0.0;
    for (p, q) in fa.iter().zip(&fb) {
        for c in 0..3 {
            sum += (p[c] - q[c]).powi(2);
        }
    }
    Ok(psnr_from_mse(sum / (3 * fa.len()) as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Rec. 601 luma of the white-flattened image.
pub fn luma(img: &RasterImage) -> Vec<f64> {
    img.flatten_over_white()
        .iter()
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

/// Mean SSIM over all 8x8 windows at stride 1 (uniform weights, population moments).
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    ssim_plane(&luma(a), &luma(b), h, w)
}

pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::shape(format!("ssim window {k} larger than image {h}x{w}")));
    }
    // Summed-area tables of x, y, x^2, y^2, xy.
    let sat = |f: &dyn Fn(usize) -> f64| {
        let mut t = vec![0.0f64; (h + 1) * (w + 1)];
        for r in 0..h {
            let mut row = 0.0;
            for c in 0..w {
                row += f(r * w + c);
                t[(r + 1) * (w + 1) + c + 1] = t[r * (w + 1) + c + 1] + row;
            }
        }
        t
    };
    let tables = [
        sat(&|i| x[i]),
        sat(&|i| y[i]),
        sat(&|i| x[i] * x[i]),
        sat(&|i| y[i] * y[i]),
        sat(&|i| x[i] * y[i]),
    ];
    let box_sum = |t: &[f64], r: usize, c: usize| {
        t[(r + k) * (w + 1) + c + k] - t[r * (w + 1) + c + k] - t[(r + k) * (w + 1) + c] + t[r * (w + 1) + c]
    };
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = (k * k) as f64;
    let mut total = 0.0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let s = tables.each_ref().map(|t| box_sum(t, r, c) / n);
            let (mx, my) = (s[0], s[1]);
            let vx = s[2] - mx * mx;
            let vy = s[3] - my * my;
            let cov = s[4] - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

fn window_starts(len: usize) -> Vec<(usize, usize)> {
    if len <= LMSE_WINDOW {
        return vec![(0, len)];
    }
    (0..=len - LMSE_WINDOW)
        .step_by(LMSE_STRIDE)
        .map(|s| (s, LMSE_WINDOW))
        .collect()
}

/// Local scale-invariant MSE of `b` against reference `a`.
///
/// Each window fits one scalar `alpha` minimizing `|a - alpha * b|^2`; the summed
/// residual is divided by the summed energy of `a` over the same windows.
pub fn lmse(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    let (fa, fb) = (a.flatten_over_white(), b.flatten_over_white());
    let (mut err, mut energy) = (0.0, 0.0);
    for &(r0, rh) in &window_starts(h) {
        for &(c0, cw) in &window_starts(w) {
            let (mut ab, mut bb, mut aa) = (0.0, 0.0, 0.0);
            for r in r0..r0 + rh {
                for c in c0..c0 + cw {
                    let (p, q) = (&fa[r * w + c], &fb[r * w + c]);
                    for ch in 0..3 {
                        ab += p[ch] * q[ch];
                        bb += q[ch] * q[ch];
                        aa += p[ch] * p[ch];
                    }
                }
            }
            let alpha = if bb > 0.0 { ab / bb } else { 0.0 };
            // |a - alpha b|^2 expanded; clamp the rounding below zero.
            err += (aa - 2.0 * alpha * ab + alpha * alpha * bb).max(0.0);
            energy += aa;
        }
    }
    Ok(if energy > 0.0 { err / energy } else { 0.0 })
}

/// 4x4 leakage matrix in `LayerRole::ALL` order (row/column `index() - 1`).
///
/// Off-diagonal `(i, j)`: mean alpha of predicted layer `i` over GT layer `j`'s
/// support minus its mean alpha over GT layer `i`'s support, clamped at zero.
/// Diagonal: RGBA MSE of layer `i` against GT over GT layer `i`'s support.
pub fn layer_leakage(pred: &LayerStack, gt: &LayerStack) -> Result<[[f64; 4]; 4]> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "stack dims differ: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let supports: Vec<Vec<usize>> = LayerRole::ALL
        .iter()
        .map(|r| {
            gt.layer(*r)
                .pixels()
                .chunks_exact(4)
                .enumerate()
                .filter(|(_, p)| p[3] > 0.0)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let mean_alpha = |img: &RasterImage, idx: &[usize]| {
        if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&i| img.pixels()[i * 4 + 3] as f64).sum::<f64>() / idx.len() as f64
        }
    };
    let mut m = [[0.0; 4]; 4];
    for (i, ri) in LayerRole::ALL.iter().enumerate() {
        let p = pred.layer(*ri);
        let own = mean_alpha(p, &supports[i]);
        for j in 0..4 {
            if i == j {
                let g = gt.layer(*ri);
                let s = &supports[i];
                if !s.is_empty() {
                    let mut acc = 0.0;
                    for &k in s {
                        for c in 0..4 {
                            acc += (p.pixels()[k * 4 + c] as f64 - g.pixels()[k * 4 + c] as f64).powi(2);
                        }
                    }
                    m[i][i] = acc / (4 * s.len()) as f64;
                }
            } else if !supports[j].is_empty() {
                m[i][j] = (mean_alpha(p, &supports[j]) - own).max(0.0);
            }
        }
    }
    Ok(m)
}

pub fn off_diagonal(m: &[[f64; 4]; 4]) -> impl Iterator<Item = f64> + '_ {
    (0..4).flat_map(move |i| (0..4).filter(move |j| *j != i).map(move |j| m[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub sample_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lmse: f64,
    /// Per-layer PSNR in `LayerRole::ALL` order.
    pub layer_psnr: [f64; 4],
    pub leakage: [[f64; 4]; 4],
}

impl MetricsRecord {
    pub fn leak_max(&self) -> f64 {
        off_diagonal(&self.leakage).fold(0.0, f64::max)
    }

    pub fn leak_mean(&self) -> f64 {
        off_diagonal(&self.leakage).sum::<f64>() / 12.0
    }
}

pub const METRICS_HEADER: [&str; 9] = [
    "sample_id",
    "psnr",
    "ssim",
    "lmse",
    "psnr_lineart",
    "psnr_flat",
    "psnr_highlight",
    "psnr_shadow",
    "leak_max",
];

/// Metrics of a predicted stack against a source image and its GT stack.
pub fn score(id: &str, source: &RasterImage, pred: &LayerStack, gt: &LayerStack) -> Result<MetricsRecord> {
    let rec = recompose(pred)?;
    let mut layer_psnr = [0.0; 4];
    for (k, r) in LayerRole::ALL.iter().enumerate() {
        layer_psnr[k] = psnr(pred.layer(*r), gt.layer(*r))?;
    }
    Ok(MetricsRecord {
        sample_id: id.to_string(),
        psnr: psnr(&rec, source)?,
        ssim: ssim(&rec, source)?,
        lmse: lmse(source, &rec)?,
        layer_psnr,
        leakage: layer_leakage(pred, gt)?,
    })
}

/// What produces the predicted layers.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    /// Uses the GT layers directly; checks the metric pipeline itself.
    GroundTruth,
    Model {
        model: &'a Model,
        codec: &'a Codec,
        euler_steps: usize,
        seed: u64,
    },
}

impl Predictor<'_> {
    pub fn predict(&self, sample: &StoredSample) -> Result<LayerStack> {
        match self {
            Predictor::GroundTruth => Ok(sample.stack.clone()),
            Predictor::Model {
                model,
                codec,
                euler_steps,
                seed,
            } => decompose(&sample.source, model, codec, *euler_steps, seed ^ sample.seed),
        }
    }
}

pub fn evaluate_samples(samples: &[StoredSample], predictor: Predictor<'_>) -> Result<Vec<MetricsRecord>> {
    if samples.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    samples
        .iter()
        .map(|s| score(&s.id, &s.source, &predictor.predict(s)?, &s.stack))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub means: BTreeMap<String, f64>,
    pub stds: BTreeMap<String, f64>,
    pub config_hash: String,
}

impl Summary {
    pub fn mean(&self, key: &str) -> f64 {
        self.means.get(key).copied().unwrap_or(f64::NAN)
    }
}

/// Mean and population standard deviation of every numeric column.
pub fn summarize(records: &[MetricsRecord], config_hash: &str) -> Summary {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        let row = [
            ("psnr", r.psnr),
            ("ssim", r.ssim),
            ("lmse", r.lmse),
            ("psnr_lineart", r.layer_psnr[0]),
            ("psnr_flat", r.layer_psnr[1]),
            ("psnr_highlight", r.layer_psnr[2]),
            ("psnr_shadow", r.layer_psnr[3]),
            ("leak_max", r.leak_max()),
            ("leak_mean", r.leak_mean()),
        ];
        for (k, v) in row {
            cols.entry(k.to_string()).or_default().push(v);
        }
    }
    let mut means = BTreeMap::new();
    let mut stds = BTreeMap::new();
    for (k, v) in cols {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        means.insert(k.clone(), m);
        stds.insert(k, var.sqrt());
    }
    Summary {
        count: records.len(),
        means,
        stds,
        config_hash: config_hash.to_string(),
    }
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, e))?;
    w.write_record(METRICS_HEADER).map_err(|e| Error::load(path, e))?;
    for r in records {
        let mut row = vec![r.sample_id.clone()];
        row.extend([r.psnr, r.ssim, r.lmse].iter().map(|v| format!("{v:.6}")));
        row.extend(r.layer_psnr.iter().map(|v| format!("{v:.6}")));
        row.push(format!("{:.6}", r.leak_max()));
        w.write_record(&row).map_err(|e| Error::load(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Scores every sample and writes `metrics.csv` and `summary.json` into `out_dir`.
///
/// `config` is hashed into the summary; pass whatever identifies the run
/// (checkpoint hashes, steps, seed).
pub fn evaluate(out_dir: &Path, samples: &[StoredSample], predictor: Predictor<'_>, config: &serde_json::Value) -> Result<Summary> {
    let records = evaluate_samples(samples, predictor)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &records)?;
    let hash = sha256_hex(config.to_string().as_bytes());
    let summary = summarize(&records, &hash[..16]);
    let path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_sample, SampleSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RasterImage {
        RasterImage::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn psnr_trivial_cases() {
        let a = RasterImage::filled(4, 4, [0.0, 0.0, 0.0, 1.0]).unwrap();
        let b = RasterImage::filled(4, 4, [1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &b).unwrap().abs() < 1e-12);
        assert!(psnr(&a, &RasterImage::transparent(4, 5)).is_err());
    }

    #[test]
    fn ssim_identity_and_small_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 12, 10);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let s = random_image(&mut rng, 7, 20);
        assert!(ssim(&s, &s).is_err());
    }

    #[test]
    fn lmse_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 25, 33);
        assert_eq!(lmse(&a, &a).unwrap(), 0.0);
        let black = RasterImage::filled(8, 8, [0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(lmse(&black, &black).unwrap(), 0.0);
    }

    #[test]
    fn leakage_examples() {
        // Disjoint supports: lineart and highlight on separate halves.
        let half = |left: bool, px: [f32; 4]| {
            RasterImage::from_fn(6, 6, move |_, x| if (x < 3) == left { px } else { [0.0; 4] })
        };
        let gt = LayerStack::new(
            half(true, [0.2, 0.2, 0.2, 1.0]),
            RasterImage::transparent(6, 6),
            half(false, [1.0, 1.0, 0.9, 1.0]),
            RasterImage::transparent(6, 6),
        )
        .unwrap();
        let m = layer_leakage(&gt, &gt).unwrap();
        assert!(off_diagonal(&m).all(|v| v == 0.0));
        assert!((0..4).all(|i| m[i][i] == 0.0));

        let mut bad = gt.clone();
        bad.replace(LayerRole::Highlight, gt.layer(LayerRole::Lineart).clone()).unwrap();
        let m = layer_leakage(&bad, &gt).unwrap();
        assert!(m[LayerRole::Highlight.index() - 1][LayerRole::Lineart.index() - 1] > 0.0);

        let empty = LayerStack::from_layers(std::array::from_fn(|_| RasterImage::transparent(6, 6))).unwrap();
        let m = layer_leakage(&empty, &gt).unwrap();
        assert!(off_diagonal(&m).all(|v| v == 0.0));
        let energy = |img: &RasterImage| {
            let px: Vec<_> = img.pixels().chunks_exact(4).filter(|p| p[3] > 0.0).collect();
            px.iter().flat_map(|p| p.iter()).map(|v| (*v as f64).powi(2)).sum::<f64>() / (4 * px.len()) as f64
        };
        let li = LayerRole::Lineart.index() - 1;
        assert!((m[li][li] - energy(gt.layer(LayerRole::Lineart))).abs() < 1e-12);
    }

    #[test]
    fn ground_truth_passthrough_is_exact() {
        let s = generate_sample(&SampleSpec::with_seed(2).sized(32, 24)).unwrap();
        let stored = StoredSample {
            id: "s".into(),
            seed: 2,
            source: s.source,
            stack: s.stack,
        };
        let recs = evaluate_samples(std::slice::from_ref(&stored), Predictor::GroundTruth).unwrap();
        let r = &recs[0];
        assert_eq!(r.psnr, PSNR_CAP);
        assert!((r.ssim - 1.0).abs() < 1e-6);
        assert!(r.lmse < 1e-9);
        assert!(r.layer_psnr.iter().all(|v| *v == PSNR_CAP));
        assert!(evaluate_samples(&[], Predictor::GroundTruth).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn ssim_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 10, 12);
            let b = random_image(&mut rng, 10, 12);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
        }

        #[test]
        fn lmse_is_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 24, 30);
            let b = random_image(&mut rng, 24, 30);
            prop_assert!(lmse(&a, &b).unwrap() >= 0.0);
        }
    }
}
