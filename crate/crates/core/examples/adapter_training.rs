//! Tiny end-to-end run: codec, backbone warm-up, adapter fine-tuning, decomposition.
//! Shows that fine-tuning only touches adapter arrays.

use celdecomp::compositor::recompose;
use celdecomp::evalkit::psnr;
use celdecomp::flowtrain::{changed_arrays, decompose, encode_samples, loss_drop, pretrain_backbone, train_encoded, TrainConfig};
use celdecomp::latentcodec::{layer_images, train_codec, CodecTrainConfig};
use celdecomp::layernet::ModelConfig;
use celdecomp::synthgen::{generate_sample, SampleSpec};

fn main() -> celdecomp::Result<()> {
    let spec = SampleSpec::default().sized(32, 32);
    let samples: Vec<_> = (0..12)
        .map(|s| generate_sample(&SampleSpec { seed: s, ..spec.clone() }))
        .collect::<celdecomp::Result<_>>()?;
    let sources: Vec<_> = samples.iter().map(|s| s.source.clone()).collect();
    let layers: Vec<_> = samples.iter().map(|s| layer_images(&s.stack)).collect();
    let ccfg = CodecTrainConfig { rgb_steps: 30, rgba_steps: 90, ..CodecTrainConfig::default() };
    let (codec, _) = train_codec(&sources, &layers, &ccfg)?;

    let cfg = TrainConfig {
        steps: 60,
        backbone_steps: 120,
        backbone_samples: 12,
        model: ModelConfig { depth: 2, patch: 2, ..ModelConfig::default() },
        ..TrainConfig::desk()
    };
    let (backbone, _) = pretrain_backbone(&codec, &cfg, &spec)?;
    let pairs: Vec<_> = samples.iter().map(|s| (&s.source, &s.stack)).collect();
    let data = encode_samples(&codec, &pairs, &cfg.model)?;
    let out = train_encoded(&data, &backbone, &cfg, |step, _, b| {
        if step % 20 == 0 {
            println!("step {step:>3} loss {:.4}", b.total);
        }
        Ok(())
    })?;
    println!("first-10 vs last-10 mean loss: {:?}", loss_drop(&out.history, 10, 10));
    let changed = changed_arrays(&backbone, &out.model);
    println!("{} arrays changed, all under adapter/: {}", changed.len(), changed.iter().all(|n| n.starts_with("adapter/")));

    let held = generate_sample(&SampleSpec { seed: 500, ..spec })?;
    let stack = decompose(&held.source, &out.model, &codec, cfg.euler_steps, 0)?;
    println!("held-out recomposition PSNR {:.2} dB", psnr(&recompose(&stack)?, &held.source)?);
    Ok(())
}
