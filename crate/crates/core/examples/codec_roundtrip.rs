//! Extends an RGB codec to RGBA and checks that it still encodes RGB the same way,
//! then trains a small codec briefly and reports reconstruction quality.

use celdecomp::compositor::RasterImage;
use celdecomp::evalkit::psnr;
use celdecomp::latentcodec::{extend_channels, layer_images, train_codec, Codec, CodecConfig, CodecTrainConfig};
use celdecomp::synthgen::{generate_sample, SampleSpec};

fn main() -> celdecomp::Result<()> {
    let rgb = Codec::init(CodecConfig { channels: 3, ..CodecConfig::default() }, 0)?;
    let rgba = extend_channels(&rgb)?;
    let img = generate_sample(&SampleSpec::with_seed(1).sized(32, 32))?.source;
    let gap = rgb.encode(&img)?.max_abs_diff(&rgba.encode(&img)?);
    println!("RGB vs extended encoding: max diff {gap:.2e}");

    let samples: Vec<_> = (0..8)
        .map(|s| generate_sample(&SampleSpec::with_seed(s).sized(32, 32)))
        .collect::<celdecomp::Result<_>>()?;
    let sources: Vec<RasterImage> = samples.iter().map(|s| s.source.clone()).collect();
    let layers: Vec<_> = samples.iter().map(|s| layer_images(&s.stack)).collect();
    let cfg = CodecTrainConfig { rgb_steps: 40, rgba_steps: 120, ..CodecTrainConfig::default() };
    let (codec, report) = train_codec(&sources, &layers, &cfg)?;
    println!(
        "codec loss {:.4} -> {:.4}",
        report.losses.first().unwrap_or(&f32::NAN),
        report.losses.last().unwrap_or(&f32::NAN)
    );
    let held = generate_sample(&SampleSpec::with_seed(99).sized(32, 32))?.source;
    println!("held-out PSNR {:.2} dB", psnr(&codec.decode(&codec.encode(&held)?)?, &held)?);
    Ok(())
}
