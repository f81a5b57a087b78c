//! Scores a deliberately damaged decomposition against ground truth.

use celdecomp::compositor::{LayerRole, RasterImage};
use celdecomp::evalkit::{layer_leakage, lmse, psnr, score, ssim};
use celdecomp::synthgen::{generate_sample, SampleSpec};

fn main() -> celdecomp::Result<()> {
    let s = generate_sample(&SampleSpec::with_seed(11).sized(64, 48))?;
    let mut pred = s.stack.clone();
    // Leak the lineart into the highlight slot.
    pred.replace(LayerRole::Highlight, s.stack.layer(LayerRole::Lineart).clone())?;
    let rec = celdecomp::compositor::recompose(&pred)?;
    println!("psnr {:.2} dB  ssim {:.4}  lmse {:.5}", psnr(&rec, &s.source)?, ssim(&rec, &s.source)?, lmse(&s.source, &rec)?);
    let m = layer_leakage(&pred, &s.stack)?;
    for (i, role) in LayerRole::ALL.iter().enumerate() {
        println!("{:>10} {:?}", role.tag(), m[i].map(|v| (v * 1e4).round() / 1e4));
    }
    let gray = RasterImage::filled(64, 48, [0.5, 0.5, 0.5, 1.0])?;
    println!("gray vs source psnr {:.2} dB", psnr(&gray, &s.source)?);
    let r = score("damaged", &s.source, &pred, &s.stack)?;
    println!("leak_max {:.4}", r.leak_max());
    Ok(())
}
