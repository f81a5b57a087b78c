//! Recomposes a layer stack, converts the shadow to Multiply and recolors the flats.

use celdecomp::compositor::{
    recompose, swap_flat_color, to_multiply_lighten, BlendMode, LayerRole, RasterImage, QUANT_STEP,
};
use celdecomp::synthgen::{generate_sample, SampleSpec};

fn main() -> celdecomp::Result<()> {
    let sample = generate_sample(&SampleSpec::with_seed(7))?;
    let stack = &sample.stack;
    let normal = recompose(stack)?;
    println!("recompose vs source: max diff {:.2e}", normal.max_abs_diff(&sample.source));

    let converted = to_multiply_lighten(stack)?;
    assert_eq!(converted.mode(LayerRole::Shadow), BlendMode::Multiply);
    let diff = recompose(&converted)?.max_abs_diff(&normal);
    println!("multiply/lighten form vs normal form: max diff {diff:.2e} (quantum {QUANT_STEP:.2e})");

    // Swap every flat fill for its channel-rotated color; shading stays put.
    let flat = stack.layer(LayerRole::FlatColor);
    let (h, w) = flat.dims();
    let rotated = RasterImage::from_fn(h, w, |y, x| {
        let [r, g, b, a] = flat.pixel(y, x);
        [g, b, r, a]
    });
    let recolored = swap_flat_color(stack, &rotated)?;
    println!("recolored image differs from source by up to {:.3}", recolored.max_abs_diff(&normal));
    Ok(())
}
