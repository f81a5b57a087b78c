//! Generates a small synthetic layered dataset and validates every sample.
//!
//! cargo run --release --example synth_dataset -- /tmp/celdecomp-data

use celdecomp::synthgen::{generate_dataset, validate_sample, SampleSpec};

fn main() -> celdecomp::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-data".into());
    let out = std::path::Path::new(&out);
    let index = generate_dataset(6, 0, out, &SampleSpec::default().sized(64, 48))?;
    println!("{} samples in {}", index.samples.len(), out.display());
    for dir in index.sample_dirs(out) {
        let report = validate_sample(&dir)?;
        println!("{report}");
    }
    Ok(())
}
