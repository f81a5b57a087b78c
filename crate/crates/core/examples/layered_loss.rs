//! Evaluates the layer-wise objective and its gradient on random velocity segments.

use celdecomp::objective::{csv_row, total_loss_with_grad, Ablation, LossWeights, CSV_HEADER};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> celdecomp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut seg = || (0..64).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let pred = [seg(), seg(), seg(), seg()];
    let target = [seg(), seg(), seg(), seg()];
    let p = [&pred[0][..], &pred[1][..], &pred[2][..], &pred[3][..]];
    let t = [&target[0][..], &target[1][..], &target[2][..], &target[3][..]];
    let w = LossWeights::default();
    println!("{}", CSV_HEADER.join(","));
    for ablation in Ablation::ALL {
        let (b, grads) = total_loss_with_grad(&p, &t, &w, ablation)?;
        println!("{}  # {}", csv_row(0, &b, &w).join(","), ablation.tag());
        let norm: f64 = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        println!("    gradient norm {norm:.4}");
    }
    Ok(())
}
