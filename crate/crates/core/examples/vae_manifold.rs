//! Train the VAE on points from a curved 2-d sheet embedded in 12 dimensions
//! and compare reconstruction error with a 1-d latent.

use latent_tune::vae::{train, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> latent_tune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<Vec<f64>> = (0..800)
        .map(|_| {
            let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
            (0..12)
                .map(|i| {
                    let w = i as f64 / 11.0;
                    0.5 + 0.3 * ((1.0 - w) * (a - 0.5) + w * (b - 0.5)) + 0.1 * (3.0 * a * w).sin()
                })
                .collect()
        })
        .collect();

    let dim = samples[0].len();
    let mean: Vec<f64> = (0..dim).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / samples.len() as f64).collect();
    let variance: f64 = samples
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / samples.len() as f64;
    println!("total variance of the data {variance:.5}");

    let cfg = TrainConfig {
        kl_weight: 1e-3,
        epochs: 1500,
        patience: 100,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    for d_low in [1, 2] {
        let report = train(&samples, d_low, &cfg)?;
        let val = report.best_validation();
        println!(
            "d_low {d_low}: best epoch {:>3}, validation mse {:.5}, kl {:.4}",
            report.best_epoch, val.mse, val.kl
        );
        if d_low == 2 {
            let corners = [[0.1, 0.1], [0.1, 0.9], [0.9, 0.1], [0.9, 0.9]];
            for z in corners {
                let x = report.model.decode(&z)?;
                println!("  decode({z:?}) -> first three coords {:.3} {:.3} {:.3}", x[0], x[1], x[2]);
            }
        }
    }
    Ok(())
}
