//! Fit a Matérn-5/2 GP to noisy samples of a 1-d function and compare the
//! posterior with the truth on a grid.

use latent_tune::gp::{FitConfig, GpModel, KernelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn truth(x: f64) -> f64 {
    (6.0 * x).sin() + 0.5 * x
}

fn main() -> latent_tune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<Vec<f64>> = (0..15).map(|_| vec![rng.random::<f64>()]).collect();
    let y: Vec<f64> = x.iter().map(|p| truth(p[0]) + 0.05 * (rng.random::<f64>() - 0.5)).collect();

    let gp = GpModel::fit(&x, &y, &KernelParams::default_for(1), &FitConfig::default())?;
    let p = gp.params();
    println!(
        "lengthscale {:.3}, signal variance {:.3}, noise variance {:.2e}, lml {:.3}",
        p.lengthscales()[0],
        p.signal_variance(),
        p.noise_variance(),
        gp.log_marginal_likelihood()
    );

    let grid: Vec<Vec<f64>> = (0..=10).map(|i| vec![i as f64 / 10.0]).collect();
    let (mean, std) = gp.predict(&grid)?;
    println!("{:>5} {:>9} {:>9} {:>9}", "x", "truth", "mean", "std");
    for ((q, m), s) in grid.iter().zip(&mean).zip(&std) {
        println!("{:>5.2} {:>9.4} {:>9.4} {:>9.4}", q[0], truth(q[0]), m, s);
    }
    Ok(())
}
