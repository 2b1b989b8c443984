//! TuRBO against random search on 10-d Ackley, three seeds.

use latent_tune::bench::{run_bench, BenchConfig};

fn main() -> latent_tune::Result<()> {
    let cfg = BenchConfig {
        seeds: 3,
        ..BenchConfig::default()
    };
    let result = run_bench(&cfg)?;
    for (s, (t, r)) in result.turbo.iter().zip(&result.random).enumerate() {
        println!("seed {s}: turbo {:.4}, random {:.4}", t.best, r.best);
    }
    println!("medians: turbo {:.4}, random {:.4}", result.turbo_median(), result.random_median());
    Ok(())
}
