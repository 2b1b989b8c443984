//! Minimize a shifted 8-d Rosenbrock valley with multi-region TuRBO and show
//! how the trust regions evolve.

use latent_tune::turbo::{self, TurboConfig};

fn rosenbrock(u: &[f64]) -> f64 {
    // Map the unit box to [-2, 2]^d.
    let x: Vec<f64> = u.iter().map(|v| 4.0 * v - 2.0).collect();
    x.windows(2).map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2)).sum()
}

fn main() -> latent_tune::Result<()> {
    let cfg = TurboConfig {
        regions: 3,
        batch: 4,
        seed: 7,
        ..TurboConfig::default()
    };
    let run = turbo::run(|u| Ok(rosenbrock(u)), 8, 240, &cfg)?;
    for row in run.trace.iter().step_by(24) {
        println!(
            "iter {:>4}  region {}  side {:.3}  best {:.4}",
            row.iteration, row.region_id, row.side_length, row.best_cost_so_far
        );
    }
    let x: Vec<String> = run.best_x.iter().map(|v| format!("{:.3}", 4.0 * v - 2.0)).collect();
    println!("best cost {:.5} at [{}]", run.best_cost, x.join(", "));
    Ok(())
}
