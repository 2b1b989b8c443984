//! Roll out the hand-tuned cart-pole schedule on a few initial conditions and
//! write the per-step trace of the first one.

use std::fs::File;
use std::io::BufWriter;

use latent_tune::env::{make_env, write_observations_csv};

fn main() -> latent_tune::Result<()> {
    let env = make_env("cartpole25")?;
    let theta = [0.9, 2.1, 30.0, 7.5, 0.0].repeat(5);
    for seed in 0..4 {
        let r = env.rollout(&theta, seed, seed == 0)?;
        println!("seed {seed}: cost {:.4}, fell {}", r.cost, r.fell);
        if seed == 0 {
            let path = std::env::temp_dir().join("cartpole_trace.csv");
            let file = File::create(&path).expect("trace file");
            write_observations_csv(&r.observations, BufWriter::new(file))?;
            println!("  {} steps written to {}", r.observations.len(), path.display());
        }
    }

    // The same gains track a much faster reference poorly.
    let fast = make_env("cartpole25@1.5")?;
    let r = fast.evaluate(&theta, 0)?;
    println!("at 1.5 m/s: cost {:.4}, fell {}", r.cost, r.fell);
    Ok(())
}
