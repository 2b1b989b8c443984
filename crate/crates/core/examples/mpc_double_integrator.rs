//! Compare a few cost-weight schedules for the receding-horizon actor on the
//! double integrator.

use latent_tune::env::{make_env, MpcActorConfig};

fn main() -> latent_tune::Result<()> {
    let env = make_env("dintmpc")?;
    let schedules = [
        ("zero weights", [0.0, 0.0, 0.0, 0.0, 0.0]),
        ("position heavy", [8.0, 1.0, 0.1, 8.0, 0.0]),
        ("balanced", [3.0, 3.0, 1.0, 3.0, 3.0]),
        ("effort heavy", [0.5, 0.5, 9.0, 0.5, 0.5]),
    ];
    for (name, w) in schedules {
        let theta = w.repeat(5);
        let r = env.evaluate(&theta, 0)?;
        println!("{name:<15} cost {:.4}", r.cost);
    }

    // Feedback gain on [position error, velocity error] for one weight set.
    let k = MpcActorConfig::default().gain([5.0, 1.0], 0.5, [5.0, 1.0]);
    println!("gain for Q = diag(5, 1), R = 0.5: [{:.4}, {:.4}]", k[0], k[1]);
    Ok(())
}
