//! Train the decoder on cart-pole data at the nominal speed, then search its
//! latent space for gains that track a faster reference.

use latent_tune::pipeline::{phase1, phase2, phase3, quick_config};

fn main() -> latent_tune::Result<()> {
    let cfg = quick_config("cartpole25", std::env::temp_dir().join("decoder_reuse_example"));
    let p1 = phase1(&cfg)?;
    let p2 = phase2(&p1.buffer, &cfg)?;
    println!("nominal speed: best cost {:.4}, {} stable samples", p1.best().cost, p2.stable_count);

    let p3 = phase3(&p2.model, &cfg, "cartpole25@0.8")?;
    let best = p3.best();
    let stable = p3.buffer.samples().iter().filter(|s| s.stable).count();
    println!(
        "0.8 m/s through the decoder: best cost {:.4}, {stable} of {} samples stable",
        best.cost,
        p3.buffer.len()
    );
    Ok(())
}
