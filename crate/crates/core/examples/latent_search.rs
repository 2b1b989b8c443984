//! The full three-phase pipeline on the synthetic benchmark with a small
//! budget. Artifacts land in a temporary directory.

use latent_tune::pipeline::{quick_config, run_all};

fn main() -> latent_tune::Result<()> {
    let dir = std::env::temp_dir().join("latent_search_example");
    let cfg = quick_config("synthetic77", &dir);
    let run = run_all(&cfg)?;
    println!("{}", run.manifest.summary);
    println!(
        "{} stable phase-1 samples, VAE best epoch {}, artifacts in {}",
        run.phase2.stable_count,
        run.phase2.report.best_epoch,
        run.dir.display()
    );
    Ok(())
}
