use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latent_tune::bench::{run_bench, BenchConfig, TestFunction};
use latent_tune::env::{make_env, write_observations_csv};
use latent_tune::param_space::ReplayBuffer;
use latent_tune::pipeline::{self, RunConfig};
use latent_tune::vae::VaeModel;
use latent_tune::{Error, Result};

#[derive(Parser)]
#[command(name = "latent-tune", version, about = "Controller tuning through a learned latent search space")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config, or a manifest from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Evaluation budget of the phase being run.
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[arg(long, global = true)]
    regions: Option<usize>,
    #[arg(long, global = true)]
    latent_dim: Option<usize>,
    #[arg(long, global = true)]
    env: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Search the full parameter box.
    Phase1,
    /// Train the VAE on the stable phase-1 samples.
    TrainVae {
        /// Phase-1 buffer; defaults to the one in the output directory.
        #[arg(long)]
        buffer: Option<PathBuf>,
    },
    /// Search the latent box through the decoder.
    Phase3 {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Environment to tune; defaults to the configured phase-3 environment.
        #[arg(long)]
        target_env: Option<String>,
    },
    /// Phase 1, VAE training and phase 3 in sequence.
    RunAll {
        #[arg(long)]
        phase3_budget: Option<usize>,
    },
    /// Evaluate parameter vectors from a JSON file.
    Eval {
        theta_file: PathBuf,
        /// Write the per-step trace of the first vector to this CSV file.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Re-evaluate held-out stable samples after an encode-decode round trip.
    ReconCheck {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// TuRBO against random search on a test function.
    Bench {
        #[arg(long, default_value = "ackley")]
        function: String,
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(r) = self.regions {
            cfg.m_regions = r;
        }
        if let Some(d) = self.latent_dim {
            cfg.d_low = Some(d);
        }
        if let Some(e) = &self.env {
            cfg.env_id = e.clone();
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Phase1 => {
            let mut cfg = common.run_config()?;
            if let Some(b) = common.budget {
                cfg.phase1_budget = b;
            }
            let out = pipeline::phase1(&cfg)?;
            let best = out.best();
            println!("phase 1: {} evaluations, best cost {:.6} at iteration {}", out.buffer.len(), best.cost, best.iteration);
            println!("artifacts in {}", cfg.out_dir.display());
        }
        Command::TrainVae { buffer } => {
            let cfg = common.run_config()?;
            let path = buffer.unwrap_or_else(|| cfg.out_dir.join(pipeline::PHASE1_BUFFER));
            let out = pipeline::phase2(&ReplayBuffer::load(&path)?, &cfg)?;
            let val = out.report.best_validation();
            println!(
                "trained on {} stable samples ({} held out); best epoch {}, validation mse {:.6}, kl {:.4}",
                out.stable_count - out.heldout.len(),
                out.heldout.len(),
                out.report.best_epoch,
                val.mse,
                val.kl
            );
        }
        Command::Phase3 { checkpoint, target_env } => {
            let mut cfg = common.run_config()?;
            if let Some(b) = common.budget {
                cfg.phase3_budget = b;
            }
            let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join(pipeline::VAE_CHECKPOINT));
            let (model, _) = VaeModel::load(&path)?;
            let target = target_env.unwrap_or_else(|| cfg.phase3_env_id().to_string());
            let out = pipeline::phase3(&model, &cfg, &target)?;
            let best = out.best();
            println!("phase 3 on {target}: {} evaluations, best cost {:.6} (fell: {})", out.buffer.len(), best.cost, !best.stable);
        }
        Command::RunAll { phase3_budget } => {
            let mut cfg = common.run_config()?;
            if let Some(b) = common.budget {
                cfg.phase1_budget = b;
            }
            if let Some(b) = phase3_budget {
                cfg.phase3_budget = b;
            }
            let out = pipeline::run_all(&cfg)?;
            println!("{}", out.manifest.summary);
            println!("config hash {}", out.manifest.config_hash);
        }
        Command::Eval { theta_file, trace } => {
            let cfg = common.run_config()?;
            let env = make_env(&cfg.env_id)?;
            let thetas = pipeline::read_thetas(&theta_file)?;
            for (i, theta) in thetas.iter().enumerate() {
                let r = env.rollout(theta, cfg.eval_seed(), i == 0 && trace.is_some())?;
                let fall = r.fall_step.map_or_else(|| "no fall".to_string(), |s| format!("fell at step {s}"));
                println!("{i}: cost {:.6}, {fall}", r.cost);
                if let (0, Some(path)) = (i, &trace) {
                    let file = File::create(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                    write_observations_csv(&r.observations, BufWriter::new(file))?;
                }
            }
        }
        Command::ReconCheck { checkpoint, heldout } => {
            let cfg = common.run_config()?;
            let (model, _) = VaeModel::load(&checkpoint.unwrap_or_else(|| cfg.out_dir.join(pipeline::VAE_CHECKPOINT)))?;
            let held = ReplayBuffer::load(&heldout.unwrap_or_else(|| cfg.out_dir.join(pipeline::HELDOUT_BUFFER)))?;
            let env = make_env(&cfg.env_id)?;
            let report = pipeline::recon_check(&model, &env, &held, cfg.eval_seed(), cfg.stability_threshold)?;
            fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io { path: cfg.out_dir.clone(), source: e })?;
            let path = cfg.out_dir.join(pipeline::RECON_SCATTER);
            let file = File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            report.write_csv(BufWriter::new(file))?;
            println!(
                "{} of {} held-out stable samples stay stable after reconstruction ({:.1}%), reconstruction mse {:.6}",
                report.stable_after,
                report.stable_in,
                100.0 * report.stable_fraction(),
                report.mse
            );
            println!("scatter written to {}", path.display());
        }
        Command::Bench { function, dim, seeds } => {
            let mut cfg = BenchConfig {
                function: TestFunction::parse(&function)?,
                dim,
                seeds,
                ..BenchConfig::default()
            };
            if let Some(b) = common.budget {
                cfg.budget = b;
            }
            if let Some(r) = common.regions {
                cfg.turbo.regions = r;
            }
            let result = run_bench(&cfg)?;
            println!("{:>6} {:>12} {:>12}", "seed", "turbo", "random");
            for (s, (t, r)) in result.turbo.iter().zip(&result.random).enumerate() {
                println!("{s:>6} {:>12.4} {:>12.4}", t.best, r.best);
            }
            println!("{:>6} {:>12.4} {:>12.4}", "median", result.turbo_median(), result.random_median());
        }
    }
    Ok(())
}
