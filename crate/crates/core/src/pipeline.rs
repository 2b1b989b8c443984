//! End-to-end orchestration: high-dimensional search, VAE training on the
//! stable samples, and latent search through the decoder.
//!
//! Every phase writes its artifacts into `RunConfig::out_dir` under fixed file
//! names, so a directory produced by [`run_all`] can be fed back into any
//! single phase. All randomness is derived from `master_seed`.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{default_latent_dim, make_env, EnvSpec};
use crate::error::{Error, Result};
use crate::gp::FitConfig;
use crate::param_space::{
    denormalize_slice, filter_stable, normalize_slice, CostSample, Phase, ReplayBuffer, DEFAULT_STABILITY_THRESHOLD,
};
use crate::turbo::{self, derive_seed, ThompsonSampler, TraceRow, TurboConfig};
use crate::vae::{self, TrainConfig, VaeModel};

pub const PHASE1_BUFFER: &str = "phase1.jsonl";
pub const PHASE1_TRACE: &str = "phase1_trace.csv";
pub const HELDOUT_BUFFER: &str = "heldout.jsonl";
pub const VAE_CHECKPOINT: &str = "vae.json";
pub const VAE_HISTORY: &str = "vae_history.csv";
pub const PHASE3_BUFFER: &str = "phase3.jsonl";
pub const PHASE3_TRACE: &str = "phase3_trace.csv";
pub const RECON_SCATTER: &str = "recon_scatter.csv";
pub const MANIFEST: &str = "manifest.json";

/// Everything that determines a run.
///
/// The `seed` fields inside `phase1`, `phase3` and `vae` are ignored; they are
/// derived from `master_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env_id: String,
    /// Environment searched in phase 3; defaults to `env_id`. Reusing a
    /// decoder on a different task only requires matching dimensions.
    pub phase3_env_id: Option<String>,
    pub phase1_budget: usize,
    pub phase3_budget: usize,
    pub m_regions: usize,
    /// Latent dimension; `None` picks the environment's default.
    pub d_low: Option<usize>,
    pub stability_threshold: f64,
    /// Share of the stable phase-1 samples kept away from VAE training for
    /// reconstruction checks.
    pub heldout_fraction: f64,
    pub vae: TrainConfig,
    pub phase1: TurboConfig,
    pub phase3: TurboConfig,
    pub master_seed: u64,
    /// Rollout seed used for every evaluation; `None` means `master_seed`.
    pub eval_seed: Option<u64>,
    pub out_dir: PathBuf,
    /// JSON file of parameter vectors (engineering units) appended to the
    /// phase-1 initial design.
    pub warm_start_file: Option<PathBuf>,
    /// JSON file with a manually tuned parameter vector, reported in the summary.
    pub hand_tuned_file: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env_id: "synthetic77".into(),
            phase3_env_id: None,
            phase1_budget: 2000,
            phase3_budget: 220,
            m_regions: 10,
            d_low: None,
            stability_threshold: DEFAULT_STABILITY_THRESHOLD,
            heldout_fraction: 0.15,
            vae: TrainConfig {
                kl_weight: 1e-3,
                ..TrainConfig::default()
            },
            phase1: TurboConfig {
                batch: 20,
                refit_interval: 50,
                max_gp_points: 128,
                thompson: ThompsonSampler::Pathwise { features: 128 },
                ..TurboConfig::default()
            },
            phase3: TurboConfig::default(),
            master_seed: 0,
            eval_seed: None,
            out_dir: PathBuf::from("runs/latest"),
            warm_start_file: None,
            hand_tuned_file: None,
        }
    }
}

impl RunConfig {
    /// Read a config file. A run manifest is accepted too, in which case the
    /// config it recorded is returned.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let config = match value.get("config") {
            Some(inner) if value.get("config_hash").is_some() => inner.clone(),
            _ => value,
        };
        Ok(serde_json::from_value(config)?)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval_seed.unwrap_or(self.master_seed)
    }

    pub fn phase3_env_id(&self) -> &str {
        self.phase3_env_id.as_deref().unwrap_or(&self.env_id)
    }

    pub fn latent_dim(&self, env: &EnvSpec) -> usize {
        self.d_low.unwrap_or_else(|| default_latent_dim(env))
    }

    /// SHA-256 of the config with `out_dir` cleared, so the same run in a
    /// different directory hashes identically.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn turbo_config(&self, base: &TurboConfig, stream: u64) -> TurboConfig {
        TurboConfig {
            regions: self.m_regions,
            seed: derive_seed(&[self.master_seed, stream]),
            ..base.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let env = make_env(&self.env_id)?;
        let target = make_env(self.phase3_env_id())?;
        if target.dim != env.dim {
            return Err(Error::DimensionMismatch {
                expected: env.dim,
                got: target.dim,
            });
        }
        let d_low = self.latent_dim(&env);
        if d_low == 0 || d_low >= env.dim {
            return Err(Error::InvalidConfig(format!(
                "latent dimension {d_low} must lie in 1..{}",
                env.dim
            )));
        }
        let p1 = self.turbo_config(&self.phase1, 1);
        if self.phase1_budget < p1.min_budget(env.dim) {
            return Err(Error::InvalidConfig(format!(
                "phase-1 budget {} is below the initial design of {} points",
                self.phase1_budget,
                p1.min_budget(env.dim)
            )));
        }
        let p3 = self.turbo_config(&self.phase3, 3);
        if self.phase3_budget < p3.min_budget(d_low) {
            return Err(Error::InvalidConfig(format!(
                "phase-3 budget {} is below the initial design of {} points",
                self.phase3_budget,
                p3.min_budget(d_low)
            )));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::InvalidConfig("heldout fraction must lie in [0, 1)".into()));
        }
        if !(self.stability_threshold > 0.0) {
            return Err(Error::InvalidConfig("stability threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter vectors stored as one vector or a list of vectors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum ThetaFile {
    Many(Vec<Vec<f64>>),
    One(Vec<f64>),
}

/// Read parameter vectors from a JSON file holding either one vector or a
/// list of vectors.
pub fn read_thetas(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(match serde_json::from_str(&text)? {
        ThetaFile::Many(v) => v,
        ThetaFile::One(v) => vec![v],
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Result of one search phase.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub buffer: ReplayBuffer,
    pub trace: Vec<TraceRow>,
}

impl PhaseOutcome {
    pub fn best(&self) -> &CostSample {
        self.buffer.best().expect("phases evaluate at least once")
    }

    fn persist(&self, dir: &Path, buffer: &str, trace: &str) -> Result<()> {
        create_dir(dir)?;
        self.buffer.save(&dir.join(buffer))?;
        write_file(&dir.join(trace), |w| turbo::write_trace_csv(&self.trace, w))
    }
}

/// Search the full parameter box and persist the buffer and trace.
pub fn phase1(config: &RunConfig) -> Result<PhaseOutcome> {
    config.validate()?;
    let env = make_env(&config.env_id)?;
    let mut turbo_cfg = config.turbo_config(&config.phase1, 1);
    if let Some(path) = &config.warm_start_file {
        for theta in read_thetas(path)? {
            turbo_cfg.warm_start.push(normalize_slice(&theta, &env.bounds)?);
        }
    }
    let seed = config.eval_seed();
    let mut buffer = ReplayBuffer::new();
    let run = turbo::run(
        |u| {
            let theta = denormalize_slice(u, &env.bounds)?;
            let r = env.evaluate(&theta, seed)?;
            buffer.push(CostSample {
                theta,
                cost: r.cost,
                phase: Phase::Phase1,
                iteration: buffer.len() + 1,
                seed,
                env_id: env.env_id.clone(),
                stable: !r.fell && r.cost < config.stability_threshold,
                latent: None,
            })?;
            Ok(r.cost)
        },
        env.dim,
        config.phase1_budget,
        &turbo_cfg,
    )?;
    let out = PhaseOutcome {
        buffer,
        trace: run.trace,
    };
    out.persist(&config.out_dir, PHASE1_BUFFER, PHASE1_TRACE)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Phase2Outcome {
    pub model: VaeModel,
    pub report: vae::TrainReport,
    /// Stable samples the VAE never saw, neither for training nor validation.
    pub heldout: ReplayBuffer,
    pub stable_count: usize,
}

/// Train the VAE on the normalized stable samples of a phase-1 buffer.
/// Persists the checkpoint, training history and held-out samples.
pub fn phase2(buffer: &ReplayBuffer, config: &RunConfig) -> Result<Phase2Outcome> {
    config.validate()?;
    let env = make_env(&config.env_id)?;
    let d_low = config.latent_dim(&env);
    let mut buffer = buffer.clone();
    let stable_thetas = filter_stable(&mut buffer, config.stability_threshold).map_err(|e| match e {
        Error::EmptyResult => Error::InsufficientData {
            got: 0,
            needed: 2 * config.vae.batch_size,
        },
        e => e,
    })?;
    let stable: Vec<&CostSample> = buffer.samples().iter().filter(|s| s.stable).collect();
    debug_assert_eq!(stable.len(), stable_thetas.len());

    let mut order: Vec<usize> = (0..stable.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[config.master_seed, 4])));
    let n_held = (stable.len() as f64 * config.heldout_fraction).round() as usize;
    let (held_idx, train_idx) = order.split_at(n_held);
    let mut held_idx = held_idx.to_vec();
    held_idx.sort_unstable();
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();

    let samples: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| normalize_slice(&stable[i].theta, &env.bounds))
        .collect::<Result<_>>()?;
    let train_cfg = TrainConfig {
        seed: derive_seed(&[config.master_seed, 2]),
        ..config.vae.clone()
    };
    let report = vae::train(&samples, d_low, &train_cfg)?;
    let heldout = held_idx.iter().map(|&i| stable[i].clone()).collect::<Result<ReplayBuffer>>()?;

    let dir = &config.out_dir;
    create_dir(dir)?;
    report.model.save(Some(&train_cfg), &dir.join(VAE_CHECKPOINT))?;
    heldout.save(&dir.join(HELDOUT_BUFFER))?;
    write_file(&dir.join(VAE_HISTORY), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["epoch", "train_total", "train_mse", "train_kl", "val_total", "val_mse", "val_kl"])?;
        for r in &report.history {
            let row = [r.train.total, r.train.mse, r.train.kl, r.validation.total, r.validation.mse, r.validation.kl];
            let mut rec = vec![r.epoch.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            csv.write_record(&rec)?;
        }
        csv.flush().map_err(|e| Error::io(VAE_HISTORY, e))
    })?;
    Ok(Phase2Outcome {
        model: report.model.clone(),
        report,
        heldout,
        stable_count: stable.len(),
    })
}

/// Search the decoder's latent box on `target_env_id`.
pub fn phase3(model: &VaeModel, config: &RunConfig, target_env_id: &str) -> Result<PhaseOutcome> {
    let env = make_env(target_env_id)?;
    if model.d_high() != env.dim {
        return Err(Error::DimensionMismatch {
            expected: env.dim,
            got: model.d_high(),
        });
    }
    let d_low = model.d_low();
    let turbo_cfg = TurboConfig {
        warm_start: Vec::new(),
        ..config.turbo_config(&config.phase3, 3)
    };
    let seed = config.eval_seed();
    let mut buffer = ReplayBuffer::new();
    let run = turbo::run(
        |z| {
            let theta = denormalize_slice(&model.decode(z)?, &env.bounds)?;
            let r = env.evaluate(&theta, seed)?;
            buffer.push(CostSample {
                theta,
                cost: r.cost,
                phase: Phase::Phase3,
                iteration: buffer.len() + 1,
                seed,
                env_id: env.env_id.clone(),
                stable: !r.fell && r.cost < config.stability_threshold,
                latent: Some(z.to_vec()),
            })?;
            Ok(r.cost)
        },
        d_low,
        config.phase3_budget,
        &turbo_cfg,
    )?;
    let out = PhaseOutcome {
        buffer,
        trace: run.trace,
    };
    out.persist(&config.out_dir, PHASE3_BUFFER, PHASE3_TRACE)?;
    Ok(out)
}

/// One held-out sample before and after an encode-decode round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconPair {
    pub original_cost: f64,
    pub transformed_cost: f64,
    pub transformed_fell: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconReport {
    pub stable_in: usize,
    pub stable_after: usize,
    /// Mean over samples of the squared unit-box reconstruction error.
    pub mse: f64,
    pub pairs: Vec<ReconPair>,
}

impl ReconReport {
    pub fn stable_fraction(&self) -> f64 {
        self.stable_after as f64 / self.stable_in.max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.pairs {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(RECON_SCATTER, e))
    }
}

/// Re-evaluate every held-out stable sample after passing it through the
/// VAE. A transformed sample counts as stable when it does not fall and its
/// cost stays below `threshold`.
pub fn recon_check(model: &VaeModel, env: &EnvSpec, heldout: &ReplayBuffer, seed: u64, threshold: f64) -> Result<ReconReport> {
    if model.d_high() != env.dim {
        return Err(Error::DimensionMismatch {
            expected: env.dim,
            got: model.d_high(),
        });
    }
    let stable: Vec<&CostSample> = heldout.samples().iter().filter(|s| s.cost < threshold).collect();
    if stable.is_empty() {
        return Err(Error::EmptyResult);
    }
    let units: Vec<Vec<f64>> = stable
        .iter()
        .map(|s| normalize_slice(&s.theta, &env.bounds))
        .collect::<Result<_>>()?;
    let recon = model.reconstruct_batch(&units)?;
    let mut pairs = Vec::with_capacity(stable.len());
    let mut sq = 0.0;
    for ((s, u), r) in stable.iter().zip(&units).zip(&recon) {
        sq += u.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let res = env.evaluate(&denormalize_slice(r, &env.bounds)?, seed)?;
        pairs.push(ReconPair {
            original_cost: s.cost,
            transformed_cost: res.cost,
            transformed_fell: res.fell,
        });
    }
    let stable_after = pairs
        .iter()
        .filter(|p| !p.transformed_fell && p.transformed_cost < threshold)
        .count();
    Ok(ReconReport {
        stable_in: stable.len(),
        stable_after,
        mse: sq / stable.len() as f64,
        pairs,
    })
}

/// Headline numbers of a run, laid out like a manual / phase 1 / phase 3
/// comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub env_id: String,
    pub phase3_env_id: String,
    pub d_low: usize,
    pub manual_cost: Option<f64>,
    pub phase1_best: f64,
    pub phase1_evals: usize,
    pub stable_samples: usize,
    pub heldout_samples: usize,
    pub phase3_best: f64,
    pub phase3_evals: usize,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let manual = self.manual_cost.map_or_else(|| "-".to_string(), |c| format!("{c:.4}"));
        writeln!(f, "{:<24} {:>12} {:>12} {:>12}", "environment", "manual", "phase 1", "phase 3")?;
        writeln!(
            f,
            "{:<24} {:>12} {:>12.4} {:>12.4}",
            self.env_id, manual, self.phase1_best, self.phase3_best
        )?;
        writeln!(f, "{:<24} {:>12} {:>12} {:>12}", "evaluations", "-", self.phase1_evals, self.phase3_evals)?;
        write!(
            f,
            "latent dim {}, {} stable samples ({} held out), phase 3 on {}",
            self.d_low, self.stable_samples, self.heldout_samples, self.phase3_env_id
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactFiles {
    pub phase1_buffer: String,
    pub phase1_trace: String,
    pub heldout_buffer: String,
    pub vae_checkpoint: String,
    pub vae_history: String,
    pub phase3_buffer: String,
    pub phase3_trace: String,
}

impl Default for ArtifactFiles {
    fn default() -> Self {
        Self {
            phase1_buffer: PHASE1_BUFFER.into(),
            phase1_trace: PHASE1_TRACE.into(),
            heldout_buffer: HELDOUT_BUFFER.into(),
            vae_checkpoint: VAE_CHECKPOINT.into(),
            vae_history: VAE_HISTORY.into(),
            phase3_buffer: PHASE3_BUFFER.into(),
            phase3_trace: PHASE3_TRACE.into(),
        }
    }
}

/// Written next to the artifacts; holds the full config, so it can be passed
/// back as `--config` to reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    /// File names relative to the manifest's directory.
    pub files: ArtifactFiles,
    pub phase1_best: CostSample,
    pub phase3_best: CostSample,
    pub summary: Summary,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub phase1: PhaseOutcome,
    pub phase2: Phase2Outcome,
    pub phase3: PhaseOutcome,
    pub manifest: Manifest,
}

/// Cost of the first vector in the configured hand-tuned file.
pub fn manual_cost(config: &RunConfig) -> Result<Option<f64>> {
    let Some(path) = &config.hand_tuned_file else {
        return Ok(None);
    };
    let env = make_env(&config.env_id)?;
    let theta = read_thetas(path)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidConfig(format!("{} holds no parameter vector", path.display())))?;
    Ok(Some(env.evaluate(&theta, config.eval_seed())?.cost))
}

/// Phase 1, phase 2 and phase 3 in sequence, then the manifest. Artifacts of
/// completed phases stay on disk when a later phase fails.
pub fn run_all(config: &RunConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let manual = manual_cost(config)?;
    let p1 = phase1(config)?;
    let p2 = phase2(&p1.buffer, config)?;
    let p3 = phase3(&p2.model, config, config.phase3_env_id())?;
    let summary = Summary {
        env_id: config.env_id.clone(),
        phase3_env_id: config.phase3_env_id().to_string(),
        d_low: p2.model.d_low(),
        manual_cost: manual,
        phase1_best: p1.best().cost,
        phase1_evals: p1.buffer.len(),
        stable_samples: p2.stable_count,
        heldout_samples: p2.heldout.len(),
        phase3_best: p3.best().cost,
        phase3_evals: p3.buffer.len(),
    };
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config.hash(),
        config: config.clone(),
        files: ArtifactFiles::default(),
        phase1_best: p1.best().clone(),
        phase3_best: p3.best().clone(),
        summary,
    };
    write_file(&config.out_dir.join(MANIFEST), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        w.write_all(b"\n").map_err(|e| Error::io(MANIFEST, e))
    })?;
    Ok(RunArtifacts {
        dir: config.out_dir.clone(),
        phase1: p1,
        phase2: p2,
        phase3: p3,
        manifest,
    })
}

/// Small budgets and short training for smoke runs and tests.
pub fn quick_config(env_id: &str, out_dir: impl Into<PathBuf>) -> RunConfig {
    RunConfig {
        env_id: env_id.into(),
        phase1_budget: 300,
        phase3_budget: 60,
        m_regions: 3,
        vae: TrainConfig {
            epochs: 60,
            patience: 20,
            batch_size: 32,
            ..RunConfig::default().vae
        },
        phase1: TurboConfig {
            n_init_per_region: Some(10),
            fit: FitConfig {
                iterations: 20,
                ..FitConfig::default()
            },
            ..RunConfig::default().phase1
        },
        phase3: TurboConfig {
            n_init_per_region: Some(5),
            ..TurboConfig::default()
        },
        out_dir: out_dir.into(),
        ..RunConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_ignores_out_dir_only() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = RunConfig { master_seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn validation_rejects_bad_budgets_and_dims() {
        let ok = RunConfig::default();
        ok.validate().unwrap();
        let small = RunConfig { phase1_budget: 10, ..ok.clone() };
        assert!(matches!(small.validate(), Err(Error::InvalidConfig(_))));
        let wide = RunConfig { d_low: Some(77), ..ok.clone() };
        assert!(matches!(wide.validate(), Err(Error::InvalidConfig(_))));
        let cross = RunConfig { phase3_env_id: Some("cartpole25".into()), ..ok.clone() };
        assert!(matches!(cross.validate(), Err(Error::DimensionMismatch { .. })));
        let unknown = RunConfig { env_id: "walker".into(), ..ok };
        assert!(matches!(unknown.validate(), Err(Error::UnknownEnvironment(_))));
    }

    #[test]
    fn phase1_budget_accounting() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            phase1_budget: 10,
            m_regions: 1,
            phase1: TurboConfig {
                n_init_per_region: Some(4),
                ..RunConfig::default().phase1
            },
            out_dir: dir.path().into(),
            ..RunConfig::default()
        };
        let out = phase1(&cfg).unwrap();
        assert_eq!(out.buffer.len(), 10);
        assert_eq!(out.trace.len(), 10);
        assert!(out.buffer.samples().iter().all(|s| s.latent.is_none() && s.phase == Phase::Phase1));
        let reread = ReplayBuffer::load(&dir.path().join(PHASE1_BUFFER)).unwrap();
        assert_eq!(reread, out.buffer);
    }

    #[test]
    fn theta_files_accept_one_or_many() {
        let dir = tempfile::tempdir().unwrap();
        let one = dir.path().join("one.json");
        fs::write(&one, "[1.0, 2.0]").unwrap();
        assert_eq!(read_thetas(&one).unwrap(), vec![vec![1.0, 2.0]]);
        let many = dir.path().join("many.json");
        fs::write(&many, "[[1.0], [2.0]]").unwrap();
        assert_eq!(read_thetas(&many).unwrap().len(), 2);
    }

    #[test]
    fn config_loads_from_manifest_or_plain_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { master_seed: 9, ..RunConfig::default() };
        let plain = dir.path().join("c.json");
        fs::write(&plain, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&plain).unwrap(), cfg);
        let partial = dir.path().join("p.json");
        fs::write(&partial, r#"{"env_id": "dintmpc", "phase3_budget": 100}"#).unwrap();
        let p = RunConfig::load(&partial).unwrap();
        assert_eq!((p.env_id.as_str(), p.phase3_budget, p.phase1_budget), ("dintmpc", 100, 2000));
    }

    #[test]
    fn phase2_reports_insufficient_data() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { out_dir: dir.path().into(), ..RunConfig::default() };
        let buffer: ReplayBuffer = (0..20)
            .map(|i| CostSample {
                theta: vec![0.0; 77],
                cost: 150.0 - i as f64,
                phase: Phase::Phase1,
                iteration: i,
                seed: 0,
                env_id: "synthetic77".into(),
                stable: false,
                latent: None,
            })
            .collect::<Result<_>>()
            .unwrap();
        assert!(matches!(phase2(&buffer, &cfg), Err(Error::InsufficientData { got: 0, .. })));
    }
}
