use std::path::Path;
use std::process::Command;

use latent_tune::env::make_env;
use latent_tune::param_space::{denormalize_slice, Phase, ReplayBuffer};
use latent_tune::pipeline::{self, quick_config, Manifest, RunConfig};
use latent_tune::vae::VaeModel;

fn monotone(buffer_trace: &[latent_tune::turbo::TraceRow]) -> bool {
    buffer_trace.windows(2).all(|w| w[1].best_cost_so_far <= w[0].best_cost_so_far)
}

#[test]
fn phase3_reruns_from_manifest_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config("synthetic77", dir.path().join("first"));
    let run = pipeline::run_all(&cfg).unwrap();

    assert_eq!(run.phase1.buffer.len(), cfg.phase1_budget);
    assert_eq!(run.phase3.buffer.len(), cfg.phase3_budget);
    assert!(monotone(&run.phase1.trace) && monotone(&run.phase3.trace));

    let manifest = Manifest::load(&run.dir.join(pipeline::MANIFEST)).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.config_hash, cfg.hash());
    assert_eq!(manifest.phase3_best, *run.phase3.best());

    // Reload everything from disk and repeat phase 3 elsewhere.
    let mut again = RunConfig::load(&run.dir.join(pipeline::MANIFEST)).unwrap();
    again.out_dir = dir.path().join("second");
    let (model, train_cfg) = VaeModel::load(&run.dir.join(&manifest.files.vae_checkpoint)).unwrap();
    // The stored training config carries the derived per-phase seed.
    let stored_cfg = train_cfg.expect("checkpoint records its training config");
    assert_eq!(latent_tune::vae::TrainConfig { seed: cfg.vae.seed, ..stored_cfg }, cfg.vae);
    let p3 = pipeline::phase3(&model, &again, again.phase3_env_id()).unwrap();
    assert_eq!(p3.buffer, run.phase3.buffer);
    let stored = ReplayBuffer::load(&run.dir.join(pipeline::PHASE3_BUFFER)).unwrap();
    assert_eq!(stored, run.phase3.buffer);
}

#[test]
fn phase3_parameters_come_from_the_decoder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config("dintmpc", dir.path());
    let run = pipeline::run_all(&cfg).unwrap();
    let env = make_env("dintmpc").unwrap();
    let model = &run.phase2.model;
    for s in run.phase3.buffer.samples() {
        assert_eq!(s.phase, Phase::Phase3);
        let z = s.latent.as_ref().expect("phase-3 samples record their latent");
        assert_eq!(z.len(), model.d_low());
        assert!(z.iter().all(|v| (0.0..=1.0).contains(v)));
        let theta = denormalize_slice(&model.decode(z).unwrap(), &env.bounds).unwrap();
        assert_eq!(theta, s.theta);
        assert!(env.bounds.contains(&s.theta));
    }
    assert!(run.phase1.buffer.samples().iter().all(|s| s.latent.is_none()));
}

#[test]
fn phase1_beats_hand_tuned_cartpole_gains() {
    let dir = tempfile::tempdir().unwrap();
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/cartpole25_hand_tuned.json");
    let cfg = RunConfig {
        env_id: "cartpole25".into(),
        hand_tuned_file: Some(data),
        out_dir: dir.path().into(),
        ..RunConfig::default()
    };
    let manual = pipeline::manual_cost(&cfg).unwrap().expect("hand-tuned file configured");
    let p1 = pipeline::phase1(&cfg).unwrap();
    assert!(p1.best().stable);
    assert!(p1.best().cost < manual, "phase 1 {} vs hand-tuned {manual}", p1.best().cost);
}

#[test]
fn cli_eval_and_config_errors() {
    let exe = env!("CARGO_BIN_EXE_latent-tune");
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/cartpole25_hand_tuned.json");
    let out = Command::new(exe).args(["--env", "cartpole25", "eval"]).arg(&data).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("0: cost 6.28"), "{stdout}");
    assert!(stdout.contains("no fall"));

    let out = Command::new(exe).args(["--env", "nope", "eval"]).arg(&data).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error:"));
}

#[test]
fn cli_run_all_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("quick.json");
    let cfg = quick_config("dintmpc", dir.path().join("ignored"));
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out_dir = dir.path().join("run");
    let status = Command::new(env!("CARGO_BIN_EXE_latent-tune"))
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out-dir")
        .arg(&out_dir)
        .args(["--seed", "3", "run-all", "--phase3-budget", "40"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let manifest = Manifest::load(&out_dir.join(pipeline::MANIFEST)).unwrap();
    assert_eq!(manifest.config.master_seed, 3);
    assert_eq!(manifest.config.phase3_budget, 40);
    let p3 = ReplayBuffer::load(&out_dir.join(pipeline::PHASE3_BUFFER)).unwrap();
    assert_eq!(p3.len(), 40);
}
