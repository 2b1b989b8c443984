//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! line per criterion and exits non-zero if any of them fails.
//!
//! Runtime is dominated by the five synthetic77 runs (about a minute each).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use latent_tune::bench::{median, run_bench, BenchConfig};
use latent_tune::env::{cartpole_tracking, double_integrator_mpc, make_env, CartPoleConfig, DoubleIntegratorConfig};
use latent_tune::gp::{log_marginal_likelihood, FitConfig, GpModel, KernelParams};
use latent_tune::param_space::ReplayBuffer;
use latent_tune::pipeline::{self, PhaseOutcome, RunConfig};
use latent_tune::turbo::TraceRow;
use latent_tune::vae::VaeModel;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn work_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

/// Every best-so-far trace produced by the suite, checked by criterion 10.
#[derive(Default)]
struct Traces(Vec<(String, Vec<f64>)>);

impl Traces {
    fn add(&mut self, name: impl Into<String>, rows: &[TraceRow]) {
        self.0.push((name.into(), rows.iter().map(|r| r.best_cost_so_far).collect()));
    }

    fn add_phase(&mut self, name: &str, p: &PhaseOutcome) {
        self.add(name, &p.trace);
    }
}

struct Synthetic {
    phase1_best: Vec<f64>,
    phase3_best: Vec<f64>,
    phase3_evals: Vec<usize>,
    first_phase1: ReplayBuffer,
}

fn synthetic_runs(traces: &mut Traces) -> Synthetic {
    let mut s = Synthetic {
        phase1_best: Vec::new(),
        phase3_best: Vec::new(),
        phase3_evals: Vec::new(),
        first_phase1: ReplayBuffer::new(),
    };
    for seed in 0..5 {
        let cfg = RunConfig {
            env_id: "synthetic77".into(),
            master_seed: seed,
            out_dir: work_dir(&format!("synthetic77_seed{seed}")),
            ..RunConfig::default()
        };
        let run = pipeline::run_all(&cfg).expect("synthetic77 run");
        traces.add_phase(&format!("synthetic77 seed {seed} phase 1"), &run.phase1);
        traces.add_phase(&format!("synthetic77 seed {seed} phase 3"), &run.phase3);
        s.phase1_best.push(run.phase1.best().cost);
        s.phase3_best.push(run.phase3.best().cost);
        s.phase3_evals.push(run.phase3.buffer.len());
        if seed == 0 {
            s.first_phase1 = run.phase1.buffer.clone();
        }
    }
    s
}

fn criterion_1(s: &Synthetic) -> Outcome {
    let p1 = median(&s.phase1_best);
    let p3 = median(&s.phase3_best);
    let ratios: Vec<String> = s
        .phase1_best
        .iter()
        .zip(&s.phase3_best)
        .map(|(a, b)| format!("{:.2}", b / a))
        .collect();
    let within_budget = s.phase3_evals.iter().all(|&n| n <= 220);
    outcome(
        p3 <= 1.1 * p1 && within_budget,
        format!(
            "median phase-3 best {p3:.4} vs 1.1 x median phase-1 best {:.4} (per-seed ratios {}; phase-3 evals {:?})",
            1.1 * p1,
            ratios.join(", "),
            s.phase3_evals
        ),
    )
}

fn criterion_2(traces: &mut Traces) -> Outcome {
    let result = run_bench(&BenchConfig::default()).expect("bench");
    for (i, r) in result.turbo.iter().enumerate() {
        traces.add(format!("ackley turbo seed {i}"), &r.trace);
    }
    for (i, r) in result.random.iter().enumerate() {
        traces.add(format!("ackley random seed {i}"), &r.trace);
    }
    let (t, r) = (result.turbo_median(), result.random_median());
    outcome(t < r, format!("10-d Ackley, 300 evals, 10 seeds: turbo median {t:.4}, random median {r:.4}"))
}

fn cartpole_config(seed: u64, name: &str) -> RunConfig {
    RunConfig {
        env_id: "cartpole25".into(),
        master_seed: seed,
        heldout_fraction: 0.3,
        out_dir: work_dir(name),
        ..RunConfig::default()
    }
}

fn criterion_3(traces: &mut Traces) -> (Outcome, VaeModel) {
    let cfg = cartpole_config(0, "cartpole25_recon");
    let p1 = pipeline::phase1(&cfg).expect("phase 1");
    traces.add_phase("cartpole25 recon phase 1", &p1);
    let p2 = pipeline::phase2(&p1.buffer, &cfg).expect("phase 2");
    let env = make_env("cartpole25").unwrap();
    let report = pipeline::recon_check(&p2.model, &env, &p2.heldout, cfg.eval_seed(), cfg.stability_threshold).expect("recon");
    let csv = cfg.out_dir.join(pipeline::RECON_SCATTER);
    report
        .write_csv(std::fs::File::create(&csv).expect("scatter file"))
        .expect("scatter csv");
    let frac = report.stable_fraction();
    (
        outcome(
            report.stable_in >= 200 && frac >= 0.9,
            format!(
                "{} of {} held-out stable samples stay stable ({:.1}%), scatter at {}",
                report.stable_after,
                report.stable_in,
                100.0 * frac,
                csv.display()
            ),
        ),
        p2.model,
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 10 {
        attempts += 1;
        let d_high = rng.random_range(6..16);
        let d_low = rng.random_range(2..4);
        let model = VaeModel::new(d_high, d_low, rng.random_range(0.1..1.0), rng.random()).unwrap();
        let batch: Vec<Vec<f64>> = (0..rng.random_range(4..12))
            .map(|_| (0..d_high).map(|_| rng.random::<f64>()).collect())
            .collect();
        // A central difference straddling a ReLU kink measures the wrong slope.
        if model.relu_margin(&batch).unwrap() <= 1e-3 {
            continue;
        }
        worst = worst.max(model.gradient_check(&batch).unwrap());
        checked += 1;
    }
    outcome(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {checked} model/batch pairs ({attempts} drawn, FD step 1e-5)"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<Vec<f64>> = (0..25).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let y: Vec<f64> = x.iter().map(|p| (4.0 * p[0]).sin() + p[1] * p[2]).collect();
    let params = KernelParams::isotropic(3, 0.4, 1.0, 1e-8);
    let gp = GpModel::condition(&x, &y, &params).unwrap();
    let (mean, _) = gp.predict(&x).unwrap();
    let interp = mean.iter().zip(&y).map(|(m, t)| (m - t).abs()).fold(0.0, f64::max);

    // Two points, closed form: standardized targets are ±1, so the posterior
    // mean at x* is k*ᵀ K⁻¹ y with a 2×2 inverse.
    let (a, b) = (vec![0.2], vec![0.7]);
    let two = KernelParams::isotropic(1, 0.3, 1.0, 1e-6);
    let gp2 = GpModel::condition(&[a.clone(), b.clone()], &[1.0, 3.0], &two).unwrap();
    let m52 = |r: f64| {
        let s = 5f64.sqrt() * r;
        (1.0 + s + 5.0 * r * r / 3.0) * (-s).exp()
    };
    let k12 = m52(0.5 / 0.3);
    let k11 = 1.0 + 1e-6;
    let det = k11 * k11 - k12 * k12;
    let (y1, y2) = (-1.0, 1.0);
    let (w1, w2) = ((k11 * y1 - k12 * y2) / det, (k11 * y2 - k12 * y1) / det);
    let mut two_err: f64 = 0.0;
    for q in [0.0, 0.35, 0.9] {
        let (ka, kb) = (m52((q - 0.2f64).abs() / 0.3), m52((q - 0.7f64).abs() / 0.3));
        let expected = 2.0 + (ka * w1 + kb * w2);
        let (m, _) = gp2.predict(&[vec![q]]).unwrap();
        two_err = two_err.max((m[0] - expected).abs());
    }

    let fitted = GpModel::fit(&x, &y, &KernelParams::default_for(3), &FitConfig::default()).unwrap();
    let p = fitted.params().clone();
    let ys: Vec<f64> = y.iter().map(|v| (v - fitted.y_mean()) / fitted.y_std()).collect();
    let (_, grad) = log_marginal_likelihood(&x, &ys, &p).unwrap();
    let mut flat = p.log_lengthscales.clone();
    flat.push(p.log_signal_variance);
    flat.push(p.log_noise_variance);
    let h = 1e-5;
    let mut grad_err: f64 = 0.0;
    for i in 0..flat.len() {
        let at = |delta: f64| {
            let mut v = flat.clone();
            v[i] += delta;
            let q = KernelParams {
                log_lengthscales: v[..3].to_vec(),
                log_signal_variance: v[3],
                log_noise_variance: v[4],
            };
            log_marginal_likelihood(&x, &ys, &q).unwrap().0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        grad_err = grad_err.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1.0));
    }
    outcome(
        interp < 1e-6 && two_err < 1e-10 && grad_err < 1e-4,
        format!("interpolation {interp:.1e}, two-point oracle {two_err:.1e}, LML gradient {grad_err:.1e}"),
    )
}

fn criterion_6(buffer: &ReplayBuffer) -> Outcome {
    let env = make_env("synthetic77").unwrap();
    let mut mse = Vec::new();
    for d_low in [5, 2] {
        let cfg = RunConfig {
            d_low: Some(d_low),
            out_dir: work_dir(&format!("synthetic77_dlow{d_low}")),
            ..RunConfig::default()
        };
        let p2 = pipeline::phase2(buffer, &cfg).expect("phase 2");
        let report = pipeline::recon_check(&p2.model, &env, &p2.heldout, cfg.eval_seed(), cfg.stability_threshold).unwrap();
        mse.push(report.mse);
    }
    outcome(
        mse[0] < 1e-2 && mse[1] > mse[0],
        format!("held-out reconstruction mse: d_low 5 -> {:.4e}, d_low 2 -> {:.4e}", mse[0], mse[1]),
    )
}

fn criterion_7() -> Outcome {
    let fallen = cartpole_tracking(CartPoleConfig {
        initial_angle: (0.6, 0.6),
        ..CartPoleConfig::default()
    })
    .unwrap();
    let r = fallen.evaluate(&[0.9, 2.1, 30.0, 7.5, 0.0].repeat(5), 0).unwrap();
    let tracking = double_integrator_mpc(DoubleIntegratorConfig {
        initial_position: 0.0,
        initial_velocity: 0.5,
        ..DoubleIntegratorConfig::default()
    })
    .unwrap();
    let t = tracking.evaluate(&[0.0; 25], 0).unwrap();
    let synthetic = make_env("synthetic77").unwrap();
    let latent_tune::env::Dynamics::Synthetic(model) = &synthetic.dynamics else {
        unreachable!()
    };
    let opt = synthetic.evaluate_unit(model.offset(), 0).unwrap();
    outcome(
        r.cost == 100.0 && r.fall_step == Some(0) && t.cost == 0.0 && opt.cost == 0.0,
        format!(
            "fall at step 0 -> {}, perfect tracking -> {}, synthetic optimum -> {}",
            r.cost, t.cost, opt.cost
        ),
    )
}

fn criterion_8(traces: &mut Traces) -> Outcome {
    let a = pipeline::quick_config("synthetic77", work_dir("determinism_a"));
    let b = RunConfig {
        out_dir: work_dir("determinism_b"),
        ..a.clone()
    };
    let ra = pipeline::run_all(&a).expect("first run");
    let rb = pipeline::run_all(&b).expect("second run");
    traces.add_phase("determinism phase 1", &ra.phase1);
    traces.add_phase("determinism phase 3", &ra.phase3);
    let files = [
        pipeline::PHASE1_BUFFER,
        pipeline::PHASE1_TRACE,
        pipeline::HELDOUT_BUFFER,
        pipeline::VAE_CHECKPOINT,
        pipeline::PHASE3_BUFFER,
        pipeline::PHASE3_TRACE,
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.out_dir.join(f)).unwrap() != std::fs::read(b.out_dir.join(f)).unwrap())
        .collect();
    let same_hash = ra.manifest.config_hash == rb.manifest.config_hash;
    outcome(
        differing.is_empty() && same_hash,
        format!("{} artifacts compared, differing: {:?}, config hashes equal: {same_hash}", files.len(), differing),
    )
}

fn criterion_9(first_model: VaeModel, traces: &mut Traces) -> Outcome {
    let mut fell = Vec::new();
    let mut bests = Vec::new();
    for seed in 0..5 {
        let model = if seed == 0 {
            first_model.clone()
        } else {
            let cfg = cartpole_config(seed, &format!("cartpole25_task_seed{seed}"));
            let p1 = pipeline::phase1(&cfg).expect("phase 1");
            traces.add_phase(&format!("cartpole25 seed {seed} phase 1"), &p1);
            pipeline::phase2(&p1.buffer, &cfg).expect("phase 2").model
        };
        let cfg = cartpole_config(seed, &format!("cartpole25_v08_seed{seed}"));
        let p3 = pipeline::phase3(&model, &cfg, "cartpole25@0.8").expect("phase 3");
        traces.add_phase(&format!("cartpole25@0.8 seed {seed} phase 3"), &p3);
        let best = p3.best();
        // Re-evaluate to read the fall flag rather than trusting the cost.
        let env = make_env("cartpole25@0.8").unwrap();
        fell.push(env.evaluate(&best.theta, best.seed).unwrap().fell);
        bests.push(best.cost);
    }
    let stable = fell.iter().filter(|f| !**f).count();
    outcome(
        stable >= 3,
        format!("best sample stable on {stable} of 5 seeds at v = 0.8, best costs {bests:.2?}"),
    )
}

fn criterion_10(traces: &Traces) -> Outcome {
    let bad: Vec<&str> = traces
        .0
        .iter()
        .filter(|(_, t)| t.windows(2).any(|w| w[1] > w[0]))
        .map(|(n, _)| n.as_str())
        .collect();
    let rows: usize = traces.0.iter().map(|(_, t)| t.len()).sum();
    outcome(
        bad.is_empty() && !traces.0.is_empty(),
        format!("{} traces, {rows} rows, non-monotone: {bad:?}", traces.0.len()),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut traces = Traces::default();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:>2} {:<28} {}  {}  [{:.0}s]",
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        results.push((n, name, o));
    };

    report(4, "vae gradient check", criterion_4());
    report(5, "gp correctness", criterion_5());
    report(7, "fall-penalty contract", criterion_7());
    report(8, "determinism", criterion_8(&mut traces));
    report(2, "turbo vs random search", criterion_2(&mut traces));
    let (c3, model) = criterion_3(&mut traces);
    report(3, "reconstruction stability", c3);
    report(9, "task generalization", criterion_9(model, &mut traces));
    let synthetic = synthetic_runs(&mut traces);
    report(1, "latent-search efficiency", criterion_1(&synthetic));
    report(6, "intrinsic-dimension recovery", criterion_6(&synthetic.first_phase1));
    report(10, "monotone best-so-far traces", criterion_10(&traces));

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "{} of {} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}
