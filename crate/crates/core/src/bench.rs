//! Optimizer sanity benchmark: TuRBO against uniform random search on
//! standard test functions.

use std::f64::consts::{E, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_space::{denormalize_slice, Bounds};
use crate::turbo::{self, TraceRow, TurboConfig};

/// Ackley with a = 20, b = 0.2, c = 2π. Minimum 0 at the origin.
pub fn ackley(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sq = x.iter().map(|v| v * v).sum::<f64>() / n;
    let cos = x.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / n;
    -20.0 * (-0.2 * sq.sqrt()).exp() - cos.exp() + 20.0 + E
}

/// Rastrigin with A = 10. Minimum 0 at the origin.
pub fn rastrigin(x: &[f64]) -> f64 {
    10.0 * x.len() as f64 + x.iter().map(|v| v * v - 10.0 * (2.0 * PI * v).cos()).sum::<f64>()
}

pub fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    Ackley,
    Rastrigin,
    Sphere,
}

impl TestFunction {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ackley" => Ok(Self::Ackley),
            "rastrigin" => Ok(Self::Rastrigin),
            "sphere" => Ok(Self::Sphere),
            _ => Err(Error::InvalidConfig(format!("unknown test function `{name}`"))),
        }
    }

    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            Self::Ackley => ackley(x),
            Self::Rastrigin => rastrigin(x),
            Self::Sphere => sphere(x),
        }
    }

    /// The usual asymmetric search box, so the optimum is not at the center.
    pub fn bounds(self, dim: usize) -> Result<Bounds> {
        match self {
            Self::Ackley => Bounds::uniform(dim, -5.0, 10.0),
            Self::Rastrigin => Bounds::uniform(dim, -5.12, 5.12),
            Self::Sphere => Bounds::uniform(dim, -5.0, 10.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub function: TestFunction,
    pub dim: usize,
    pub budget: usize,
    /// Seeds `0..seeds`; run `s` of both methods uses seed `s`.
    pub seeds: u64,
    pub turbo: TurboConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            function: TestFunction::Ackley,
            dim: 10,
            budget: 300,
            seeds: 10,
            turbo: TurboConfig {
                regions: 1,
                ..TurboConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub best: f64,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub turbo: Vec<MethodRun>,
    pub random: Vec<MethodRun>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl BenchResult {
    pub fn turbo_median(&self) -> f64 {
        median(&self.turbo.iter().map(|r| r.best).collect::<Vec<_>>())
    }

    pub fn random_median(&self) -> f64 {
        median(&self.random.iter().map(|r| r.best).collect::<Vec<_>>())
    }
}

/// Uniform sampling in the unit box.
pub fn random_search<F: FnMut(&[f64]) -> f64>(mut f: F, dim: usize, budget: usize, seed: u64) -> MethodRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    let mut trace = Vec::with_capacity(budget);
    let mut x = vec![0.0; dim];
    for i in 0..budget {
        x.iter_mut().for_each(|v| *v = rng.random());
        let y = f(&x);
        best = best.min(y);
        trace.push(TraceRow {
            iteration: i + 1,
            eval_cost: y,
            best_cost_so_far: best,
            region_id: 0,
            side_length: 1.0,
        });
    }
    MethodRun { best, trace }
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchResult> {
    let bounds = config.function.bounds(config.dim)?;
    let f = |u: &[f64]| -> Result<f64> { Ok(config.function.eval(&denormalize_slice(u, &bounds)?)) };
    let mut turbo_runs = Vec::new();
    let mut random_runs = Vec::new();
    for seed in 0..config.seeds {
        let cfg = TurboConfig {
            seed,
            ..config.turbo.clone()
        };
        let run = turbo::run(f, config.dim, config.budget, &cfg)?;
        turbo_runs.push(MethodRun {
            best: run.best_cost,
            trace: run.trace,
        });
        random_runs.push(random_search(|u| f(u).expect("unit-box point"), config.dim, config.budget, seed));
    }
    Ok(BenchResult {
        config: config.clone(),
        turbo: turbo_runs,
        random: random_runs,
    })
}
