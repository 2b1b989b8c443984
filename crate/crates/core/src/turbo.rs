//! Trust-region Bayesian optimization over the unit box.
//!
//! `m` independent trust regions each keep their own data and Matérn GP.
//! Every suggestion round draws one posterior realization per region over a
//! candidate pool inside the region's box, and the batch is filled with the
//! lowest sampled values across all regions. Regions grow after
//! `success_tolerance` consecutive improvements, shrink after
//! `failure_tolerance` consecutive non-improvements and restart from a fresh
//! space-filling design once their side length drops below `length_min`.
//!
//! Usage is a loop of [`TurboState::take_initial`] / [`TurboState::suggest`],
//! evaluation, and [`TurboState::observe`]; [`run`] packages that loop.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{FitConfig, GpModel, KernelParams, SparsePool};

/// How the per-region posterior realization over the pool is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThompsonSampler {
    /// Exact joint draw through the Cholesky factor of the pool covariance.
    /// Cubic in the pool size.
    Exact,
    /// Random-feature prior draw plus exact pathwise conditioning on the data.
    Pathwise { features: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TurboConfig {
    /// Number of trust regions.
    pub regions: usize,
    /// Initial design size per region; `None` means `min(2·dim, 20)`.
    pub n_init_per_region: Option<usize>,
    pub batch: usize,
    pub length_init: f64,
    pub length_min: f64,
    pub length_max: f64,
    pub success_tolerance: usize,
    /// `None` means `max(4, ⌈dim / batch⌉)`.
    pub failure_tolerance: Option<usize>,
    /// Candidate pool per region; `None` means `min(100·dim, 5000)`.
    pub pool_size: Option<usize>,
    /// Hyperparameters are re-optimized once this many observations have
    /// arrived since the last fit; in between the model is only re-conditioned.
    pub refit_interval: usize,
    pub fit: FitConfig,
    /// Region models use at most this many points nearest to the center.
    pub max_gp_points: usize,
    pub thompson: ThompsonSampler,
    /// Relative improvement over the region best that makes a round a success.
    pub improvement_tolerance: f64,
    pub restart_regions: bool,
    /// Extra unit-box points appended round-robin to the initial designs.
    pub warm_start: Vec<Vec<f64>>,
    pub seed: u64,
}

impl Default for TurboConfig {
    fn default() -> Self {
        Self {
            regions: 10,
            n_init_per_region: None,
            batch: 1,
            length_init: 0.8,
            length_min: 0.5f64.powi(7),
            length_max: 1.6,
            success_tolerance: 3,
            failure_tolerance: None,
            pool_size: None,
            refit_interval: 1,
            fit: FitConfig::default(),
            max_gp_points: 256,
            thompson: ThompsonSampler::Pathwise { features: 256 },
            improvement_tolerance: 1e-3,
            restart_regions: true,
            warm_start: Vec::new(),
            seed: 0,
        }
    }
}

impl TurboConfig {
    pub fn n_init(&self, dim: usize) -> usize {
        self.n_init_per_region.unwrap_or((2 * dim).clamp(2, 20))
    }

    pub fn failure_tolerance(&self, dim: usize) -> usize {
        self.failure_tolerance
            .unwrap_or_else(|| 4.max(dim.div_ceil(self.batch.max(1))))
    }

    pub fn pool_size(&self, dim: usize) -> usize {
        self.pool_size.unwrap_or((100 * dim).min(5000))
    }

    /// Smallest budget that covers the initial designs.
    pub fn min_budget(&self, dim: usize) -> usize {
        self.regions * self.n_init(dim) + self.warm_start.len()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if dim == 0 {
            return bad("dimension must be at least 1");
        }
        if self.regions == 0 {
            return bad("at least one trust region is required");
        }
        if self.n_init(dim) < 2 {
            return bad("initial design needs at least 2 points per region");
        }
        if self.batch == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0 < self.length_min && self.length_min <= self.length_init && self.length_init <= self.length_max) {
            return bad("side lengths must satisfy 0 < min <= init <= max");
        }
        if self.success_tolerance == 0 || self.failure_tolerance(dim) == 0 {
            return bad("success and failure tolerances must be positive");
        }
        if self.pool_size(dim) == 0 || self.max_gp_points < 2 || self.refit_interval == 0 {
            return bad("pool size, refit interval and GP point cap must be positive");
        }
        if let ThompsonSampler::Pathwise { features: 0 } = self.thompson {
            return bad("pathwise sampling needs at least one feature");
        }
        if let Some(p) = self.warm_start.iter().find(|p| p.len() != dim || p.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::InvalidConfig(format!("warm-start point {p:?} is not in the {dim}-d unit box")));
        }
        Ok(())
    }
}

/// A point handed out for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: u64,
    pub region: usize,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Issued {
    region: usize,
    generation: u32,
    /// `None` for initial-design points.
    round: Option<u64>,
}

/// Bookkeeping for the candidates one region received in one round.
#[derive(Debug, Clone)]
struct RoundTally {
    remaining: usize,
    baseline: f64,
    improved: bool,
}

/// One hyperrectangle and its local data.
#[derive(Debug, Clone)]
pub struct TrustRegion {
    generation: u32,
    length: f64,
    success_count: usize,
    failure_count: usize,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    best: Option<(Vec<f64>, f64)>,
    params: KernelParams,
    model: Option<GpModel>,
    new_since_fit: usize,
    new_since_condition: usize,
    outstanding_initial: usize,
    rounds: BTreeMap<u64, RoundTally>,
    stream_seed: u64,
    active: bool,
}

impl TrustRegion {
    fn new(dim: usize, length: f64, stream_seed: u64) -> Self {
        Self {
            generation: 0,
            length,
            success_count: 0,
            failure_count: 0,
            x: Vec::new(),
            y: Vec::new(),
            best: None,
            params: KernelParams::default_for(dim),
            model: None,
            new_since_fit: 0,
            new_since_condition: 0,
            outstanding_initial: 0,
            rounds: BTreeMap::new(),
            stream_seed,
            active: true,
        }
    }

    pub fn side_length(&self) -> f64 {
        self.length
    }

    pub fn center(&self) -> Option<&[f64]> {
        self.best.as_ref().map(|(x, _)| x.as_slice())
    }

    pub fn best_cost(&self) -> Option<f64> {
        self.best.as_ref().map(|(_, c)| *c)
    }

    pub fn success_count(&self) -> usize {
        self.success_count
    }

    pub fn failure_count(&self) -> usize {
        self.failure_count
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    /// Per-dimension `[lower, upper]` of the current box, clipped to the
    /// unit box. `None` before the region has any data.
    pub fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let center = self.center()?;
        let ls = self.params.lengthscales();
        let mean = ls.iter().sum::<f64>() / ls.len() as f64;
        let w: Vec<f64> = ls.iter().map(|l| l / mean).collect();
        let geo = (w.iter().map(|v| v.ln()).sum::<f64>() / w.len() as f64).exp();
        let half: Vec<f64> = w.iter().map(|v| 0.5 * self.length * v / geo).collect();
        let lo = center.iter().zip(&half).map(|(c, h)| (c - h).max(0.0)).collect();
        let hi = center.iter().zip(&half).map(|(c, h)| (c + h).min(1.0)).collect();
        Some((lo, hi))
    }
}

/// What an observation did to its region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionEvent {
    None,
    Expanded,
    Shrunk,
    Restarted,
    Retired,
    /// The region restarted after this candidate was issued.
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub improved_global: bool,
    pub event: RegionEvent,
    pub side_length: f64,
}

/// The full optimizer state.
#[derive(Debug, Clone)]
pub struct TurboState {
    dim: usize,
    config: TurboConfig,
    regions: Vec<TrustRegion>,
    queued: VecDeque<(usize, Vec<f64>)>,
    issued: BTreeMap<u64, Issued>,
    next_id: u64,
    global_best: Option<(Vec<f64>, f64)>,
    eval_count: usize,
    round: u64,
    rng: ChaCha8Rng,
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, p| mix(acc ^ mix(*p)))
}

/// Latin-hypercube design of `n` points in the `dim`-d unit box.
pub fn latin_hypercube<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dim]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..dim {
        perm.shuffle(rng);
        for (i, p) in pts.iter_mut().enumerate() {
            p[j] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

impl TurboState {
    /// Create `m` regions, each with a space-filling initial design queued
    /// for evaluation.
    pub fn new(dim: usize, config: TurboConfig) -> Result<Self> {
        config.validate(dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, 0xD351]));
        let n_init = config.n_init(dim);
        let mut regions = Vec::with_capacity(config.regions);
        let mut queued = VecDeque::new();
        for r in 0..config.regions {
            let mut region = TrustRegion::new(dim, config.length_init, derive_seed(&[config.seed, r as u64]));
            for x in latin_hypercube(n_init, dim, &mut rng) {
                queued.push_back((r, x));
            }
            region.outstanding_initial = n_init;
            regions.push(region);
        }
        for (k, x) in config.warm_start.iter().enumerate() {
            let r = k % config.regions;
            queued.push_back((r, x.clone()));
            regions[r].outstanding_initial += 1;
        }
        Ok(Self {
            dim,
            config,
            regions,
            queued,
            issued: BTreeMap::new(),
            next_id: 0,
            global_best: None,
            eval_count: 0,
            round: 0,
            rng,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &TurboConfig {
        &self.config
    }

    pub fn regions(&self) -> &[TrustRegion] {
        &self.regions
    }

    pub fn eval_count(&self) -> usize {
        self.eval_count
    }

    pub fn global_best(&self) -> Option<(&[f64], f64)> {
        self.global_best.as_ref().map(|(x, c)| (x.as_slice(), *c))
    }

    /// Number of design points not yet handed out.
    pub fn queued_initial(&self) -> usize {
        self.queued.len()
    }

    fn issue(&mut self, region: usize, x: Vec<f64>, round: Option<u64>) -> Candidate {
        let id = self.next_id;
        self.next_id += 1;
        self.issued.insert(
            id,
            Issued {
                region,
                generation: self.regions[region].generation,
                round,
            },
        );
        Candidate { id, region, x }
    }

    /// Hand out up to `max` queued design points.
    pub fn take_initial(&mut self, max: usize) -> Vec<Candidate> {
        let mut out = Vec::new();
        while out.len() < max {
            let Some((r, x)) = self.queued.pop_front() else {
                break;
            };
            out.push(self.issue(r, x, None));
        }
        out
    }

    fn refresh_model(&mut self, r: usize) -> Result<()> {
        let cfg = &self.config;
        let region = &mut self.regions[r];
        if region.y.is_empty() {
            return Ok(());
        }
        let refit = region.model.is_none() || region.new_since_fit >= cfg.refit_interval;
        if !refit && region.new_since_condition == 0 {
            return Ok(());
        }
        let (x, y) = local_training_set(region, cfg.max_gp_points);
        let model = if refit {
            let fit = FitConfig {
                seed: derive_seed(&[region.stream_seed, self.round, 0xF17]),
                ..cfg.fit.clone()
            };
            let m = GpModel::fit(&x, &y, &region.params, &fit)?;
            region.new_since_fit = 0;
            m
        } else {
            GpModel::condition(&x, &y, &region.params)?
        };
        region.params = model.params().clone();
        region.new_since_condition = 0;
        region.model = Some(model);
        Ok(())
    }

    /// Propose `batch` new points. All initial design points must have been
    /// evaluated first.
    pub fn suggest(&mut self, batch: usize) -> Result<Vec<Candidate>> {
        if batch == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        let outstanding: usize = self.regions.iter().map(|r| r.outstanding_initial).sum();
        if outstanding > 0 {
            return Err(Error::PendingEvaluations(outstanding));
        }
        let eligible: Vec<usize> = (0..self.regions.len())
            .filter(|&r| self.regions[r].active && !self.regions[r].y.is_empty())
            .collect();
        if eligible.is_empty() {
            return Err(Error::NoActiveRegions);
        }
        self.round += 1;

        let mut scored: Vec<(f64, usize, usize)> = Vec::new();
        let mut pools: BTreeMap<usize, SparsePool> = BTreeMap::new();
        for &r in &eligible {
            self.refresh_model(r)?;
            let region = &self.regions[r];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[region.stream_seed, self.round]));
            let pool = candidate_pool(region, self.dim, self.config.pool_size(self.dim), &mut rng);
            let model = region.model.as_ref().expect("model refreshed above");
            let values = match self.config.thompson {
                ThompsonSampler::Pathwise { features } => {
                    model.pathwise_sample(&mut rng, features).evaluate_pool(&pool)
                }
                ThompsonSampler::Exact => {
                    let pts: Vec<Vec<f64>> = (0..pool.len()).map(|k| pool.point(k)).collect();
                    model
                        .sample_posterior(&pts, rng.random(), 1)?
                        .pop()
                        .expect("one draw requested")
                }
            };
            scored.extend(values.into_iter().enumerate().map(|(k, v)| (v, r, k)));
            pools.insert(r, pool);
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let picks: Vec<(usize, Vec<f64>)> = scored
            .iter()
            .take(batch)
            .map(|&(_, r, k)| (r, pools[&r].point(k)))
            .collect();
        let round = self.round;
        for (r, _) in &picks {
            let region = &mut self.regions[*r];
            let baseline = region.best_cost().expect("eligible regions have data");
            region
                .rounds
                .entry(round)
                .or_insert(RoundTally {
                    remaining: 0,
                    baseline,
                    improved: false,
                })
                .remaining += 1;
        }
        Ok(picks
            .into_iter()
            .map(|(r, x)| self.issue(r, x, Some(round)))
            .collect())
    }

    /// Record the cost of an issued candidate.
    pub fn observe(&mut self, candidate: &Candidate, cost: f64) -> Result<Observation> {
        if !cost.is_finite() {
            return Err(Error::NonFiniteCost(cost));
        }
        let issued = self
            .issued
            .remove(&candidate.id)
            .ok_or(Error::UnknownCandidate(candidate.id))?;
        self.eval_count += 1;
        let improved_global = self.global_best.as_ref().is_none_or(|(_, b)| cost < *b);
        if improved_global {
            self.global_best = Some((candidate.x.clone(), cost));
        }

        let dim = self.dim;
        let n_init = self.config.n_init(dim);
        let tau_fail = self.config.failure_tolerance(dim);
        let cfg = &self.config;
        let region = &mut self.regions[issued.region];
        if issued.generation != region.generation {
            return Ok(Observation {
                improved_global,
                event: RegionEvent::Stale,
                side_length: region.length,
            });
        }
        if issued.round.is_none() {
            region.outstanding_initial -= 1;
        }
        region.x.push(candidate.x.clone());
        region.y.push(cost);
        region.new_since_fit += 1;
        region.new_since_condition += 1;
        if region.best_cost().is_none_or(|b| cost < b) {
            region.best = Some((candidate.x.clone(), cost));
        }

        // Counters move once per region per round: a round succeeds if any
        // of its candidates beat the region best from before the round.
        let mut event = RegionEvent::None;
        if let Some(round) = issued.round {
            let tally = region.rounds.get_mut(&round).expect("tally opened at suggest time");
            if cost < tally.baseline - cfg.improvement_tolerance * tally.baseline.abs() {
                tally.improved = true;
            }
            tally.remaining -= 1;
            if tally.remaining == 0 {
                let improved = tally.improved;
                region.rounds.remove(&round);
                if improved {
                    region.success_count += 1;
                    region.failure_count = 0;
                } else {
                    region.success_count = 0;
                    region.failure_count += 1;
                }
                if region.success_count == cfg.success_tolerance {
                    region.length = (2.0 * region.length).min(cfg.length_max);
                    region.success_count = 0;
                    event = RegionEvent::Expanded;
                } else if region.failure_count == tau_fail {
                    region.length /= 2.0;
                    region.failure_count = 0;
                    event = RegionEvent::Shrunk;
                }
            }
        }

        if region.length < cfg.length_min {
            if cfg.restart_regions {
                region.generation += 1;
                region.length = cfg.length_init;
                region.success_count = 0;
                region.failure_count = 0;
                region.x.clear();
                region.y.clear();
                region.best = None;
                region.rounds.clear();
                region.model = None;
                region.params = KernelParams::default_for(dim);
                region.new_since_fit = 0;
                region.new_since_condition = 0;
                region.outstanding_initial = n_init;
                for x in latin_hypercube(n_init, dim, &mut self.rng) {
                    self.queued.push_back((issued.region, x));
                }
                event = RegionEvent::Restarted;
            } else {
                region.active = false;
                event = RegionEvent::Retired;
            }
        }
        let side_length = self.regions[issued.region].length;
        Ok(Observation {
            improved_global,
            event,
            side_length,
        })
    }
}

/// The region's data, or its `cap` points nearest the center.
fn local_training_set(region: &TrustRegion, cap: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    if region.y.len() <= cap {
        return (region.x.clone(), region.y.clone());
    }
    let center = region.center().expect("non-empty region has a center");
    let mut idx: Vec<(f64, usize)> = region
        .x
        .iter()
        .enumerate()
        .map(|(i, x)| (x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.truncate(cap);
    idx.sort_by_key(|p| p.1);
    (
        idx.iter().map(|&(_, i)| region.x[i].clone()).collect(),
        idx.iter().map(|&(_, i)| region.y[i]).collect(),
    )
}

/// Pool of candidates inside the region box. Each candidate perturbs each
/// coordinate of the center with probability `min(20/d, 1)` (at least one).
fn candidate_pool<R: Rng>(region: &TrustRegion, dim: usize, size: usize, rng: &mut R) -> SparsePool {
    let (lo, hi) = region.bounds().expect("region has data");
    let center = region.center().expect("region has data").to_vec();
    let prob = (20.0 / dim as f64).min(1.0);
    let mut pool = SparsePool::new(center);
    let mut dims = Vec::with_capacity(dim);
    let mut vals = Vec::with_capacity(dim);
    for _ in 0..size {
        dims.clear();
        vals.clear();
        for j in 0..dim {
            if prob >= 1.0 || rng.random::<f64>() < prob {
                dims.push(j as u32);
            }
        }
        if dims.is_empty() {
            dims.push(rng.random_range(0..dim) as u32);
        }
        for &j in &dims {
            let j = j as usize;
            vals.push(lo[j] + (hi[j] - lo[j]) * rng.random::<f64>());
        }
        pool.push(&dims, &vals);
    }
    pool
}

/// One row of the convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub eval_cost: f64,
    pub best_cost_so_far: f64,
    pub region_id: usize,
    pub side_length: f64,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

/// An evaluated candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub iteration: usize,
    pub x: Vec<f64>,
    pub cost: f64,
    pub region: usize,
}

#[derive(Debug, Clone)]
pub struct TurboRun {
    pub best_x: Vec<f64>,
    pub best_cost: f64,
    pub trace: Vec<TraceRow>,
    pub history: Vec<Evaluated>,
}

/// Minimize `objective` over the `dim`-d unit box with exactly `budget`
/// evaluations. Evaluation errors abort the run with the offending point.
pub fn run<F>(mut objective: F, dim: usize, budget: usize, config: &TurboConfig) -> Result<TurboRun>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut state = TurboState::new(dim, config.clone())?;
    let min_budget = config.min_budget(dim);
    if budget < min_budget {
        return Err(Error::InvalidConfig(format!(
            "budget {budget} is smaller than the initial design ({min_budget} points)"
        )));
    }
    let mut trace = Vec::with_capacity(budget);
    let mut history = Vec::with_capacity(budget);
    let mut best = f64::INFINITY;
    while state.eval_count() < budget {
        let remaining = budget - state.eval_count();
        let batch = if state.queued_initial() > 0 {
            state.take_initial(remaining)
        } else {
            state.suggest(config.batch.min(remaining))?
        };
        for c in batch {
            let cost = objective(&c.x).map_err(|e| Error::Evaluation {
                theta: c.x.clone(),
                source: Box::new(e),
            })?;
            let obs = state.observe(&c, cost)?;
            best = best.min(cost);
            let iteration = state.eval_count();
            trace.push(TraceRow {
                iteration,
                eval_cost: cost,
                best_cost_so_far: best,
                region_id: c.region,
                side_length: obs.side_length,
            });
            history.push(Evaluated {
                iteration,
                x: c.x,
                cost,
                region: c.region,
            });
        }
    }
    let (best_x, best_cost) = state
        .global_best()
        .map(|(x, c)| (x.to_vec(), c))
        .expect("budget is positive");
    Ok(TurboRun {
        best_x,
        best_cost,
        trace,
        history,
    })
}
