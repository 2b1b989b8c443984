//! Black-box objectives: closed-loop rollouts scored by a fall-penalized
//! tracking cost.
//!
//! Every environment simulates up to `horizon` steps. At step `k` the state
//! is first checked for a fall (environment-specific bounds or a non-finite
//! state); a fall adds `fall_penalty` once and ends the episode. Otherwise the
//! running cost `(observed − target)²` is added and the controller acts.
//!
//! Three environments are built in and addressed by id:
//!
//! * `synthetic77`: a 77-d box whose cost depends only on a 5-d projection.
//! * `cartpole25`: a cart-pole tracking a forward velocity under a
//!   five-segment gain schedule.
//! * `dintmpc`: a double integrator driven by a receding-horizon LQR whose
//!   weights follow a five-segment schedule.
//!
//! An id may carry a task target override after `@`, e.g. `cartpole25@0.8`.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param_space::{denormalize_slice, Bounds};

/// Cost added once when an episode ends in a fall.
pub const FALL_PENALTY: f64 = 100.0;

/// One step of a recorded rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub observed: f64,
    pub target: f64,
    pub running_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub cost: f64,
    pub fell: bool,
    pub fall_step: Option<usize>,
    /// Per-step records; empty unless the rollout was recorded.
    pub observations: Vec<StepRecord>,
}

pub fn write_observations_csv<W: Write>(steps: &[StepRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in steps {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io("<observations>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dim_high: usize,
    pub dim_true: usize,
    pub seed: u64,
    /// Multiplies the projected offset before the sphere and ripple terms.
    pub scale: f64,
    /// Amplitude of the cosine ripple.
    pub ripple: f64,
    /// The episode falls when the cost exceeds this value.
    pub fall_threshold: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim_high: 77,
            dim_true: 5,
            seed: 0,
            scale: 4.0,
            ripple: 1.0,
            fall_threshold: 20.0,
        }
    }
}

/// `g(P(θ_unit − θ₀))` with `g(y) = Σ (s yᵢ)² + A(1 − cos 2π s yᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    config: SyntheticConfig,
    /// Row-major `dim_true × dim_high`, orthonormal rows.
    projection: Vec<f64>,
    offset: Vec<f64>,
}

impl SyntheticModel {
    pub fn new(config: SyntheticConfig) -> Result<Self> {
        let (d, k) = (config.dim_high, config.dim_true);
        if k == 0 || k >= d {
            return Err(Error::InvalidConfig(format!(
                "need 0 < dim_true < dim_high, got {k} and {d}"
            )));
        }
        if !(config.scale > 0.0 && config.ripple >= 0.0 && config.fall_threshold > 0.0) {
            return Err(Error::InvalidConfig("scale and fall threshold must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
        while rows.len() < k {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                rows.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let offset = (0..d).map(|_| rng.random_range(0.25..0.75)).collect();
        Ok(Self {
            config,
            projection: rows.concat(),
            offset,
        })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    /// Row `i` of the projection.
    pub fn projection_row(&self, i: usize) -> &[f64] {
        let d = self.config.dim_high;
        &self.projection[i * d..(i + 1) * d]
    }

    /// The unit-box point with zero projected offset that the cost is built around.
    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn project(&self, unit: &[f64]) -> Vec<f64> {
        (0..self.config.dim_true)
            .map(|i| {
                self.projection_row(i)
                    .iter()
                    .zip(unit.iter().zip(&self.offset))
                    .map(|(p, (u, o))| p * (u - o))
                    .sum()
            })
            .collect()
    }

    pub fn g(&self, y: &[f64]) -> f64 {
        let (s, a) = (self.config.scale, self.config.ripple);
        y.iter()
            .map(|v| {
                let t = s * v;
                t * t + a * (1.0 - (2.0 * PI * t).cos())
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartPoleConfig {
    pub segments: usize,
    pub target_velocity: f64,
    pub horizon: usize,
    pub dt: f64,
    pub pole_mass: f64,
    pub cart_mass: f64,
    /// Half the pole length, as in the classic benchmark.
    pub pole_length: f64,
    pub gravity: f64,
    pub max_angle: f64,
    /// Bound on the cart's distance from the moving reference `v·t`.
    pub max_tracking_error: f64,
    /// The seed draws the initial pole angle with magnitude in this range
    /// and a random sign.
    pub initial_angle: (f64, f64),
    pub initial_velocity: f64,
}

impl Default for CartPoleConfig {
    fn default() -> Self {
        Self {
            segments: 5,
            target_velocity: 0.5,
            horizon: 5000,
            dt: 0.02,
            pole_mass: 0.1,
            cart_mass: 1.0,
            pole_length: 0.5,
            gravity: 9.81,
            max_angle: 0.5,
            max_tracking_error: 5.0,
            initial_angle: (0.01, 0.05),
            initial_velocity: 0.0,
        }
    }
}

/// Per segment: position-error, velocity-error, angle and angular-rate gains
/// and the velocity feed-forward gain.
pub const CARTPOLE_GAIN_BOUNDS: [(f64, f64); 5] = [(0.0, 3.0), (0.0, 6.0), (15.0, 50.0), (2.0, 12.0), (-2.0, 2.0)];

/// Receding-horizon LQR actor for a double integrator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcActorConfig {
    /// Prediction horizon `N₁`.
    pub horizon: usize,
    pub dt: f64,
    pub u_lower: f64,
    pub u_upper: f64,
}

impl Default for MpcActorConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.05,
            u_lower: -2.0,
            u_upper: 2.0,
        }
    }
}

impl MpcActorConfig {
    fn plant(&self) -> ([[f64; 2]; 2], [f64; 2]) {
        let dt = self.dt;
        ([[1.0, dt], [0.0, 1.0]], [0.5 * dt * dt, dt])
    }

    /// First-step feedback gain of the finite-horizon problem
    /// `min Σ eᵀQe + R u² + e_Nᵀ Q_T e_N`, so that `u = −K e`.
    pub fn gain(&self, q: [f64; 2], r: f64, q_terminal: [f64; 2]) -> [f64; 2] {
        let (a, b) = self.plant();
        let mut p = [[q_terminal[0], 0.0], [0.0, q_terminal[1]]];
        let mut k = [0.0; 2];
        for _ in 0..self.horizon {
            // Pb, bᵀPb, bᵀPA
            let pb = [p[0][0] * b[0] + p[0][1] * b[1], p[1][0] * b[0] + p[1][1] * b[1]];
            let s = r + b[0] * pb[0] + b[1] * pb[1];
            let bpa = [pb[0] * a[0][0] + pb[1] * a[1][0], pb[0] * a[0][1] + pb[1] * a[1][1]];
            // Pseudo-inverse of a zero scalar is zero.
            k = if s > 0.0 { [bpa[0] / s, bpa[1] / s] } else { [0.0, 0.0] };
            // P ← Q + Aᵀ P (A − b k)
            let acl = [
                [a[0][0] - b[0] * k[0], a[0][1] - b[0] * k[1]],
                [a[1][0] - b[1] * k[0], a[1][1] - b[1] * k[1]],
            ];
            let pacl = [
                [p[0][0] * acl[0][0] + p[0][1] * acl[1][0], p[0][0] * acl[0][1] + p[0][1] * acl[1][1]],
                [p[1][0] * acl[0][0] + p[1][1] * acl[1][0], p[1][0] * acl[0][1] + p[1][1] * acl[1][1]],
            ];
            let mut next = [[0.0; 2]; 2];
            for (i, row) in next.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = a[0][i] * pacl[0][j] + a[1][i] * pacl[1][j];
                }
            }
            next[0][0] += q[0];
            next[1][1] += q[1];
            // Keep P exactly symmetric.
            let off = 0.5 * (next[0][1] + next[1][0]);
            next[0][1] = off;
            next[1][0] = off;
            p = next;
        }
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoubleIntegratorConfig {
    pub schedule_len: usize,
    pub target_velocity: f64,
    pub horizon: usize,
    pub actor: MpcActorConfig,
    pub max_position: f64,
    /// The seed draws the initial position uniformly in `±initial_position`.
    pub initial_position: f64,
    pub initial_velocity: f64,
}

impl Default for DoubleIntegratorConfig {
    fn default() -> Self {
        Self {
            schedule_len: 5,
            target_velocity: 0.5,
            horizon: 300,
            actor: MpcActorConfig::default(),
            max_position: 10.0,
            initial_position: 0.05,
            initial_velocity: 0.0,
        }
    }
}

/// Per segment: `diag(Q)`, `R`, terminal `diag(Q_T)`.
pub const MPC_WEIGHT_BOUNDS: [(f64, f64); 5] = [(0.0, 10.0), (0.0, 10.0), (0.0, 10.0), (0.0, 10.0), (0.0, 10.0)];

#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    Synthetic(SyntheticModel),
    CartPole(CartPoleConfig),
    DoubleIntegrator(DoubleIntegratorConfig),
}

/// A fully specified environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub env_id: String,
    pub dim: usize,
    pub bounds: Bounds,
    pub horizon: usize,
    pub fall_penalty: f64,
    pub target: f64,
    pub dynamics: Dynamics,
}

pub fn synthetic_embedded(config: SyntheticConfig) -> Result<EnvSpec> {
    let model = SyntheticModel::new(config)?;
    let d = model.config.dim_high;
    Ok(EnvSpec {
        env_id: format!("synthetic{d}"),
        dim: d,
        bounds: Bounds::uniform(d, -1.0, 1.0)?,
        horizon: 1,
        fall_penalty: FALL_PENALTY,
        target: 0.0,
        dynamics: Dynamics::Synthetic(model),
    })
}

pub fn cartpole_tracking(config: CartPoleConfig) -> Result<EnvSpec> {
    if config.segments == 0 || config.horizon == 0 || !(config.dt > 0.0) {
        return Err(Error::InvalidConfig("cart-pole needs segments >= 1, horizon >= 1 and dt > 0".into()));
    }
    let dim = 5 * config.segments;
    Ok(EnvSpec {
        env_id: format!("cartpole{dim}"),
        dim,
        bounds: Bounds::tiled(&CARTPOLE_GAIN_BOUNDS, dim)?,
        horizon: config.horizon,
        fall_penalty: FALL_PENALTY,
        target: config.target_velocity,
        dynamics: Dynamics::CartPole(config),
    })
}

pub fn double_integrator_mpc(config: DoubleIntegratorConfig) -> Result<EnvSpec> {
    let a = &config.actor;
    if config.schedule_len == 0 || config.horizon == 0 || a.horizon == 0 || !(a.dt > 0.0) || !(a.u_lower < a.u_upper) {
        return Err(Error::InvalidConfig(
            "double integrator needs schedule_len, horizons >= 1, dt > 0 and u_lower < u_upper".into(),
        ));
    }
    let dim = 5 * config.schedule_len;
    Ok(EnvSpec {
        env_id: "dintmpc".into(),
        dim,
        bounds: Bounds::tiled(&MPC_WEIGHT_BOUNDS, dim)?,
        horizon: config.horizon,
        fall_penalty: FALL_PENALTY,
        target: config.target_velocity,
        dynamics: Dynamics::DoubleIntegrator(config),
    })
}

/// Ids understood by [`make_env`], without target suffixes.
pub const ENV_IDS: [&str; 3] = ["synthetic77", "cartpole25", "dintmpc"];

/// Build a registered environment. `name@target` overrides the task target
/// (the desired velocity for the control tasks).
pub fn make_env(id: &str) -> Result<EnvSpec> {
    let (name, target) = match id.split_once('@') {
        Some((n, t)) => {
            let t: f64 = t.parse().map_err(|_| Error::UnknownEnvironment(id.to_string()))?;
            (n, Some(t))
        }
        None => (id, None),
    };
    let env = match name {
        "synthetic77" => synthetic_embedded(SyntheticConfig::default())?,
        "cartpole25" => cartpole_tracking(CartPoleConfig::default())?,
        "dintmpc" => double_integrator_mpc(DoubleIntegratorConfig::default())?,
        _ => return Err(Error::UnknownEnvironment(id.to_string())),
    };
    match target {
        Some(t) => env.with_target(t),
        None => Ok(env),
    }
}

/// Latent dimension used for an environment unless configured otherwise.
pub fn default_latent_dim(env: &EnvSpec) -> usize {
    match &env.dynamics {
        Dynamics::Synthetic(m) => m.config.dim_true,
        Dynamics::CartPole(_) => 10,
        Dynamics::DoubleIntegrator(_) => 5,
    }
}

/// A rolled-out state that can still be checked against fall bounds.
struct Accumulator {
    record: bool,
    cost: f64,
    steps: Vec<StepRecord>,
    target: f64,
}

impl Accumulator {
    fn step(&mut self, k: usize, observed: f64) {
        let running = (observed - self.target).powi(2);
        self.cost += running;
        if self.record {
            self.steps.push(StepRecord {
                step: k,
                observed,
                target: self.target,
                running_cost: running,
            });
        }
    }

    fn finish(self, fall: Option<usize>, penalty: f64) -> RolloutResult {
        RolloutResult {
            cost: self.cost + if fall.is_some() { penalty } else { 0.0 },
            fell: fall.is_some(),
            fall_step: fall,
            observations: self.steps,
        }
    }
}

impl EnvSpec {
    /// Same environment with a different task target.
    pub fn with_target(mut self, target: f64) -> Result<Self> {
        if !target.is_finite() {
            return Err(Error::InvalidConfig(format!("target {target} is not finite")));
        }
        match &mut self.dynamics {
            Dynamics::Synthetic(_) => {
                return Err(Error::InvalidConfig("the synthetic environment has a fixed target".into()))
            }
            Dynamics::CartPole(c) => c.target_velocity = target,
            Dynamics::DoubleIntegrator(c) => c.target_velocity = target,
        }
        self.target = target;
        if target != 0.5 {
            let base = self.env_id.split('@').next().unwrap_or_default().to_string();
            self.env_id = format!("{base}@{target}");
        }
        Ok(self)
    }

    /// Roll out `theta` given in original coordinates.
    pub fn evaluate(&self, theta: &[f64], seed: u64) -> Result<RolloutResult> {
        self.rollout(theta, seed, false)
    }

    /// Roll out a unit-box point.
    pub fn evaluate_unit(&self, unit: &[f64], seed: u64) -> Result<RolloutResult> {
        let theta = denormalize_slice(unit, &self.bounds)?;
        self.rollout(&theta, seed, false)
    }

    pub fn rollout(&self, theta: &[f64], seed: u64, record: bool) -> Result<RolloutResult> {
        if theta.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: theta.len(),
            });
        }
        if let Some(i) = theta
            .iter()
            .zip(self.bounds.lower().iter().zip(self.bounds.upper()))
            .position(|(v, (lo, hi))| !(lo <= v && v <= hi))
        {
            return Err(Error::OutOfBounds { index: i });
        }
        let acc = Accumulator {
            record,
            cost: 0.0,
            steps: Vec::new(),
            target: self.target,
        };
        Ok(match &self.dynamics {
            Dynamics::Synthetic(m) => self.rollout_synthetic(m, theta, acc),
            Dynamics::CartPole(c) => self.rollout_cartpole(c, theta, seed, acc),
            Dynamics::DoubleIntegrator(c) => self.rollout_dint(c, theta, seed, acc),
        })
    }

    fn rollout_synthetic(&self, m: &SyntheticModel, theta: &[f64], mut acc: Accumulator) -> RolloutResult {
        let unit: Vec<f64> = theta
            .iter()
            .zip(self.bounds.lower().iter().zip(self.bounds.upper()))
            .map(|(v, (lo, hi))| (v - lo) / (hi - lo))
            .collect();
        let g = m.g(&m.project(&unit));
        if !g.is_finite() || g > m.config.fall_threshold {
            return acc.finish(Some(0), self.fall_penalty);
        }
        // The observed quantity is √g, so the running cost is g itself.
        acc.step(0, g.sqrt());
        acc.finish(None, self.fall_penalty)
    }

    fn rollout_cartpole(&self, c: &CartPoleConfig, theta: &[f64], seed: u64, mut acc: Accumulator) -> RolloutResult {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = c.initial_angle;
        let magnitude = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let (mut x, mut xd, mut th, mut thd): (f64, f64, f64, f64) = (0.0, c.initial_velocity, sign * magnitude, 0.0);
        let total = c.pole_mass + c.cart_mass;
        let pml = c.pole_mass * c.pole_length;
        let v = c.target_velocity;
        let seg_len = c.horizon.div_ceil(c.segments);
        for k in 0..c.horizon {
            let ex = x - v * k as f64 * c.dt;
            let finite = x.is_finite() && xd.is_finite() && th.is_finite() && thd.is_finite();
            if !finite || th.abs() > c.max_angle || ex.abs() > c.max_tracking_error {
                return acc.finish(Some(k), self.fall_penalty);
            }
            acc.step(k, xd);
            let g = &theta[5 * (k / seg_len).min(c.segments - 1)..][..5];
            let force = g[0] * ex + g[1] * (xd - v) + g[2] * th + g[3] * thd + g[4] * v;
            let (sin, cos) = th.sin_cos();
            let temp = (force + pml * thd * thd * sin) / total;
            let th_acc = (c.gravity * sin - cos * temp) / (c.pole_length * (4.0 / 3.0 - c.pole_mass * cos * cos / total));
            let x_acc = temp - pml * th_acc * cos / total;
            xd += c.dt * x_acc;
            x += c.dt * xd;
            thd += c.dt * th_acc;
            th += c.dt * thd;
        }
        acc.finish(None, self.fall_penalty)
    }

    fn rollout_dint(&self, c: &DoubleIntegratorConfig, theta: &[f64], seed: u64, mut acc: Accumulator) -> RolloutResult {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p0 = if c.initial_position > 0.0 {
            rng.random_range(-c.initial_position..c.initial_position)
        } else {
            0.0
        };
        let (a, b) = c.actor.plant();
        let (mut p, mut vel) = (p0, c.initial_velocity);
        let v = c.target_velocity;
        let seg_len = c.horizon.div_ceil(c.schedule_len);
        let gains: Vec<[f64; 2]> = theta
            .chunks_exact(5)
            .map(|w| c.actor.gain([w[0], w[1]], w[2], [w[3], w[4]]))
            .collect();
        for k in 0..c.horizon {
            if !(p.is_finite() && vel.is_finite()) || p.abs() > c.max_position {
                return acc.finish(Some(k), self.fall_penalty);
            }
            acc.step(k, vel);
            let e = [p - v * k as f64 * c.actor.dt, vel - v];
            let gain = gains[(k / seg_len).min(c.schedule_len - 1)];
            let u = (-(gain[0] * e[0] + gain[1] * e[1])).clamp(c.actor.u_lower, c.actor.u_upper);
            let np = a[0][0] * p + a[0][1] * vel + b[0] * u;
            let nv = a[1][0] * p + a[1][1] * vel + b[1] * u;
            p = np;
            vel = nv;
        }
        acc.finish(None, self.fall_penalty)
    }

    /// Control inputs the double-integrator actor applies along a rollout.
    pub fn mpc_inputs(&self, theta: &[f64], seed: u64) -> Result<Vec<f64>> {
        let Dynamics::DoubleIntegrator(c) = &self.dynamics else {
            return Err(Error::InvalidConfig("not an MPC environment".into()));
        };
        let result = self.rollout(theta, seed, true)?;
        // Replay the closed loop to recover the inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = if c.initial_position > 0.0 {
            rng.random_range(-c.initial_position..c.initial_position)
        } else {
            0.0
        };
        let mut vel = c.initial_velocity;
        let (a, b) = c.actor.plant();
        let seg_len = c.horizon.div_ceil(c.schedule_len);
        let mut out = Vec::with_capacity(result.observations.len());
        for k in 0..result.observations.len() {
            let w = &theta[5 * (k / seg_len).min(c.schedule_len - 1)..][..5];
            let gain = c.actor.gain([w[0], w[1]], w[2], [w[3], w[4]]);
            let e = [p - c.target_velocity * k as f64 * c.actor.dt, vel - c.target_velocity];
            let u = (-(gain[0] * e[0] + gain[1] * e[1])).clamp(c.actor.u_lower, c.actor.u_upper);
            out.push(u);
            let np = a[0][0] * p + a[0][1] * vel + b[0] * u;
            vel = a[1][0] * p + a[1][1] * vel + b[1] * u;
            p = np;
        }
        Ok(out)
    }
}
