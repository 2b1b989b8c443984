//! Gaussian-process regression with an ARD Matérn 5/2 kernel.
//!
//! Inputs are unit-box coordinates. Targets are standardized to zero mean and
//! unit variance before fitting; the prior mean is zero in that space and all
//! predictions are mapped back to the caller's units.
//!
//! Hyperparameters (log lengthscales, log signal variance, log noise variance)
//! are fitted by Adam ascent on the exact log marginal likelihood using its
//! analytic gradient.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Matérn smoothness. Fixed; the half-integer value gives a closed form.
pub const NU: f64 = 2.5;

const SQRT5: f64 = 2.236_067_977_499_79;

pub const MIN_LENGTHSCALE: f64 = 1e-3;
pub const MAX_LENGTHSCALE: f64 = 1e3;
pub const MIN_NOISE_VARIANCE: f64 = 1e-8;
pub const MAX_NOISE_VARIANCE: f64 = 1.0;
pub const MIN_SIGNAL_VARIANCE: f64 = 1e-2;
pub const MAX_SIGNAL_VARIANCE: f64 = 1e2;

/// Jitter ladder used whenever a covariance matrix is factorized.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Matérn 5/2 correlation at scaled distance `r`.
#[inline]
pub fn matern52(r: f64) -> f64 {
    let sr = SQRT5 * r;
    (1.0 + sr + 5.0 / 3.0 * r * r) * (-sr).exp()
}

/// `-(1/r) d m(r)/dr`; finite at r = 0.
#[inline]
fn matern52_grad_factor(r: f64) -> f64 {
    let sr = SQRT5 * r;
    5.0 / 3.0 * (1.0 + sr) * (-sr).exp()
}

/// Kernel hyperparameters, all stored in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
    pub log_noise_variance: f64,
}

impl KernelParams {
    pub fn isotropic(dim: usize, lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Self {
        let mut p = Self {
            log_lengthscales: vec![lengthscale.ln(); dim],
            log_signal_variance: signal_variance.ln(),
            log_noise_variance: noise_variance.ln(),
        };
        p.clamp();
        p
    }

    /// Prior used when a region has no fitted model yet.
    pub fn default_for(dim: usize) -> Self {
        Self::isotropic(dim, 0.5, 1.0, 1e-3)
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    pub fn clamp(&mut self) {
        for l in &mut self.log_lengthscales {
            *l = l.clamp(MIN_LENGTHSCALE.ln(), MAX_LENGTHSCALE.ln());
        }
        self.log_signal_variance = self
            .log_signal_variance
            .clamp(MIN_SIGNAL_VARIANCE.ln(), MAX_SIGNAL_VARIANCE.ln());
        self.log_noise_variance = self
            .log_noise_variance
            .clamp(MIN_NOISE_VARIANCE.ln(), MAX_NOISE_VARIANCE.ln());
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_variance);
        v.push(self.log_noise_variance);
        v
    }

    fn from_vec(v: &[f64]) -> Self {
        let d = v.len() - 2;
        Self {
            log_lengthscales: v[..d].to_vec(),
            log_signal_variance: v[d],
            log_noise_variance: v[d + 1],
        }
    }

    fn inv_lengthscales_sq(&self) -> Vec<f64> {
        self.log_lengthscales
            .iter()
            .map(|l| (-2.0 * l).exp())
            .collect()
    }
}

#[inline]
fn scaled_sq_dist(a: &[f64], b: &[f64], inv_ls2: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(inv_ls2)
        .map(|((x, y), w)| {
            let t = x - y;
            t * t * w
        })
        .sum()
}

/// `σ_f² · m_{5/2}(r)` with `r² = Σ (a_i − b_i)² / ℓ_i²`.
pub fn matern_kernel(a: &[f64], b: &[f64], params: &KernelParams) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: a.len(),
        });
    }
    let r = scaled_sq_dist(a, b, &params.inv_lengthscales_sq()).sqrt();
    Ok(params.signal_variance() * matern52(r))
}

/// Cholesky factorization with an escalating diagonal jitter.
/// Returns the factor and the jitter that was finally added.
pub(crate) fn cholesky_with_jitter(mut m: DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let n = m.nrows();
    let mut added = 0.0;
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        for i in 0..n {
            m[(i, i)] += jitter - added;
        }
        added = jitter;
        if let Some(c) = Cholesky::new(m.clone()) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::CholeskyFailure { jitter: added })
}

/// Row-major point set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Points {
    data: Vec<f64>,
    dim: usize,
}

impl Points {
    fn from_rows(rows: &[Vec<f64>], dim: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { data, dim })
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Hyperparameter fitting schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Adam steps per start.
    pub iterations: usize,
    /// Number of starts: the first begins at the supplied initial parameters,
    /// the rest at random log-uniform lengthscales.
    pub restarts: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            restarts: 2,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

/// A conditioned GP posterior.
#[derive(Debug, Clone)]
pub struct GpModel {
    x: Points,
    /// Standardized targets.
    y: Vec<f64>,
    params: KernelParams,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    y_mean: f64,
    y_std: f64,
    jitter: f64,
    log_marginal_likelihood: f64,
}

struct Standardized {
    x: Points,
    y: Vec<f64>,
    mean: f64,
    std: f64,
}

fn merge_and_standardize(x: &[Vec<f64>], y: &[f64]) -> Result<Standardized> {
    if x.is_empty() {
        return Err(Error::InsufficientData { got: 0, needed: 1 });
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if let Some(c) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCost(*c));
    }
    let dim = x[0].len();

    // Merge bitwise-identical rows by averaging their targets, keeping the
    // order of first appearance.
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| {
        x[a].iter()
            .zip(&x[b])
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut representative = vec![0usize; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        for &k in &order[start..end] {
            representative[k] = order[start];
        }
        start = end;
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    let mut slot = vec![usize::MAX; x.len()];
    for i in 0..x.len() {
        let r = representative[i];
        if slot[r] == usize::MAX {
            slot[r] = rows.len();
            rows.push(x[r].clone());
            sums.push((0.0, 0));
        }
        let s = &mut sums[slot[r]];
        s.0 += y[i];
        s.1 += 1;
    }
    let targets: Vec<f64> = sums.iter().map(|(s, c)| s / *c as f64).collect();

    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        // Degenerate targets: the posterior is the constant `mean`.
        std = 1.0;
    }
    Ok(Standardized {
        x: Points::from_rows(&rows, dim)?,
        y: targets.iter().map(|v| (v - mean) / std).collect(),
        mean,
        std,
    })
}

struct Factorized {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    lml: f64,
    /// Per pair, lower triangle row-major: kernel value and its gradient factor.
    grad_factor: Option<Vec<(f64, f64)>>,
}

fn factorize(x: &Points, y: &[f64], params: &KernelParams, want_grad: bool) -> Result<Factorized> {
    let n = x.len();
    let inv_ls2 = params.inv_lengthscales_sq();
    let sf2 = params.signal_variance();
    let sn2 = params.noise_variance();
    let mut k = DMatrix::<f64>::zeros(n, n);
    let mut grad_factor = want_grad.then(|| vec![(0.0, 0.0); n * (n + 1) / 2]);
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..i {
            let r = scaled_sq_dist(xi, x.row(j), &inv_ls2).sqrt();
            let v = sf2 * matern52(r);
            k[(i, j)] = v;
            k[(j, i)] = v;
            if let Some(g) = grad_factor.as_mut() {
                g[i * (i + 1) / 2 + j] = (v, sf2 * matern52_grad_factor(r));
            }
        }
        k[(i, i)] = sf2 + sn2;
    }
    let (chol, jitter) = cholesky_with_jitter(k)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    let lml = -0.5 * yv.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * PI).ln();
    Ok(Factorized {
        chol,
        alpha,
        jitter,
        lml,
        grad_factor,
    })
}

/// Log marginal likelihood of standardized targets and its gradient with
/// respect to `[log ℓ_1..log ℓ_d, log σ_f², log σ_n²]`.
pub fn log_marginal_likelihood(
    x: &[Vec<f64>],
    y_standardized: &[f64],
    params: &KernelParams,
) -> Result<(f64, Vec<f64>)> {
    let dim = params.dim();
    let pts = Points::from_rows(x, dim)?;
    if y_standardized.len() != pts.len() {
        return Err(Error::DimensionMismatch {
            expected: pts.len(),
            got: y_standardized.len(),
        });
    }
    let f = factorize(&pts, y_standardized, params, true)?;
    let g = lml_gradient(&pts, params, &f);
    Ok((f.lml, g))
}

/// `(L Lᵀ)⁻¹` as `L⁻ᵀ L⁻¹`, with `L⁻¹` built column by column by forward
/// substitution on contiguous column slices. Several times faster than the
/// generic solve against the identity.
fn inverse_from_cholesky(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let l = chol.l_dirty();
    let n = l.nrows();
    let mut linv = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut col = linv.column_mut(j);
        col[j] = 1.0;
        for k in j..n {
            let xk = col[k] / l[(k, k)];
            col[k] = xk;
            if xk != 0.0 {
                let lk = l.column(k);
                for (c, v) in col.as_mut_slice()[k + 1..].iter_mut().zip(&lk.as_slice()[k + 1..]) {
                    *c -= xk * v;
                }
            }
        }
    }
    linv.transpose() * linv
}

fn lml_gradient(x: &Points, params: &KernelParams, f: &Factorized) -> Vec<f64> {
    let n = x.len();
    let d = x.dim;
    let inv_ls2 = params.inv_lengthscales_sq();
    let sf2 = params.signal_variance();
    let sn2 = params.noise_variance();
    let k_inv = inverse_from_cholesky(&f.chol);
    let alpha = &f.alpha;
    let g = f.grad_factor.as_ref().expect("gradient factors requested");

    let mut grad = vec![0.0; d + 2];
    let mut g_signal = 0.0;
    let mut trace_w = 0.0;
    for i in 0..n {
        let xi = x.row(i);
        let wii = alpha[i] * alpha[i] - k_inv[(i, i)];
        trace_w += wii;
        g_signal += 0.5 * wii * sf2;
        for j in 0..i {
            let w = alpha[i] * alpha[j] - k_inv[(i, j)];
            let xj = x.row(j);
            let (kv, gf) = g[i * (i + 1) / 2 + j];
            g_signal += w * kv;
            let wg = w * gf;
            for ((acc, a), b) in grad[..d].iter_mut().zip(xi).zip(xj) {
                let t = a - b;
                *acc += wg * t * t;
            }
        }
    }
    for (acc, w) in grad[..d].iter_mut().zip(&inv_ls2) {
        *acc *= w;
    }
    grad[d] = g_signal;
    grad[d + 1] = 0.5 * sn2 * trace_w;
    grad
}

impl GpModel {
    /// Condition on data with fixed hyperparameters.
    pub fn condition(x: &[Vec<f64>], y: &[f64], params: &KernelParams) -> Result<Self> {
        let s = merge_and_standardize(x, y)?;
        if s.x.dim != params.dim() {
            return Err(Error::DimensionMismatch {
                expected: params.dim(),
                got: s.x.dim,
            });
        }
        let mut params = params.clone();
        params.clamp();
        Self::from_standardized(s, params)
    }

    fn from_standardized(s: Standardized, params: KernelParams) -> Result<Self> {
        let f = factorize(&s.x, &s.y, &params, false)?;
        Ok(Self {
            x: s.x,
            y: s.y,
            params,
            chol: f.chol,
            alpha: f.alpha,
            y_mean: s.mean,
            y_std: s.std,
            jitter: f.jitter,
            log_marginal_likelihood: f.lml,
        })
    }

    /// Fit hyperparameters by maximizing the log marginal likelihood, then
    /// condition on the data. A single distinct point keeps `init` unchanged.
    pub fn fit(x: &[Vec<f64>], y: &[f64], init: &KernelParams, config: &FitConfig) -> Result<Self> {
        let s = merge_and_standardize(x, y)?;
        if s.x.dim != init.dim() {
            return Err(Error::DimensionMismatch {
                expected: init.dim(),
                got: s.x.dim,
            });
        }
        let mut init = init.clone();
        init.clamp();
        let degenerate = s.y.iter().all(|v| *v == 0.0);
        if s.x.len() < 2 || degenerate || config.iterations == 0 {
            if degenerate {
                init.log_noise_variance = MIN_NOISE_VARIANCE.ln();
            }
            return Self::from_standardized(s, init);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut best: Option<(f64, KernelParams)> = None;
        for start in 0..config.restarts.max(1) {
            let mut p = if start == 0 {
                init.clone()
            } else {
                let mut p = init.clone();
                for l in &mut p.log_lengthscales {
                    *l = rng.random_range(0.05f64.ln()..2.0f64.ln());
                }
                p.log_signal_variance = 0.0;
                p.log_noise_variance = 1e-3f64.ln();
                p
            };
            let (lml, params) = adam_ascent(&s.x, &s.y, &mut p, config);
            if let Some(lml) = lml {
                if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((lml, params));
                }
            }
        }
        let params = best.map(|(_, p)| p).unwrap_or(init);
        Self::from_standardized(s, params)
    }

    pub fn dim(&self) -> usize {
        self.x.dim
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn y_std(&self) -> f64 {
        self.y_std
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    /// Lower Cholesky factor of `K + σ_n² I` (+ jitter).
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Training inputs after duplicate merging.
    pub fn training_inputs(&self) -> Vec<Vec<f64>> {
        (0..self.x.len()).map(|i| self.x.row(i).to_vec()).collect()
    }

    /// Noise-free kernel matrix plus `σ_n² I`, i.e. what the factor reconstructs.
    pub fn noisy_gram(&self) -> DMatrix<f64> {
        let n = self.x.len();
        let inv_ls2 = self.params.inv_lengthscales_sq();
        let sf2 = self.params.signal_variance();
        DMatrix::from_fn(n, n, |i, j| {
            let r = scaled_sq_dist(self.x.row(i), self.x.row(j), &inv_ls2).sqrt();
            sf2 * matern52(r) + if i == j { self.params.noise_variance() } else { 0.0 }
        })
    }

    fn check_query(&self, xq: &[Vec<f64>]) -> Result<()> {
        match xq.iter().find(|q| q.len() != self.dim()) {
            Some(q) => Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: q.len(),
            }),
            None => Ok(()),
        }
    }

    fn cross_kernel(&self, xq: &[Vec<f64>]) -> DMatrix<f64> {
        let inv_ls2 = self.params.inv_lengthscales_sq();
        let sf2 = self.params.signal_variance();
        DMatrix::from_fn(self.x.len(), xq.len(), |i, j| {
            sf2 * matern52(scaled_sq_dist(self.x.row(i), &xq[j], &inv_ls2).sqrt())
        })
    }

    /// Posterior mean and standard deviation of the latent function.
    pub fn predict(&self, xq: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_query(xq)?;
        let ks = self.cross_kernel(xq);
        let mean_std = ks.tr_mul(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        let sf2 = self.params.signal_variance();
        let mean = mean_std.iter().map(|m| self.y_mean + self.y_std * m).collect();
        let std = (0..xq.len())
            .map(|j| {
                let var = sf2 - v.column(j).norm_squared();
                var.max(0.0).sqrt() * self.y_std
            })
            .collect();
        Ok((mean, std))
    }

    /// `count` joint posterior draws over `xq`, one row per draw.
    pub fn sample_posterior(&self, xq: &[Vec<f64>], seed: u64, count: usize) -> Result<Vec<Vec<f64>>> {
        if count == 0 {
            return Err(Error::InvalidConfig("sample count must be at least 1".into()));
        }
        self.check_query(xq)?;
        let q = xq.len();
        let ks = self.cross_kernel(xq);
        let mean = ks.tr_mul(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        let inv_ls2 = self.params.inv_lengthscales_sq();
        let sf2 = self.params.signal_variance();
        let mut cov = DMatrix::from_fn(q, q, |i, j| {
            sf2 * matern52(scaled_sq_dist(&xq[i], &xq[j], &inv_ls2).sqrt())
        });
        cov -= v.tr_mul(&v);
        // Symmetrize away round-off before factorizing.
        let cov = (&cov + cov.transpose()) * 0.5;
        let (chol, _) = cholesky_with_jitter(cov)?;
        let l = chol.l();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
            let f = &mean + &l * z;
            out.push(f.iter().map(|v| self.y_mean + self.y_std * v).collect());
        }
        Ok(out)
    }

    /// Draw one approximate joint posterior function using random Fourier
    /// features for the prior and an exact data-conditioned correction
    /// (pathwise conditioning). Evaluating the returned function at any
    /// number of points costs `O(features · d + n · d)` per point.
    pub fn pathwise_sample<R: Rng>(&self, rng: &mut R, features: usize) -> PosteriorFunction {
        let d = self.dim();
        let n = self.x.len();
        let ls = self.params.lengthscales();
        let sf2 = self.params.signal_variance();
        let sn2 = self.params.noise_variance();
        let chi = ChiSquared::new(2.0 * NU).expect("positive degrees of freedom");

        // Matérn-ν spectral measure: multivariate Student-t with 2ν dof.
        let mut omega = Vec::with_capacity(features * d);
        let mut phase = Vec::with_capacity(features);
        for _ in 0..features {
            let g: f64 = chi.sample(rng);
            let scale = (2.0 * NU / g).sqrt();
            for l in &ls {
                let z: f64 = rng.sample(StandardNormal);
                omega.push(z * scale / l);
            }
            phase.push(rng.random_range(0.0..2.0 * PI));
        }
        let amp = (2.0 * sf2 / features as f64).sqrt();
        let weights: Vec<f64> = (0..features)
            .map(|_| amp * rng.sample::<f64, _>(StandardNormal))
            .collect();

        let mut prior = PosteriorFunction {
            omega,
            phase,
            weights,
            correction: Vec::new(),
            train: self.x.data.clone(),
            inv_ls2: self.params.inv_lengthscales_sq(),
            signal_variance: sf2,
            dim: d,
            y_mean: self.y_mean,
            y_std: self.y_std,
        };
        let residual: Vec<f64> = (0..n)
            .map(|i| {
                let eps: f64 = rng.sample::<f64, _>(StandardNormal) * sn2.sqrt();
                self.y[i] - prior.prior_at(self.x.row(i)) - eps
            })
            .collect();
        let v = self.chol.solve(&DVector::from_vec(residual));
        prior.correction = v.iter().copied().collect();
        prior
    }
}

/// One posterior function draw produced by [`GpModel::pathwise_sample`].
#[derive(Debug, Clone)]
pub struct PosteriorFunction {
    omega: Vec<f64>,
    phase: Vec<f64>,
    weights: Vec<f64>,
    correction: Vec<f64>,
    train: Vec<f64>,
    inv_ls2: Vec<f64>,
    signal_variance: f64,
    dim: usize,
    y_mean: f64,
    y_std: f64,
}

impl PosteriorFunction {
    fn prior_at(&self, x: &[f64]) -> f64 {
        self.omega
            .chunks_exact(self.dim)
            .zip(&self.phase)
            .zip(&self.weights)
            .map(|((w, b), a)| {
                let dot: f64 = w.iter().zip(x).map(|(p, q)| p * q).sum();
                a * (dot + b).cos()
            })
            .sum()
    }

    /// Value in the caller's target units.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let mut f = self.prior_at(x);
        for (i, v) in self.correction.iter().enumerate() {
            let r2 = scaled_sq_dist(x, &self.train[i * self.dim..(i + 1) * self.dim], &self.inv_ls2);
            f += v * self.signal_variance * matern52(r2.sqrt());
        }
        self.y_mean + self.y_std * f
    }

    /// Evaluate at points `center + sparse perturbation`, reusing the center's
    /// projections. Only the perturbed coordinates are visited per point.
    pub fn evaluate_pool(&self, pool: &SparsePool) -> Vec<f64> {
        let c = &pool.center;
        let nf = self.weights.len();
        let n = self.correction.len();
        let center_dots: Vec<f64> = self
            .omega
            .chunks_exact(self.dim)
            .zip(&self.phase)
            .map(|(w, b)| w.iter().zip(c).map(|(p, q)| p * q).sum::<f64>() + b)
            .collect();
        let center_r2: Vec<f64> = (0..n)
            .map(|i| scaled_sq_dist(c, &self.train[i * self.dim..(i + 1) * self.dim], &self.inv_ls2))
            .collect();
        // Frequencies by coordinate, so a perturbed coordinate is one contiguous row.
        let mut by_dim = vec![0.0; nf * self.dim];
        for (f, w) in self.omega.chunks_exact(self.dim).enumerate() {
            for (j, v) in w.iter().enumerate() {
                by_dim[j * nf + f] = *v;
            }
        }
        let mut out = Vec::with_capacity(pool.len());
        let mut dots = vec![0.0; nf];
        for k in 0..pool.len() {
            let (dims, vals) = pool.entry(k);
            dots.copy_from_slice(&center_dots);
            for (&j, &v) in dims.iter().zip(vals) {
                let j = j as usize;
                let delta = v - c[j];
                for (dot, w) in dots.iter_mut().zip(&by_dim[j * nf..(j + 1) * nf]) {
                    *dot += w * delta;
                }
            }
            let mut f: f64 = dots.iter().zip(&self.weights).map(|(d, a)| a * d.cos()).sum();
            for i in 0..n {
                let row = &self.train[i * self.dim..(i + 1) * self.dim];
                let mut r2 = center_r2[i];
                for (&j, &v) in dims.iter().zip(vals) {
                    let j = j as usize;
                    let a = v - row[j];
                    let b = c[j] - row[j];
                    r2 += (a * a - b * b) * self.inv_ls2[j];
                }
                f += self.correction[i] * self.signal_variance * matern52(r2.max(0.0).sqrt());
            }
            out.push(self.y_mean + self.y_std * f);
        }
        out
    }
}

/// Candidate points stored as a shared center plus per-point overrides of a
/// few coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePool {
    center: Vec<f64>,
    offsets: Vec<usize>,
    dims: Vec<u32>,
    values: Vec<f64>,
}

impl SparsePool {
    pub fn new(center: Vec<f64>) -> Self {
        Self {
            center,
            offsets: vec![0],
            dims: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Add a point overriding `dims` (strictly increasing) with `values`.
    pub fn push(&mut self, dims: &[u32], values: &[f64]) {
        debug_assert_eq!(dims.len(), values.len());
        self.dims.extend_from_slice(dims);
        self.values.extend_from_slice(values);
        self.offsets.push(self.dims.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn entry(&self, k: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[k], self.offsets[k + 1]);
        (&self.dims[a..b], &self.values[a..b])
    }

    /// Dense coordinates of point `k`.
    pub fn point(&self, k: usize) -> Vec<f64> {
        let mut x = self.center.clone();
        let (dims, vals) = self.entry(k);
        for (&j, &v) in dims.iter().zip(vals) {
            x[j as usize] = v;
        }
        x
    }
}

/// Adam ascent on the log marginal likelihood. Returns the best value seen and
/// its parameters; `None` if no iterate could be factorized.
fn adam_ascent(
    x: &Points,
    y: &[f64],
    params: &mut KernelParams,
    config: &FitConfig,
) -> (Option<f64>, KernelParams) {
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut theta = params.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut best: Option<(f64, KernelParams)> = None;
    for t in 1..=config.iterations + 1 {
        let p = KernelParams::from_vec(&theta);
        let Ok(f) = factorize(x, y, &p, true) else {
            break;
        };
        if best.as_ref().is_none_or(|(b, _)| f.lml > *b) {
            best = Some((f.lml, p.clone()));
        }
        if t > config.iterations {
            break;
        }
        let g = lml_gradient(x, &p, &f);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            theta[i] += config.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
        let mut clamped = KernelParams::from_vec(&theta);
        clamped.clamp();
        theta = clamped.to_vec();
    }
    match best {
        Some((lml, p)) => {
            *params = p.clone();
            (Some(lml), p)
        }
        None => (None, params.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
            .collect()
    }

    #[test]
    fn kernel_identity_and_closed_form() {
        let p = KernelParams::isotropic(3, 1.0, 2.5, 1e-6);
        let a = [0.1, 0.2, 0.3];
        assert!((matern_kernel(&a, &a, &p).unwrap() - 2.5).abs() < 1e-12);
        // Unit distance along one axis with unit lengthscale and signal.
        let p = KernelParams::isotropic(2, 1.0, 1.0, 1e-6);
        let oracle = (1.0 + 5f64.sqrt() + 5.0 / 3.0) * (-(5f64.sqrt())).exp();
        let k = matern_kernel(&[0.0, 0.0], &[1.0, 0.0], &p).unwrap();
        assert!((k - oracle).abs() < 1e-12, "{k} vs {oracle}");
        assert!((oracle - 0.523_994_108_831_820_3).abs() < 1e-15);
        assert!(matches!(
            matern_kernel(&[0.0], &[0.0, 1.0], &p),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn kernel_symmetric(a in prop::collection::vec(0.0f64..1.0, 4), b in prop::collection::vec(0.0f64..1.0, 4),
                            ls in prop::collection::vec(0.01f64..3.0, 4)) {
            let p = KernelParams {
                log_lengthscales: ls.iter().map(|l| l.ln()).collect(),
                log_signal_variance: 0.3,
                log_noise_variance: -10.0,
            };
            let kab = matern_kernel(&a, &b, &p).unwrap();
            let kba = matern_kernel(&b, &a, &p).unwrap();
            prop_assert_eq!(kab, kba);
            prop_assert!(kab > 0.0 && kab <= p.signal_variance() + 1e-15);
        }
    }

    #[test]
    fn single_point_interpolates() {
        let init = KernelParams::default_for(2);
        let m = GpModel::fit(&[vec![0.3, 0.7]], &[4.2], &init, &FitConfig::default()).unwrap();
        assert_eq!(m.params().log_lengthscales, init.log_lengthscales);
        assert_eq!(m.params().log_signal_variance, init.log_signal_variance);
        let (mu, _) = m.predict(&[vec![0.3, 0.7]]).unwrap();
        assert!((mu[0] - 4.2).abs() < 1e-9);
    }

    #[test]
    fn constant_targets_give_constant_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_points(&mut rng, 12, 3);
        let y = vec![7.5; 12];
        let m = GpModel::fit(&x, &y, &KernelParams::default_for(3), &FitConfig::default()).unwrap();
        let q = random_points(&mut rng, 5, 3);
        let (mu, _) = m.predict(&q).unwrap();
        assert!(mu.iter().all(|v| (v - 7.5).abs() < 1e-12));
        let (_, sd) = m.predict(&x).unwrap();
        assert!(sd.iter().all(|s| *s < 1e-3), "{sd:?}");
    }

    #[test]
    fn duplicates_are_merged_by_averaging() {
        let x = vec![vec![0.2], vec![0.8], vec![0.2]];
        let y = vec![1.0, 3.0, 2.0];
        let p = KernelParams::isotropic(1, 0.3, 1.0, 1e-8);
        let m = GpModel::condition(&x, &y, &p).unwrap();
        assert_eq!(m.len(), 2);
        let (mu, _) = m.predict(&[vec![0.2]]).unwrap();
        assert!((mu[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn far_query_recovers_prior() {
        let x = vec![vec![0.0], vec![0.05], vec![0.1]];
        let y = vec![1.0, 2.0, 4.0];
        let p = KernelParams::isotropic(1, 0.01, 1.5, 1e-6);
        let m = GpModel::condition(&x, &y, &p).unwrap();
        let (mu, sd) = m.predict(&[vec![50.0]]).unwrap();
        assert!((mu[0] - m.y_mean()).abs() < 1e-9);
        assert!((sd[0] - 1.5f64.sqrt() * m.y_std()).abs() < 1e-9);
    }

    #[test]
    fn cholesky_reconstructs_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_points(&mut rng, 40, 5);
        let y: Vec<f64> = x.iter().map(|r| r.iter().sum::<f64>().sin()).collect();
        let m = GpModel::fit(&x, &y, &KernelParams::default_for(5), &FitConfig::default()).unwrap();
        let l = m.cholesky_factor();
        let k = m.noisy_gram();
        let diff = &l * l.transpose() - &k;
        assert!(diff.norm() / k.norm() < 1e-8);
    }

    #[test]
    fn jitter_ladder_handles_dense_designs() {
        // Near-duplicate rows on a long lengthscale make the Gram matrix
        // numerically singular without jitter.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &n in &[64usize, 256, 512] {
            let x: Vec<Vec<f64>> = (0..n)
                .map(|i| vec![i as f64 / n as f64 * 1e-3, rng.random::<f64>() * 1e-3])
                .collect();
            let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let p = KernelParams::isotropic(2, 5.0, 1.0, 1e-8);
            let m = GpModel::condition(&x, &y, &p).unwrap();
            assert!(m.jitter() <= JITTER_MAX);
        }
    }

    #[test]
    fn sample_posterior_is_deterministic_and_pinned_at_data() {
        let x = vec![vec![0.1], vec![0.5], vec![0.9]];
        let y = vec![0.10, 0.20, 0.15];
        let p = KernelParams::isotropic(1, 0.3, 1.0, MIN_NOISE_VARIANCE);
        let m = GpModel::condition(&x, &y, &p).unwrap();
        let a = m.sample_posterior(&[vec![0.3]], 9, 1).unwrap();
        let b = m.sample_posterior(&[vec![0.3]], 9, 1).unwrap();
        assert_eq!(a, b);
        let s = m.sample_posterior(&x, 4, 200).unwrap();
        for draw in &s {
            for (v, t) in draw.iter().zip(&y) {
                assert!((v - t).abs() < 1e-4, "{v} vs {t}");
            }
        }
        assert!(m.sample_posterior(&x, 4, 0).is_err());
    }

    #[test]
    fn pathwise_sample_matches_exact_posterior_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_points(&mut rng, 15, 2);
        let y: Vec<f64> = x.iter().map(|r| (3.0 * r[0]).sin() + r[1]).collect();
        let p = KernelParams::isotropic(2, 0.3, 1.0, 1e-4);
        let m = GpModel::condition(&x, &y, &p).unwrap();
        let q = vec![vec![0.5, 0.5], vec![0.05, 0.95], x[0].clone()];
        let (mu, sd) = m.predict(&q).unwrap();
        let draws = 3000;
        let mut sum = vec![0.0; q.len()];
        let mut sq = vec![0.0; q.len()];
        for _ in 0..draws {
            let f = m.pathwise_sample(&mut rng, 512);
            for (k, xq) in q.iter().enumerate() {
                let v = f.evaluate(xq);
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        for k in 0..q.len() {
            let mean = sum[k] / draws as f64;
            let var = sq[k] / draws as f64 - mean * mean;
            let tol = 4.0 * sd[k].max(1e-3) / (draws as f64).sqrt() + 0.02 * m.y_std();
            assert!((mean - mu[k]).abs() < tol, "mean {mean} vs {}", mu[k]);
            // Random features approximate the prior; allow a loose band.
            assert!((var.sqrt() - sd[k]).abs() < 0.15 * sd[k] + 0.02 * m.y_std(), "sd {} vs {}", var.sqrt(), sd[k]);
        }
    }

    #[test]
    fn sparse_pool_evaluation_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_points(&mut rng, 20, 6);
        let y: Vec<f64> = x.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
        let m = GpModel::fit(&x, &y, &KernelParams::default_for(6), &FitConfig::default()).unwrap();
        let f = m.pathwise_sample(&mut rng, 64);
        let mut pool = SparsePool::new(vec![0.5; 6]);
        pool.push(&[0, 3], &[0.1, 0.9]);
        pool.push(&[], &[]);
        pool.push(&[1, 2, 5], &[0.2, 0.3, 0.4]);
        let sparse = f.evaluate_pool(&pool);
        for (k, v) in sparse.iter().enumerate() {
            let dense = f.evaluate(&pool.point(k));
            assert!((v - dense).abs() < 1e-9);
        }
    }

    fn matern_oracle(a: &[f64], b: &[f64], ls: f64, sf2: f64) -> f64 {
        let r = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt() / ls;
        let s5 = 5f64.sqrt();
        sf2 * (1.0 + s5 * r + 5.0 * r * r / 3.0) * (-s5 * r).exp()
    }

    #[test]
    fn two_point_posterior_matches_closed_form() {
        let (ls, sf2, sn2) = (0.4, 1.7, 1e-4);
        let p = KernelParams::isotropic(2, ls, sf2, sn2);
        let x = [vec![0.1, 0.2], vec![0.6, 0.9]];
        let m = GpModel::condition(&x, &[3.0, -1.0], &p).unwrap();
        assert_eq!(m.jitter(), 0.0);
        // Standardized targets are +1 and -1 with mean 1 and std 2.
        let a = sf2 + sn2;
        let b = matern_oracle(&x[0], &x[1], ls, sf2);
        let det = a * a - b * b;
        let inv = [[a / det, -b / det], [-b / det, a / det]];
        for q in [vec![0.3, 0.5], vec![0.1, 0.2], vec![0.95, 0.05]] {
            let k = [matern_oracle(&x[0], &q, ls, sf2), matern_oracle(&x[1], &q, ls, sf2)];
            let alpha = [inv[0][0] - inv[0][1], inv[1][0] - inv[1][1]];
            let mean = 1.0 + 2.0 * (k[0] * alpha[0] + k[1] * alpha[1]);
            let quad = k[0] * (inv[0][0] * k[0] + inv[0][1] * k[1]) + k[1] * (inv[1][0] * k[0] + inv[1][1] * k[1]);
            let std = 2.0 * (sf2 - quad).max(0.0).sqrt();
            let (mu, sd) = m.predict(std::slice::from_ref(&q)).unwrap();
            assert!((mu[0] - mean).abs() < 1e-10, "{} vs {mean}", mu[0]);
            assert!((sd[0] - std).abs() < 1e-10, "{} vs {std}", sd[0]);
        }
    }

    #[test]
    fn noiseless_training_points_interpolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_points(&mut rng, 20, 3);
        let y: Vec<f64> = x.iter().map(|p| (3.0 * p[0]).sin() + p[1] * p[2]).collect();
        let p = KernelParams::isotropic(3, 0.5, 1.0, 1e-8);
        let m = GpModel::condition(&x, &y, &p).unwrap();
        let (mu, _) = m.predict(&x).unwrap();
        for (a, b) in mu.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let x = random_points(&mut rng, 15, 3);
            let y: Vec<f64> = x.iter().map(|p| (4.0 * p[0]).cos() - p[1] + 0.1 * rng.random::<f64>()).collect();
            let params = KernelParams {
                log_lengthscales: (0..3).map(|_| rng.random_range(-1.5..0.5)).collect(),
                log_signal_variance: rng.random_range(-0.5..0.5),
                log_noise_variance: rng.random_range(-6.0..-2.0),
            };
            let (_, grad) = log_marginal_likelihood(&x, &y, &params).unwrap();
            let base = params.to_vec();
            let h = 1e-5;
            for k in 0..base.len() {
                let mut up = base.clone();
                let mut dn = base.clone();
                up[k] += h;
                dn[k] -= h;
                let fu = log_marginal_likelihood(&x, &y, &KernelParams::from_vec(&up)).unwrap().0;
                let fd = log_marginal_likelihood(&x, &y, &KernelParams::from_vec(&dn)).unwrap().0;
                let numeric = (fu - fd) / (2.0 * h);
                let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-4, "trial {trial} param {k}: {} vs {numeric}", grad[k]);
            }
        }
    }

    #[test]
    fn fitted_lengthscale_recovers_generating_prior() {
        let truth = KernelParams::isotropic(2, 0.3, 1.0, 1e-6);
        let mut fitted = Vec::new();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = random_points(&mut rng, 60, 2);
            let k = DMatrix::from_fn(60, 60, |i, j| {
                matern_kernel(&x[i], &x[j], &truth).unwrap() + if i == j { 1e-6 } else { 0.0 }
            });
            let l = k.cholesky().unwrap().l();
            let eps = DVector::from_fn(60, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y: Vec<f64> = (l * eps).iter().copied().collect();
            let init = KernelParams::default_for(2);
            let model = GpModel::fit(&x, &y, &init, &FitConfig { iterations: 100, seed, ..FitConfig::default() }).unwrap();
            let ls = model.params().lengthscales();
            fitted.push((ls[0] * ls[1]).sqrt());
        }
        fitted.sort_by(f64::total_cmp);
        let median = 0.5 * (fitted[4] + fitted[5]);
        assert!((0.15..=0.6).contains(&median), "median lengthscale {median}, all {fitted:?}");
    }

    #[test]
    fn cholesky_inverse_matches_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = DMatrix::<f64>::from_fn(30, 30, |_, _| rng.random::<f64>() - 0.5);
        let k = &a * a.transpose() + DMatrix::<f64>::identity(30, 30) * 0.1;
        let inv = inverse_from_cholesky(&Cholesky::new(k.clone()).unwrap());
        let err = (&inv * &k - DMatrix::<f64>::identity(30, 30)).abs().max();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn fit_improves_marginal_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_points(&mut rng, 30, 2);
        let y: Vec<f64> = x.iter().map(|p| (8.0 * p[0]).sin()).collect();
        let init = KernelParams::isotropic(2, 2.0, 1.0, 1e-2);
        let before = GpModel::condition(&x, &y, &init).unwrap().log_marginal_likelihood();
        let fitted = GpModel::fit(&x, &y, &init, &FitConfig::default()).unwrap();
        assert!(fitted.log_marginal_likelihood() > before);
        // The irrelevant second input should get the longer lengthscale.
        let ls = fitted.params().lengthscales();
        assert!(ls[1] > ls[0], "{ls:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prediction_invariant_to_permutation_and_affine_targets(
            seed in 0u64..1000,
            shift in -50.0f64..50.0,
            scale in 0.1f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_points(&mut rng, 10, 2);
            let y: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
            let p = KernelParams::isotropic(2, 0.3, 1.0, 1e-4);
            let q = random_points(&mut rng, 4, 2);
            let (mu, sd) = GpModel::condition(&x, &y, &p).unwrap().predict(&q).unwrap();

            let mut idx: Vec<usize> = (0..10).collect();
            idx.reverse();
            idx.swap(2, 7);
            let xp: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
            let yp: Vec<f64> = idx.iter().map(|&i| shift + scale * y[i]).collect();
            let (mu2, sd2) = GpModel::condition(&xp, &yp, &p).unwrap().predict(&q).unwrap();
            for j in 0..4 {
                prop_assert!((shift + scale * mu[j] - mu2[j]).abs() < 1e-8 * (1.0 + shift.abs() + scale));
                prop_assert!((scale * sd[j] - sd2[j]).abs() < 1e-8 * scale);
            }
        }
    }
}
