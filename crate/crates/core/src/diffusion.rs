//! Diffusion mathematics: schedules, the forward process, closed-form
//! posteriors, perturbed reverse steps, sampling, Gaussian KL and the
//! variational bound.
//!
//! Steps are 1-based: `t ∈ 1..=T`, and `ᾱ_0 = 1`. All cumulative quantities
//! use `ᾱ_t`; in particular the reverse mean is
//!
//! ```text
//! μ(z_t, t) = (z_t − β_t / √(1 − ᾱ_t) · ε̂) / √α_t
//! ```
//!
//! and the reverse variance is the posterior variance `β̃_t`, with `β_1` used at
//! `t = 1` where `β̃_1 = 0`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HdmError, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BetaDirection {
    #[default]
    Increasing,
    Decreasing,
}

/// Linear β schedule with derived α and ᾱ.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of β between the two endpoints over `steps`
    /// steps. With [`BetaDirection::Decreasing`] the larger endpoint comes
    /// first.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, direction: BetaDirection) -> Result<Self> {
        if steps == 0 {
            return Err(HdmError::param("schedule needs at least one step"));
        }
        for b in [beta_start, beta_end] {
            if !(b > 0.0 && b < 1.0) {
                return Err(HdmError::param(format!("beta endpoint {b} outside (0, 1)")));
            }
        }
        let (lo, hi) = match direction {
            BetaDirection::Increasing => (beta_start.min(beta_end), beta_start.max(beta_end)),
            BetaDirection::Decreasing => (beta_start.max(beta_end), beta_start.min(beta_end)),
        };
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    lo
                } else {
                    let f = i as f64 / (steps - 1) as f64;
                    lo * (1.0 - f) + hi * f
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(HdmError::param("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(HdmError::param(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(HdmError::contract(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// Variance of the model's reverse transition: `β̃_t`, or `β_1` at `t = 1`.
    pub fn reverse_variance(&self, t: usize) -> f64 {
        if t == 1 {
            self.beta(1)
        } else {
            self.posterior_variance(t)
        }
    }
}

/// Diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Grid,
    pub var: Grid,
}

impl GaussianStats {
    pub fn new(mean: Grid, var: Grid) -> Result<Self> {
        mean.ensure_same_shape(&var, "gaussian stats")?;
        Ok(GaussianStats { mean, var })
    }

    pub fn isotropic(mean: Grid, var: f64) -> Self {
        let var = Grid::full(mean.shape(), var);
        GaussianStats { mean, var }
    }

    fn check_positive(&self, what: &str) -> Result<()> {
        if self.var.data().iter().any(|v| !(*v > 0.0)) {
            return Err(HdmError::contract(format!("{what}: variances must be positive")));
        }
        Ok(())
    }
}

/// A latent together with its diffusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Grid,
    pub t: usize,
}

/// `z_t = √ᾱ_t · z_0 + √(1 − ᾱ_t) · ε`.
pub fn forward_sample(z0: &Grid, t: usize, eps: &Grid, sched: &NoiseSchedule) -> Result<LatentState> {
    if t > sched.steps() {
        return Err(HdmError::contract(format!("step {t} beyond schedule length {}", sched.steps())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let z = z0.zip_with(eps, |x, e| a * x + b * e)?;
    Ok(LatentState { z, t })
}

/// One forward transition `q(z_t | z_{t−1}) = N(√(1 − β_t) z_{t−1}, β_t I)`.
pub fn forward_transition(z_prev: &Grid, t: usize, eps: &Grid, sched: &NoiseSchedule) -> Result<Grid> {
    sched.check(t)?;
    let b = sched.beta(t);
    let (a, s) = ((1.0 - b).sqrt(), b.sqrt());
    z_prev.zip_with(eps, |x, e| a * x + s * e)
}

/// Closed-form `q(z_{t−1} | z_t, z_0)`.
pub fn forward_posterior(z0: &Grid, zt: &Grid, t: usize, sched: &NoiseSchedule) -> Result<GaussianStats> {
    sched.check(t)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let mean = z0.zip_with(zt, |a, b| c0 * a + ct * b)?;
    Ok(GaussianStats::isotropic(mean, sched.posterior_variance(t)))
}

/// Reverse mean from an ε prediction.
pub fn reverse_mean(zt: &Grid, eps_hat: &Grid, t: usize, sched: &NoiseSchedule) -> Result<Grid> {
    sched.check(t)?;
    let beta = sched.beta(t);
    let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    zt.zip_with(eps_hat, |z, e| inv * (z - coef * e))
}

/// Perturbed reverse step with an explicit standard-normal draw:
/// `z_{t−1} = μ + √((1 + τ) Σ) ⊙ noise`.
pub fn reverse_step_with_noise(
    zt: &LatentState,
    eps_hat: &Grid,
    tau: f64,
    sigma: &Grid,
    sched: &NoiseSchedule,
    noise: &Grid,
) -> Result<LatentState> {
    if !(tau >= 0.0) {
        return Err(HdmError::param(format!("tau must be non-negative, got {tau}")));
    }
    let mean = reverse_mean(&zt.z, eps_hat, zt.t, sched)?;
    mean.ensure_same_shape(sigma, "reverse step variance")?;
    mean.ensure_same_shape(noise, "reverse step noise")?;
    let scale = 1.0 + tau;
    let z = Grid::from_vec(
        mean.shape(),
        mean.data()
            .iter()
            .zip(sigma.data())
            .zip(noise.data())
            .map(|((m, s), n)| m + (scale * s).sqrt() * n)
            .collect(),
    )?;
    Ok(LatentState { z, t: zt.t - 1 })
}

/// Perturbed reverse step drawing its noise from `rng`.
pub fn reverse_step<R: Rng + ?Sized>(
    zt: &LatentState,
    eps_hat: &Grid,
    tau: f64,
    sigma: &Grid,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentState> {
    let noise = Grid::randn(zt.z.shape(), rng);
    reverse_step_with_noise(zt, eps_hat, tau, sigma, sched, &noise)
}

/// Anything that predicts ε from `(z_t, t)`.
pub trait EpsModel {
    fn predict_eps(&self, zt: &Grid, t: usize) -> Result<Grid>;
}

/// Shifts the reverse mean at step `t`, e.g. by a classifier gradient.
pub trait MeanShift {
    /// Returns the guided mean given the unguided mean and variance.
    fn shift(&self, zt: &Grid, t: usize, mean: &Grid, var: &Grid) -> Result<Grid>;
}

/// Result of [`sample_trajectory`]: the final sample and every visited state
/// from `z_T` down to `z_0`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub sample: Grid,
    pub states: Vec<LatentState>,
}

/// Ancestral sampling from `z_T ~ N(0, I)` down to `z_0`.
pub fn sample_trajectory<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    shape: crate::grid::Shape,
    sched: &NoiseSchedule,
    tau: f64,
    guidance: Option<&dyn MeanShift>,
    rng: &mut R,
) -> Result<Trajectory> {
    let z_t = Grid::randn(shape, rng);
    let mut state = LatentState { z: z_t, t: sched.steps() };
    let mut states = vec![state.clone()];
    while state.t > 0 {
        let t = state.t;
        let eps_hat = model.predict_eps(&state.z, t)?;
        let var = Grid::full(shape, sched.reverse_variance(t));
        let noise = Grid::randn(shape, rng);
        state = match guidance {
            None => reverse_step_with_noise(&state, &eps_hat, tau, &var, sched, &noise)?,
            Some(g) => {
                let mean = reverse_mean(&state.z, &eps_hat, t, sched)?;
                let guided = g.shift(&state.z, t, &mean, &var)?;
                let s = 1.0 + tau;
                let z = Grid::from_vec(
                    shape,
                    guided
                        .data()
                        .iter()
                        .zip(var.data())
                        .zip(noise.data())
                        .map(|((m, v), n)| m + (s * v).sqrt() * n)
                        .collect(),
                )?;
                LatentState { z, t: t - 1 }
            }
        };
        states.push(state.clone());
    }
    Ok(Trajectory {
        sample: state.z,
        states,
    })
}

/// KL divergence `KL(p ‖ q)` between diagonal Gaussians, summed over elements.
pub fn gaussian_kl(p: &GaussianStats, q: &GaussianStats) -> Result<f64> {
    p.mean.ensure_same_shape(&q.mean, "gaussian_kl")?;
    p.mean.ensure_same_shape(&p.var, "gaussian_kl")?;
    q.mean.ensure_same_shape(&q.var, "gaussian_kl")?;
    p.check_positive("gaussian_kl p")?;
    q.check_positive("gaussian_kl q")?;
    let mut kl = 0.0;
    for i in 0..p.mean.len() {
        let (m1, v1) = (p.mean.data()[i], p.var.data()[i]);
        let (m2, v2) = (q.mean.data()[i], q.var.data()[i]);
        kl += 0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0);
    }
    Ok(kl)
}

/// Full log density of a diagonal Gaussian, `−½ Σ [(z−μ)²/σ² + ln σ² + ln 2π]`.
pub fn diag_gaussian_log_density(z: &Grid, mean: &Grid, var: &Grid) -> Result<f64> {
    z.ensure_same_shape(mean, "log density")?;
    z.ensure_same_shape(var, "log density")?;
    let mut acc = 0.0;
    for ((x, m), v) in z.data().iter().zip(mean.data()).zip(var.data()) {
        if !(*v > 0.0) {
            return Err(HdmError::contract("log density: variances must be positive"));
        }
        acc += (x - m).powi(2) / v + v.ln() + (2.0 * PI).ln();
    }
    Ok(-0.5 * acc)
}

/// Gives the reverse transition `p(z_{t−1} | z_t)` as a diagonal Gaussian.
pub trait ReverseModel {
    fn reverse(&self, zt: &Grid, t: usize) -> Result<GaussianStats>;
}

/// ε-parameterized reverse model with the fixed variance of
/// [`NoiseSchedule::reverse_variance`].
pub struct EpsReverse<'a, M: ?Sized> {
    pub model: &'a M,
    pub sched: &'a NoiseSchedule,
}

impl<M: EpsModel + ?Sized> ReverseModel for EpsReverse<'_, M> {
    fn reverse(&self, zt: &Grid, t: usize) -> Result<GaussianStats> {
        let eps = self.model.predict_eps(zt, t)?;
        let mean = reverse_mean(zt, &eps, t, self.sched)?;
        Ok(GaussianStats::isotropic(mean, self.sched.reverse_variance(t)))
    }
}

/// Monte-Carlo estimate of the variational lower bound on `log p(z_0)`:
///
/// `E_q[log p(z_0|z_1)] − Σ_{t≥2} KL(q(z_{t−1}|z_t,z_0) ‖ p(z_{t−1}|z_t)) − KL(q(z_T|z_0) ‖ N(0, I))`.
///
/// Returns the mean estimate and its standard error over `n_mc` draws.
pub fn estimate_vlb<M: ReverseModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    z0: &Grid,
    sched: &NoiseSchedule,
    n_mc: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n_mc == 0 {
        return Err(HdmError::param("estimate_vlb needs at least one sample"));
    }
    let steps = sched.steps();
    let shape = z0.shape();
    // prior term is deterministic
    let ab_t = sched.alpha_bar(steps);
    let q_t = GaussianStats::isotropic(z0.map(|x| ab_t.sqrt() * x), 1.0 - ab_t);
    let prior = GaussianStats::isotropic(Grid::zeros(shape), 1.0);
    let prior_kl = gaussian_kl(&q_t, &prior)?;
    let mut draws = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let mut total = -prior_kl;
        for t in 1..=steps {
            let eps = Grid::randn(shape, rng);
            let zt = forward_sample(z0, t, &eps, sched)?.z;
            let p = model.reverse(&zt, t)?;
            if t == 1 {
                total += diag_gaussian_log_density(z0, &p.mean, &p.var)?;
            } else {
                let q = forward_posterior(z0, &zt, t, sched)?;
                total -= gaussian_kl(&q, &p)?;
            }
        }
        draws.push(total);
    }
    Ok(mean_and_stderr(&draws))
}

pub(crate) fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `E[ε | z_t]` when the data are `N(m, σ² I)`.
pub fn gaussian_optimal_eps(zt: &Grid, t: usize, data_mean: f64, data_var: f64, sched: &NoiseSchedule) -> Result<Grid> {
    if !(data_var >= 0.0) {
        return Err(HdmError::param("data variance must be non-negative"));
    }
    let ab = sched.alpha_bar(t);
    let denom = ab * data_var + 1.0 - ab;
    let k = (1.0 - ab).sqrt() / denom;
    Ok(zt.map(|z| k * (z - ab.sqrt() * data_mean)))
}

/// ε model that returns the exact posterior-mean noise for Gaussian data.
#[derive(Debug, Clone, Copy)]
pub struct GaussianOracle<'a> {
    pub mean: f64,
    pub var: f64,
    pub sched: &'a NoiseSchedule,
}

impl EpsModel for GaussianOracle<'_> {
    fn predict_eps(&self, zt: &Grid, t: usize) -> Result<Grid> {
        gaussian_optimal_eps(zt, t, self.mean, self.var, self.sched)
    }
}

/// The exact reverse transition `q(z_{t−1} | z_t)` for `N(m, σ² I)` data.
///
/// Both marginals are Gaussian, so the conditional follows from their joint
/// covariance.
impl ReverseModel for GaussianOracle<'_> {
    fn reverse(&self, zt: &Grid, t: usize) -> Result<GaussianStats> {
        let (ab_t, ab_p) = (self.sched.alpha_bar(t), self.sched.alpha_bar(t - 1));
        let (m, s2) = (self.mean, self.var);
        let var_p = ab_p * s2 + 1.0 - ab_p;
        let var_t = ab_t * s2 + 1.0 - ab_t;
        // Cov(z_{t-1}, z_t) = √α_t · Var(z_{t-1})
        let cov = self.sched.alpha(t).sqrt() * var_p;
        let gain = cov / var_t;
        let mean = zt.map(|z| ab_p.sqrt() * m + gain * (z - ab_t.sqrt() * m));
        let var = (var_p - gain * cov).max(0.0);
        if var > 0.0 {
            Ok(GaussianStats::isotropic(mean, var))
        } else {
            Err(HdmError::contract("oracle reverse variance vanished"))
        }
    }
}
