//! Anomaly generation: training the denoiser on normal images and synthesizing
//! labelled anomalies by perturbed, mask-localized reverse diffusion.
//!
//! A [`PerturbationPlan`] fixes where (a smooth random mask), how strongly
//! (`τ`) and when (a window of reverse steps) the disturbance acts. Early
//! windows (steps near `T`) yield coarse, structural defects; late windows
//! yield fine, textural ones. Inside the mask, selected steps sample from
//! `N(μ, (1 + τ) Σ)` and receive an extra `τ · √β_t · ξ` injection. Outside
//! the mask every step is the unperturbed one, so the plan's mask is an exact
//! pixel label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserParams, ForwardPass, NormObservation, OutputGrads, ParamGrads};
use crate::diffusion::{forward_posterior, forward_sample, gaussian_kl, reverse_mean, EpsModel, GaussianStats, NoiseSchedule};
use crate::error::{HdmError, Result};
use crate::grid::{Grid, Shape};
use crate::optim::{cosine_lr, Adam};

/// Maps an image in `[0, 1]` to the diffusion latent range `[-1, 1]`.
pub fn to_latent(image: &Grid) -> Grid {
    image.map(|v| 2.0 * v - 1.0)
}

/// Inverse of [`to_latent`], clamped to `[0, 1]`.
pub fn from_latent(z: &Grid) -> Grid {
    z.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Where, when and how strongly a synthesized anomaly is disturbed.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationPlan {
    /// Binary single-channel mask, 1 inside the defect.
    pub mask: Grid,
    pub tau: f64,
    /// Reverse steps at which the disturbance is active, ascending.
    pub steps: Vec<usize>,
    /// Size in pixels of the noise cells that shape the mask boundary and the
    /// coherent part of the injected noise.
    pub smoothness: f64,
    /// Share of the injected noise variance that is a fixed low-frequency
    /// field instead of fresh white noise. The fixed part accumulates over the
    /// window and shifts local intensity; the white part roughens texture.
    pub coherence: f64,
    /// Seed of the private stream used for in-mask noise injection.
    pub seed: u64,
}

impl PerturbationPlan {
    pub fn area_fraction(&self) -> f64 {
        self.mask.mean()
    }

    pub fn is_active(&self, t: usize) -> bool {
        self.steps.binary_search(&t).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub tau_range: [f64; 2],
    pub blobs_range: [usize; 2],
    pub smoothness_range: [f64; 2],
    pub coherence_range: [f64; 2],
    /// Accepted mask area fraction.
    pub area_band: [f64; 2],
    /// Fraction of reverse steps covered by the disturbance window.
    pub step_fraction: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            tau_range: [0.1, 1.0],
            blobs_range: [1, 3],
            smoothness_range: [4.0, 16.0],
            coherence_range: [0.0, 1.0],
            area_band: [0.02, 0.30],
            step_fraction: 0.5,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.tau_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(HdmError::param(format!("tau range [{lo}, {hi}] must satisfy 0 <= lo <= hi")));
        }
        if self.blobs_range[0] > self.blobs_range[1] {
            return Err(HdmError::param("blob range is inverted"));
        }
        let [s0, s1] = self.smoothness_range;
        if !(s0 > 0.0 && s0 <= s1) {
            return Err(HdmError::param("smoothness range must be positive and ordered"));
        }
        let [c0, c1] = self.coherence_range;
        if !(0.0 <= c0 && c0 <= c1 && c1 <= 1.0) {
            return Err(HdmError::param("coherence range must lie in [0, 1] and be ordered"));
        }
        let [a0, a1] = self.area_band;
        if !(0.0 <= a0 && a0 < a1 && a1 <= 1.0) {
            return Err(HdmError::param("area band must satisfy 0 <= lo < hi <= 1"));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return Err(HdmError::param("step_fraction must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Bilinearly upsampled Gaussian noise with cells of `cell` pixels.
fn smooth_field<R: Rng + ?Sized>(h: usize, w: usize, cell: f64, rng: &mut R) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let coarse = Grid::randn(Shape::new(1, gh, gw), rng);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let a = coarse.get(0, y0, x0) * (1.0 - tx) + coarse.get(0, y0, x0 + 1) * tx;
            let b = coarse.get(0, y0 + 1, x0) * (1.0 - tx) + coarse.get(0, y0 + 1, x0 + 1) * tx;
            out[y * w + x] = a * (1.0 - ty) + b * ty;
        }
    }
    out
}

fn blob_union<R: Rng + ?Sized>(h: usize, w: usize, n_blobs: usize, cell: f64, rng: &mut R) -> Vec<f64> {
    let mut mask = vec![0.0; h * w];
    let side = h.min(w) as f64;
    for _ in 0..n_blobs {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let r = side * rng.random_range(0.08..0.22);
        let aspect = rng.random_range(0.6..1.6);
        let field = smooth_field(h, w, cell, rng);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / (r * aspect);
                let dx = (x as f64 + 0.5 - cx) * aspect / r;
                if (dy * dy + dx * dx).sqrt() + 0.35 * field[y * w + x] < 1.0 {
                    mask[y * w + x] = 1.0;
                }
            }
        }
    }
    mask
}

/// Draws a plan for images of `shape` whose reverse chain spans `1..=max_step`.
pub fn make_perturbation_plan<R: Rng + ?Sized>(rng: &mut R, shape: Shape, max_step: usize, cfg: &PlanConfig) -> Result<PerturbationPlan> {
    cfg.validate()?;
    if shape.height == 0 || shape.width == 0 {
        return Err(HdmError::param("perturbation plan needs a non-empty resolution"));
    }
    if max_step == 0 {
        return Err(HdmError::param("perturbation plan needs at least one step"));
    }
    let (h, w) = (shape.height, shape.width);
    let [t0, t1] = cfg.tau_range;
    let tau = if t0 == t1 { t0 } else { rng.random_range(t0..=t1) };
    let [s0, s1] = cfg.smoothness_range;
    let smoothness = if s0 == s1 { s0 } else { rng.random_range(s0..=s1) };
    let [c0, c1] = cfg.coherence_range;
    let coherence = if c0 == c1 { c0 } else { rng.random_range(c0..=c1) };
    let n_blobs = rng.random_range(cfg.blobs_range[0]..=cfg.blobs_range[1]);
    let seed = rng.random::<u64>();

    let mask = if n_blobs == 0 {
        vec![0.0; h * w]
    } else {
        let [lo, hi] = cfg.area_band;
        let mut accepted = None;
        for _ in 0..64 {
            let m = blob_union(h, w, n_blobs, smoothness, rng);
            let frac = m.iter().sum::<f64>() / (h * w) as f64;
            if frac >= lo && frac <= hi {
                accepted = Some(m);
                break;
            }
        }
        accepted.unwrap_or_else(|| fallback_disk(h, w, 0.5 * (lo + hi)))
    };

    let window = ((max_step as f64 * cfg.step_fraction).round() as usize).clamp(1, max_step);
    let first = rng.random_range(1..=max_step - window + 1);
    let steps = (first..first + window).collect();
    Ok(PerturbationPlan {
        mask: Grid::from_rows(h, w, mask)?,
        tau,
        steps,
        smoothness,
        coherence,
        seed,
    })
}

fn fallback_disk(h: usize, w: usize, frac: f64) -> Vec<f64> {
    let r = (frac * (h * w) as f64 / std::f64::consts::PI).sqrt();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            f64::from(((y - cy).powi(2) + (x - cx).powi(2)).sqrt() <= r)
        })
        .collect()
}

/// What a synthesis run starts from.
#[derive(Debug, Clone, Copy)]
pub enum SynthSource<'a> {
    /// Ancestral sampling from `z_T ~ N(0, I)`.
    Noise,
    /// Forward-noise a normal image (in `[0, 1]`) to `depth`, then denoise.
    /// Outside the mask the chain is pinned to the noised source, so the
    /// result equals the source there.
    Image { image: &'a Grid, depth: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedAnomaly {
    /// Image in `[0, 1]`.
    pub image: Grid,
    pub gt_mask: Grid,
    pub tau_used: f64,
    pub seed: u64,
}

fn blend(mask: &[f64], inside: &Grid, outside: &Grid) -> Grid {
    let c = inside.channels();
    let n = inside.shape().pixels();
    let mut out = outside.clone();
    for ch in 0..c {
        for (i, m) in mask.iter().enumerate() {
            if *m > 0.5 {
                out.data_mut()[ch * n + i] = inside.data()[ch * n + i];
            }
        }
    }
    out
}

/// Runs the perturbed reverse chain for `plan`.
///
/// The main `rng` is consumed exactly as by an unperturbed run from the same
/// source; in-mask injections use a private stream seeded from the plan.
pub fn synthesize_anomaly<M: EpsModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    shape: Shape,
    plan: &PerturbationPlan,
    source: SynthSource<'_>,
    rng: &mut R,
) -> Result<SynthesizedAnomaly> {
    if plan.mask.height() != shape.height || plan.mask.width() != shape.width {
        return Err(HdmError::contract("plan mask resolution differs from the image shape"));
    }
    if !(plan.tau >= 0.0) {
        return Err(HdmError::param("tau must be non-negative"));
    }
    let mask = plan.mask.data();
    let any_mask = mask.iter().any(|m| *m > 0.5);
    let mut inj_rng = Injection::new(plan, shape);

    let z_out = match source {
        SynthSource::Noise => {
            let mut base = Grid::randn(shape, rng);
            let mut anom: Option<Grid> = None;
            for t in (1..=sched.steps()).rev() {
                let var = sched.reverse_variance(t);
                let noise = Grid::randn(shape, rng);
                let base_eps = model.predict_eps(&base, t)?;
                let base_mean = reverse_mean(&base, &base_eps, t, sched)?;
                let next_base = base_mean.zip_with(&noise, |m, n| m + var.sqrt() * n)?;
                if any_mask && (anom.is_some() || plan.is_active(t)) {
                    let cur = anom.take().unwrap_or_else(|| base.clone());
                    let eps = model.predict_eps(&cur, t)?;
                    let mean = reverse_mean(&cur, &eps, t, sched)?;
                    let stepped = perturbed_step(&mean, var, &noise, plan, t, sched, &mut inj_rng);
                    anom = Some(blend(mask, &stepped, &next_base));
                }
                base = next_base;
            }
            anom.unwrap_or(base)
        }
        SynthSource::Image { image, depth } => {
            if depth == 0 || depth > sched.steps() {
                return Err(HdmError::param(format!("depth {depth} outside 1..={}", sched.steps())));
            }
            image.ensure_same_shape(&Grid::zeros(shape), "synthesis source")?;
            let x0 = to_latent(image);
            let eps = Grid::randn(shape, rng);
            let mut z = forward_sample(&x0, depth, &eps, sched)?.z;
            for t in (1..=depth).rev() {
                let var = sched.reverse_variance(t);
                let noise = Grid::randn(shape, rng);
                let known = if t > 1 {
                    let e = Grid::randn(shape, rng);
                    forward_sample(&x0, t - 1, &e, sched)?.z
                } else {
                    x0.clone()
                };
                let eps_hat = model.predict_eps(&z, t)?;
                let mean = reverse_mean(&z, &eps_hat, t, sched)?;
                let stepped = perturbed_step(&mean, var, &noise, plan, t, sched, &mut inj_rng);
                z = blend(mask, &stepped, &known);
            }
            z
        }
    };
    Ok(SynthesizedAnomaly {
        image: from_latent(&z_out),
        gt_mask: plan.mask.clone(),
        tau_used: plan.tau,
        seed: plan.seed,
    })
}

/// In-mask noise source of one synthesis run, drawn from the plan's private
/// stream: unit-variance mix of a fixed smooth field and fresh white noise.
struct Injection {
    rng: ChaCha8Rng,
    field: Vec<f64>,
    coherence: f64,
}

impl Injection {
    fn new(plan: &PerturbationPlan, shape: Shape) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let (h, w) = (shape.height, shape.width);
        let mut field = Vec::with_capacity(shape.len());
        for _ in 0..shape.channels {
            let f = smooth_field(h, w, plan.smoothness, &mut rng);
            let m = f.iter().sum::<f64>() / f.len() as f64;
            let sd = (f.iter().map(|v| (v - m).powi(2)).sum::<f64>() / f.len() as f64).sqrt().max(1e-12);
            field.extend(f.iter().map(|v| (v - m) / sd));
        }
        Injection {
            rng,
            field,
            coherence: plan.coherence,
        }
    }

    fn draw(&mut self, shape: Shape) -> Grid {
        let white = Grid::randn(shape, &mut self.rng);
        let (a, b) = ((1.0 - self.coherence).sqrt(), self.coherence.sqrt());
        let data = white.data().iter().zip(&self.field).map(|(n, f)| a * n + b * f).collect();
        Grid::from_vec(shape, data).expect("field matches shape")
    }
}

/// One reverse step with the plan's disturbance applied when `t` is active.
fn perturbed_step(
    mean: &Grid,
    var: f64,
    noise: &Grid,
    plan: &PerturbationPlan,
    t: usize,
    sched: &NoiseSchedule,
    inj: &mut Injection,
) -> Grid {
    if plan.is_active(t) {
        let inj = inj.draw(mean.shape());
        let scale = ((1.0 + plan.tau) * var).sqrt();
        let k = plan.tau * sched.beta(t).sqrt();
        Grid::from_vec(
            mean.shape(),
            mean.data()
                .iter()
                .zip(noise.data())
                .zip(inj.data())
                .map(|((m, n), i)| m + scale * n + k * i)
                .collect(),
        )
        .expect("shapes agree")
    } else {
        let s = var.sqrt();
        mean.zip_with(noise, |m, n| m + s * n).expect("shapes agree")
    }
}

/// KL term of one item: `KL(q(z_{t−1}|z_t,z_0) ‖ N(μ_θ, Σ_t))`. At `t = 1` the
/// posterior is a point mass and only the mean-mismatch part is kept.
pub fn kl_term(posterior: &GaussianStats, model_mean: &Grid, model_var: f64) -> Result<f64> {
    if posterior.var.data().iter().all(|v| *v > 0.0) {
        gaussian_kl(posterior, &GaussianStats::isotropic(model_mean.clone(), model_var))
    } else {
        posterior.mean.ensure_same_shape(model_mean, "kl_term")?;
        Ok(posterior
            .mean
            .data()
            .iter()
            .zip(model_mean.data())
            .map(|(a, b)| (a - b).powi(2) / (2.0 * model_var))
            .sum())
    }
}

/// Loss value with its parts, batch means.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DagmLossParts {
    pub total: f64,
    pub mse: f64,
    pub kl: f64,
}

/// Per-item inputs of [`dagm_loss_fixed`]: the step and noise draw.
#[derive(Debug, Clone)]
pub struct DagmDraw {
    pub t: usize,
    pub eps: Grid,
}

/// Draws `(t, ε)` for each item of a batch.
pub fn draw_dagm<R: Rng + ?Sized>(batch: &[Grid], sched: &NoiseSchedule, rng: &mut R) -> Vec<DagmDraw> {
    batch
        .iter()
        .map(|z0| DagmDraw {
            t: rng.random_range(1..=sched.steps()),
            eps: Grid::randn(z0.shape(), rng),
        })
        .collect()
}

/// `Σ_t λ_t L_KL + L_MSE` for fixed draws, with parameter gradients.
///
/// Both parts are per-element means; `lambda[t − 1]` weights step `t`.
/// `batch` holds latents (`[-1, 1]` range).
pub fn dagm_loss_fixed(
    params: &DenoiserParams,
    batch: &[Grid],
    draws: &[DagmDraw],
    sched: &NoiseSchedule,
    lambda: &[f64],
) -> Result<(DagmLossParts, ParamGrads, Vec<NormObservation>)> {
    if batch.is_empty() {
        return Err(HdmError::param("dagm_loss needs a non-empty batch"));
    }
    if lambda.len() != sched.steps() {
        return Err(HdmError::param(format!("lambda has {} entries, schedule {}", lambda.len(), sched.steps())));
    }
    let mut grads = params.zero_grads();
    let mut parts = DagmLossParts::default();
    let mut observations = Vec::with_capacity(batch.len());
    let nb = batch.len() as f64;
    for (z0, draw) in batch.iter().zip(draws) {
        let t = draw.t;
        let zt = forward_sample(z0, t, &draw.eps, sched)?.z;
        let pass = ForwardPass::run(params, &zt, t, true, false)?;
        let eps_hat = pass.tape.value(pass.built.eps_hat).clone();
        let d = z0.len() as f64;
        let mse = draw.eps.zip_with(&eps_hat, |e, h| (e - h).powi(2))?.sum() / d;

        let post = forward_posterior(z0, &zt, t, sched)?;
        let model_mean = reverse_mean(&zt, &eps_hat, t, sched)?;
        let var = sched.reverse_variance(t);
        let kl = kl_term(&post, &model_mean, var)? / d;
        let lam = lambda[t - 1];

        // d/dε̂ of MSE and of the KL mean term through μ_θ = (z_t − c ε̂)/√α_t
        let c = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let dmu_deps = -c / sched.alpha(t).sqrt();
        let mut g = Grid::zeros(zt.shape());
        for i in 0..g.len() {
            let dmse = -2.0 * (draw.eps.data()[i] - eps_hat.data()[i]) / d;
            let dkl = (model_mean.data()[i] - post.mean.data()[i]) / var * dmu_deps / d;
            g.data_mut()[i] = (dmse + lam * dkl) / nb;
        }
        let up = OutputGrads {
            eps_hat: Some(g),
            features: vec![],
        };
        let (pg, _) = pass.backward(params, &up)?;
        for (acc, gi) in grads.iter_mut().zip(pg) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
        parts.mse += mse / nb;
        parts.kl += kl / nb;
        parts.total += (lam * kl + mse) / nb;
        observations.push(pass.built.norm);
    }
    Ok((parts, grads, observations))
}

/// Draws fresh steps and noise, then evaluates [`dagm_loss_fixed`].
pub fn dagm_loss<R: Rng + ?Sized>(
    params: &DenoiserParams,
    batch: &[Grid],
    sched: &NoiseSchedule,
    lambda: &[f64],
    rng: &mut R,
) -> Result<(DagmLossParts, ParamGrads)> {
    let draws = draw_dagm(batch, sched, rng);
    let (parts, grads, _) = dagm_loss_fixed(params, batch, &draws, sched, lambda)?;
    Ok((parts, grads))
}

/// Settings for [`train_dagm`].
#[derive(Debug, Clone, PartialEq)]
pub struct DagmTrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_floor: f64,
    /// Uniform `λ_t`.
    pub lambda: f64,
    pub norm_momentum: f64,
}

/// Minimizes the generation loss on latents of normal images.
///
/// `sample_batch` supplies each step's batch (in latent range); it is where
/// augmentation happens. Returns the per-step loss log.
pub fn train_dagm<R, F>(
    params: &mut DenoiserParams,
    sched: &NoiseSchedule,
    settings: &DagmTrainSettings,
    mut sample_batch: F,
    rng: &mut R,
) -> Result<Vec<DagmLossParts>>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<Vec<Grid>>,
{
    if params.frozen && settings.steps > 0 {
        return Err(HdmError::contract("cannot train frozen parameters"));
    }
    let lambda = vec![settings.lambda; sched.steps()];
    let mut opt = Adam::new(&params.tensors);
    let mut log = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let batch = sample_batch(rng)?;
        let draws = draw_dagm(&batch, sched, rng);
        let (parts, grads, obs) = dagm_loss_fixed(params, &batch, &draws, sched, &lambda)?;
        if !parts.total.is_finite() {
            return Err(HdmError::Numeric(format!("generation loss is {} at step {step}", parts.total)));
        }
        let lr = cosine_lr(settings.lr, step, settings.steps, settings.lr_floor);
        opt.step(&mut params.tensors, &grads, lr, params.frozen)?;
        params.update_running_stats(&obs, settings.norm_momentum * lr / settings.lr)?;
        log.push(parts);
    }
    Ok(log)
}
