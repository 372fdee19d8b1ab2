//! Discrimination: teacher/student features, the per-pixel classifier,
//! classifier guidance and class-conditional trajectory likelihoods.
//!
//! The teacher is the frozen generation network; the student starts as a copy
//! and is trained on both normal and synthesized anomalous images. Features
//! are the upsampled decoder taps of both branches at a few noise levels,
//! stacked along channels. The pixel classifier is a stack of 1×1 layers over
//! the concatenated stacks, so it never mixes pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::dagm::to_latent;
use crate::denoiser::{
    build_forward, forward, to_storage_precision, BoundParams, DenoiserParams, NamedTensor, ParamGrads,
};
use crate::diffusion::{
    diag_gaussian_log_density, forward_posterior, forward_sample, forward_transition, reverse_mean, MeanShift,
    NoiseSchedule, ReverseModel,
};
use crate::error::{HdmError, Result};
use crate::grid::{Grid, Shape};

/// Image or pixel class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }
}

/// Default feature steps `{T/4, T/2, 3T/4}`, deduplicated and at least 1.
pub fn default_timesteps(steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = [steps / 4, steps / 2, 3 * steps / 4].iter().map(|t| (*t).max(1)).collect();
    ts.dedup();
    ts
}

/// Teacher and student feature stacks of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub teacher: Grid,
    pub student: Grid,
    pub timesteps: Vec<usize>,
}

fn check_timesteps(timesteps: &[usize], sched: &NoiseSchedule) -> Result<()> {
    if timesteps.is_empty() {
        return Err(HdmError::param("feature timesteps must be nonempty"));
    }
    if let Some(t) = timesteps.iter().find(|t| **t == 0 || **t > sched.steps()) {
        return Err(HdmError::param(format!("feature timestep {t} outside 1..={}", sched.steps())));
    }
    Ok(())
}

/// One standard-normal draw per feature timestep, shared by both branches.
pub fn draw_feature_noise<R: Rng + ?Sized>(shape: Shape, timesteps: &[usize], rng: &mut R) -> Vec<Grid> {
    timesteps.iter().map(|_| Grid::randn(shape, rng)).collect()
}

/// Noised inputs of `image` (in `[0, 1]`) at each feature timestep.
pub fn noised_inputs(image: &Grid, sched: &NoiseSchedule, timesteps: &[usize], noise: &[Grid]) -> Result<Vec<Grid>> {
    check_timesteps(timesteps, sched)?;
    let z0 = to_latent(image);
    timesteps
        .iter()
        .zip(noise)
        .map(|(&t, e)| Ok(forward_sample(&z0, t, e, sched)?.z))
        .collect()
}

/// Stacks the taps of one branch over all noised inputs.
pub fn branch_features(params: &DenoiserParams, inputs: &[Grid], timesteps: &[usize]) -> Result<Grid> {
    let mut taps = Vec::new();
    for (z, &t) in inputs.iter().zip(timesteps) {
        taps.extend(forward(params, z, t)?.features);
    }
    Grid::concat_channels(&taps.iter().collect::<Vec<_>>())
}

/// [`extract_features`] with explicit noise.
pub fn extract_features_with_noise(
    teacher: &DenoiserParams,
    student: &DenoiserParams,
    image: &Grid,
    sched: &NoiseSchedule,
    timesteps: &[usize],
    noise: &[Grid],
) -> Result<FeaturePair> {
    let inputs = noised_inputs(image, sched, timesteps, noise)?;
    Ok(FeaturePair {
        teacher: branch_features(teacher, &inputs, timesteps)?,
        student: branch_features(student, &inputs, timesteps)?,
        timesteps: timesteps.to_vec(),
    })
}

/// Noises `image` to each timestep and stacks both branches' taps.
pub fn extract_features<R: Rng + ?Sized>(
    teacher: &DenoiserParams,
    student: &DenoiserParams,
    image: &Grid,
    sched: &NoiseSchedule,
    timesteps: &[usize],
    rng: &mut R,
) -> Result<FeaturePair> {
    let noise = draw_feature_noise(image.shape(), timesteps, rng);
    extract_features_with_noise(teacher, student, image, sched, timesteps, &noise)
}

/// Per-pixel Euclidean distance between the stacks and its spatial mean.
pub fn feature_distance(fp: &FeaturePair) -> Result<(Grid, f64)> {
    let (e, a) = (&fp.teacher, &fp.student);
    if e.shape() != a.shape() {
        return Err(HdmError::contract(format!("teacher stack {} vs student stack {}", e.shape(), a.shape())));
    }
    let n = e.shape().pixels();
    let mut d = vec![0.0; n];
    for c in 0..e.channels() {
        for ((acc, x), y) in d.iter_mut().zip(e.channel(c)).zip(a.channel(c)) {
            *acc += (x - y).powi(2);
        }
    }
    d.iter_mut().for_each(|v| *v = v.sqrt());
    let map = Grid::from_rows(e.height(), e.width(), d)?;
    let mean = map.mean();
    Ok((map, mean))
}

/// `∂ mean_p ‖E_p − A_p‖ / ∂A`, zero where the two stacks coincide.
pub fn distance_grad_student(fp: &FeaturePair) -> Result<Grid> {
    let (map, _) = feature_distance(fp)?;
    let n = map.len() as f64;
    let mut g = Grid::zeros(fp.student.shape());
    let np = map.len();
    for c in 0..fp.student.channels() {
        for p in 0..np {
            let d = map.data()[p];
            if d > 0.0 {
                g.data_mut()[c * np + p] = -(fp.teacher.data()[c * np + p] - fp.student.data()[c * np + p]) / (d * n);
            }
        }
    }
    Ok(g)
}

/// Per-pixel classifier: input standardization, 1×1 layers with SiLU, two
/// logits (normal, anomalous).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelClassifierParams {
    pub in_channels: usize,
    pub hidden: Vec<usize>,
    pub tensors: Vec<NamedTensor>,
}

const INPUT_VAR_FLOOR: f64 = 1e-4;

impl PixelClassifierParams {
    fn layout(in_channels: usize, hidden: &[usize]) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = vec![
            ("input.mean".to_string(), vec![in_channels], false),
            ("input.var".to_string(), vec![in_channels], false),
        ];
        let mut fan_in = in_channels;
        for (i, &h) in hidden.iter().enumerate() {
            out.push((format!("l{i}.weight"), vec![h, fan_in, 1, 1], true));
            out.push((format!("l{i}.bias"), vec![h], true));
            fan_in = h;
        }
        out.push(("out.weight".to_string(), vec![2, fan_in, 1, 1], true));
        out.push(("out.bias".to_string(), vec![2], true));
        out
    }

    pub fn init(in_channels: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if in_channels == 0 || hidden.contains(&0) {
            return Err(HdmError::param("classifier widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = Self::layout(in_channels, hidden)
            .into_iter()
            .map(|(name, shape, trainable)| {
                let n: usize = shape.iter().product();
                let values = if name.ends_with(".weight") {
                    let std = (1.0 / shape[1] as f64).sqrt();
                    (0..n)
                        .map(|_| to_storage_precision(std * rng.sample::<f64, _>(StandardNormal)))
                        .collect()
                } else if name == "input.var" {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                };
                NamedTensor {
                    name,
                    shape,
                    values,
                    trainable,
                }
            })
            .collect();
        Ok(PixelClassifierParams {
            in_channels,
            hidden: hidden.to_vec(),
            tensors,
        })
    }

    /// All weights and biases set to zero.
    pub fn zeroed(in_channels: usize, hidden: &[usize]) -> Result<Self> {
        let mut p = Self::init(in_channels, hidden, 0)?;
        for t in p.tensors.iter_mut().filter(|t| t.trainable) {
            t.values.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.tensors.iter().map(|t| vec![0.0; t.values.len()]).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.values.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// Sets the input standardization to the channel statistics of `stacks`.
    pub fn fit_input_stats(&mut self, stacks: &[Grid]) -> Result<()> {
        let c = self.in_channels;
        if stacks.is_empty() {
            return Err(HdmError::param("no feature stacks to fit"));
        }
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0.0;
        for s in stacks {
            if s.channels() != c {
                return Err(HdmError::contract(format!("stack has {} channels, classifier {c}", s.channels())));
            }
            for ch in 0..c {
                for v in s.channel(ch) {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += s.shape().pixels() as f64;
        }
        let mean: Vec<f64> = sum.iter().map(|s| to_storage_precision(s / n)).collect();
        let var: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| to_storage_precision((q / n - m * m).max(0.0) + INPUT_VAR_FLOOR))
            .collect();
        self.tensors[0].values = mean;
        self.tensors[1].values = var;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let layout = Self::layout(self.in_channels, &self.hidden);
        if layout.len() != self.tensors.len() {
            return Err(HdmError::format("classifier tensor count does not match its widths"));
        }
        for ((name, shape, _), t) in layout.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.values.len() != shape.iter().product::<usize>() {
                return Err(HdmError::format(format!("classifier tensor {} is malformed", t.name)));
            }
        }
        if self.tensors[1].values.iter().any(|v| !(*v > 0.0)) {
            return Err(HdmError::format("classifier input variances must be positive"));
        }
        Ok(())
    }
}

impl From<&PixelClassifierParams> for Checkpoint {
    fn from(p: &PixelClassifierParams) -> Self {
        Checkpoint {
            kind: "classifier".into(),
            frozen: false,
            meta: vec![
                ("in_channels".into(), p.in_channels.to_string()),
                (
                    "hidden".into(),
                    p.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
                ),
            ],
            tensors: p.tensors.clone(),
        }
    }
}

impl TryFrom<Checkpoint> for PixelClassifierParams {
    type Error = HdmError;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.kind != "classifier" {
            return Err(HdmError::format(format!("expected a classifier checkpoint, found `{}`", c.kind)));
        }
        let p = PixelClassifierParams {
            in_channels: c.meta_usize("in_channels")?,
            hidden: c.meta_list("hidden")?,
            tensors: c.tensors,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Classifier tensors placed on a tape.
pub struct BoundClassifier {
    vars: Vec<Var>,
    tracked: bool,
}

impl BoundClassifier {
    pub fn bind(tape: &mut Tape, params: &PixelClassifierParams, track: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| tape.leaf(Grid::vector(t.values.clone()), track && t.trainable))
            .collect();
        BoundClassifier { vars, tracked: track }
    }

    pub fn collect(&self, params: &PixelClassifierParams, grads: &crate::autodiff::Gradients) -> ParamGrads {
        params
            .tensors
            .iter()
            .zip(&self.vars)
            .map(|(t, v)| match (self.tracked, grads.get(*v)) {
                (true, Some(g)) => g.data().to_vec(),
                _ => vec![0.0; t.values.len()],
            })
            .collect()
    }
}

/// Appends the classifier to a tape; returns the `2 × H × W` logits.
pub fn build_classifier(tape: &mut Tape, params: &PixelClassifierParams, bound: &BoundClassifier, input: Var) -> Result<Var> {
    let c = tape.value(input).channels();
    if c != params.in_channels {
        return Err(HdmError::contract(format!("classifier expects {} channels, got {c}", params.in_channels)));
    }
    let ones = tape.constant(Grid::full(Shape::new(c, 1, 1), 1.0));
    let zeros = tape.constant(Grid::zeros(Shape::new(c, 1, 1)));
    let mut h = tape.norm(input, ones, zeros, &params.tensors[0].values, &params.tensors[1].values, 0.0)?;
    for (i, &w) in params.hidden.iter().enumerate() {
        h = tape.conv(h, bound.vars[2 + 2 * i], bound.vars[3 + 2 * i], w, 1)?;
        h = tape.silu(h);
    }
    let k = 2 + 2 * params.hidden.len();
    tape.conv(h, bound.vars[k], bound.vars[k + 1], 2, 1)
}

fn classifier_input(fp: &FeaturePair) -> Result<Grid> {
    Grid::concat_channels(&[&fp.teacher, &fp.student])
}

/// Per-pixel logits `(normal, anomalous)`.
pub fn pixel_classify(params: &PixelClassifierParams, fp: &FeaturePair) -> Result<Grid> {
    let mut tape = Tape::new();
    let bound = BoundClassifier::bind(&mut tape, params, false);
    let x = tape.constant(classifier_input(fp)?);
    let logits = build_classifier(&mut tape, params, &bound, x)?;
    Ok(tape.value(logits).clone())
}

/// `l_anomalous − l_normal` per pixel, as a single-channel grid.
pub fn anomaly_logit(logits: &Grid) -> Grid {
    let (h, w) = (logits.height(), logits.width());
    let d = logits.channel(1).iter().zip(logits.channel(0)).map(|(a, n)| a - n).collect();
    Grid::from_rows(h, w, d).expect("logit planes match")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax probability of the anomalous class per pixel.
pub fn anomaly_probability(logits: &Grid) -> Grid {
    anomaly_logit(logits).map(sigmoid)
}

/// Mean per-pixel cross-entropy against a binary mask and its gradient with
/// respect to the logits.
pub fn pixel_cross_entropy(logits: &Grid, mask: &Grid) -> Result<(f64, Grid)> {
    if logits.channels() != 2 || logits.height() != mask.height() || logits.width() != mask.width() {
        return Err(HdmError::contract("logits and mask disagree in shape"));
    }
    let n = mask.shape().pixels();
    let mut loss = 0.0;
    let mut g = Grid::zeros(logits.shape());
    for p in 0..n {
        let y = mask.data()[p] > 0.5;
        let l = logits.data()[n + p] - logits.data()[p];
        let q = sigmoid(l);
        // −log σ(±l) computed stably
        let z = if y { -l } else { l };
        loss += z.max(0.0) + (-z.abs()).exp().ln_1p();
        let r = (q - f64::from(u8::from(y))) / n as f64;
        g.data_mut()[n + p] = r;
        g.data_mut()[p] = -r;
    }
    Ok((loss / n as f64, g))
}

/// Teacher, student and classifier together; the unit the guidance classifier
/// and the inference path operate on.
#[derive(Debug, Clone, Copy)]
pub struct Discriminator<'a> {
    pub teacher: &'a DenoiserParams,
    pub student: &'a DenoiserParams,
    pub classifier: &'a PixelClassifierParams,
    /// Number of feature timesteps the classifier was trained on.
    pub groups: usize,
}

/// Image-level class probability and the input gradient of its logit.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLogit {
    pub p_anomalous: f64,
    /// `∇_{z_t} (l_anomalous − l_normal)` of the mean-pooled logits.
    pub grad_logit: Grid,
}

impl ImageLogit {
    pub fn probabilities(&self) -> [f64; 2] {
        [1.0 - self.p_anomalous, self.p_anomalous]
    }

    /// `∇_{z_t} log p_φ(y | z_t)`.
    pub fn grad_log_prob(&self, y: Label) -> Grid {
        let k = match y {
            Label::Normal => -self.p_anomalous,
            Label::Anomalous => 1.0 - self.p_anomalous,
        };
        self.grad_logit.map(|g| k * g)
    }
}

/// Mean-pooled classifier output for a noised input `z_t`, with its gradient
/// through both branches. Branch features at `z_t` are repeated once per
/// training timestep group so the classifier sees its trained input width.
pub fn classifier_image_logit(d: &Discriminator<'_>, zt: &Grid, t: usize) -> Result<ImageLogit> {
    let mut tape = Tape::new();
    let bt = BoundParams::bind(&mut tape, d.teacher, false);
    let bs = BoundParams::bind(&mut tape, d.student, false);
    let bc = BoundClassifier::bind(&mut tape, d.classifier, false);
    let z = tape.param(zt.clone());
    let ft = build_forward(&mut tape, d.teacher, &bt, z, t)?.features;
    let fs = build_forward(&mut tape, d.student, &bs, z, t)?.features;
    let mut parts = Vec::new();
    for _ in 0..d.groups {
        parts.extend_from_slice(&ft);
    }
    for _ in 0..d.groups {
        parts.extend_from_slice(&fs);
    }
    let input = tape.concat(&parts)?;
    let logits = build_classifier(&mut tape, d.classifier, &bc, input)?;
    let pooled = tape.spatial_mean(logits);
    let pv = tape.value(pooled).data().to_vec();
    let seed = Grid::vector(vec![-1.0, 1.0]);
    let grads = tape.backward(&[(pooled, &seed)])?;
    let grad_logit = grads.get(z).cloned().unwrap_or_else(|| Grid::zeros(zt.shape()));
    Ok(ImageLogit {
        p_anomalous: sigmoid(pv[1] - pv[0]),
        grad_logit,
    })
}

/// Source of `∇_{z_t} log p(y | z_t)` for both classes.
pub trait ClassGuide {
    fn grad_log_probs(&self, zt: &Grid, t: usize) -> Result<[Grid; 2]>;
}

impl ClassGuide for Discriminator<'_> {
    fn grad_log_probs(&self, zt: &Grid, t: usize) -> Result<[Grid; 2]> {
        let il = classifier_image_logit(self, zt, t)?;
        Ok([il.grad_log_prob(Label::Normal), il.grad_log_prob(Label::Anomalous)])
    }
}

/// `μ' = μ + s · Σ · ∇ log p(y | z_t)`.
pub fn guided_mean(mu: &Grid, sigma: &Grid, grad: &Grid, s: f64) -> Result<Grid> {
    if !(s >= 0.0) {
        return Err(HdmError::param(format!("guidance scale {s} must be non-negative")));
    }
    mu.ensure_same_shape(sigma, "guided mean")?;
    mu.ensure_same_shape(grad, "guided mean")?;
    let data = mu
        .data()
        .iter()
        .zip(sigma.data())
        .zip(grad.data())
        .map(|((m, v), g)| m + s * v * g)
        .collect();
    Grid::from_vec(mu.shape(), data)
}

/// Guidance toward one class during sampling.
pub struct ClassGuidance<'a, G: ?Sized> {
    pub guide: &'a G,
    pub label: Label,
    pub scale: f64,
}

impl<G: ClassGuide + ?Sized> MeanShift for ClassGuidance<'_, G> {
    fn shift(&self, zt: &Grid, t: usize, mean: &Grid, var: &Grid) -> Result<Grid> {
        if self.scale == 0.0 {
            return Ok(mean.clone());
        }
        let grads = self.guide.grad_log_probs(zt, t)?;
        guided_mean(mean, var, &grads[self.label.index()], self.scale)
    }
}

/// Full diagonal-Gaussian log density of `z_prev` under `N(μ', σ²)`.
pub fn conditional_log_density(z_prev: &Grid, mu_prime: &Grid, sigma: &Grid) -> Result<f64> {
    diag_gaussian_log_density(z_prev, mu_prime, sigma)
}

/// `Σ_t log N(z_{t−1}; μ'(z_t, t, y), Σ_t)` along one forward trajectory of
/// `image`, for both labels at once. The trajectory, and thus the estimate's
/// noise, is shared by the two classes.
pub fn trajectory_log_likelihoods<M, R>(
    image: &Grid,
    model: &M,
    guide: Option<&dyn ClassGuide>,
    sched: &NoiseSchedule,
    s: f64,
    rng: &mut R,
) -> Result<[f64; 2]>
where
    M: ReverseModel + ?Sized,
    R: Rng + ?Sized,
{
    if !(s >= 0.0) {
        return Err(HdmError::param(format!("guidance scale {s} must be non-negative")));
    }
    let mut states = vec![to_latent(image)];
    for t in 1..=sched.steps() {
        let e = Grid::randn(image.shape(), rng);
        let next = forward_transition(&states[t - 1], t, &e, sched)?;
        states.push(next);
    }
    let mut ll = [0.0; 2];
    for t in 1..=sched.steps() {
        let p = model.reverse(&states[t], t)?;
        match guide {
            Some(g) if s > 0.0 => {
                let grads = g.grad_log_probs(&states[t], t)?;
                for y in 0..2 {
                    let mu = guided_mean(&p.mean, &p.var, &grads[y], s)?;
                    ll[y] += conditional_log_density(&states[t - 1], &mu, &p.var)?;
                }
            }
            _ => {
                let v = conditional_log_density(&states[t - 1], &p.mean, &p.var)?;
                ll = [ll[0] + v, ll[1] + v];
            }
        }
    }
    Ok(ll)
}

/// Log-likelihood of one class; see [`trajectory_log_likelihoods`].
pub fn trajectory_log_likelihood<M, R>(
    image: &Grid,
    y: Label,
    model: &M,
    guide: Option<&dyn ClassGuide>,
    sched: &NoiseSchedule,
    s: f64,
    rng: &mut R,
) -> Result<f64>
where
    M: ReverseModel + ?Sized,
    R: Rng + ?Sized,
{
    Ok(trajectory_log_likelihoods(image, model, guide, sched, s, rng)?[y.index()])
}

/// Bayes posterior over `(normal, anomalous)` from class log-likelihoods.
pub fn posterior_from_likelihoods(ll: [f64; 2], priors: [f64; 2]) -> Result<[f64; 2]> {
    if priors.iter().any(|p| !(0.0..=1.0).contains(p)) || ((priors[0] + priors[1]) - 1.0).abs() > 1e-9 {
        return Err(HdmError::param(format!("priors {priors:?} must lie in [0, 1] and sum to 1")));
    }
    let lp = [ll[0] + priors[0].ln(), ll[1] + priors[1].ln()];
    let m = lp[0].max(lp[1]);
    let e = [(lp[0] - m).exp(), (lp[1] - m).exp()];
    let z = e[0] + e[1];
    Ok([e[0] / z, e[1] / z])
}

/// `p(y | z_0)` via one shared trajectory and the class priors.
pub fn classify_image<M, R>(
    image: &Grid,
    model: &M,
    guide: Option<&dyn ClassGuide>,
    sched: &NoiseSchedule,
    priors: [f64; 2],
    s: f64,
    rng: &mut R,
) -> Result<[f64; 2]>
where
    M: ReverseModel + ?Sized,
    R: Rng + ?Sized,
{
    let ll = trajectory_log_likelihoods(image, model, guide, sched, s, rng)?;
    posterior_from_likelihoods(ll, priors)
}

/// Negative transition log density `−log N(z_prev; μ_θ + shift, Σ_t)` and its
/// gradient with respect to the student's ε̂.
pub fn transition_nll(
    z_prev: &Grid,
    zt: &Grid,
    eps_hat: &Grid,
    shift: Option<&Grid>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(f64, Grid)> {
    let mut mu = reverse_mean(zt, eps_hat, t, sched)?;
    if let Some(s) = shift {
        mu = mu.zip_with(s, |a, b| a + b)?;
    }
    let var = sched.reverse_variance(t);
    let nll = -conditional_log_density(z_prev, &mu, &Grid::full(mu.shape(), var))?;
    let c = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let dmu = -c / sched.alpha(t).sqrt();
    let g = mu.zip_with(z_prev, |m, z| (m - z) / var * dmu)?;
    Ok((nll, g))
}

/// Random inputs of one loss item.
#[derive(Debug, Clone)]
pub struct DdmDraw {
    pub feature_noise: Vec<Grid>,
    pub t: usize,
    pub eps_t: Grid,
    pub eps_prev: Grid,
}

pub fn draw_ddm<R: Rng + ?Sized>(shape: Shape, sched: &NoiseSchedule, timesteps: &[usize], rng: &mut R) -> DdmDraw {
    DdmDraw {
        feature_noise: draw_feature_noise(shape, timesteps, rng),
        t: rng.random_range(1..=sched.steps()),
        eps_t: Grid::randn(shape, rng),
        eps_prev: Grid::randn(shape, rng),
    }
}

/// `(z_{t−1}, z_t)` of a draw: `z_t ~ q(z_t | z_0)`, then
/// `z_{t−1} ~ q(z_{t−1} | z_t, z_0)`.
pub fn transition_pair(image: &Grid, draw: &DdmDraw, sched: &NoiseSchedule) -> Result<(Grid, Grid)> {
    let z0 = to_latent(image);
    let zt = forward_sample(&z0, draw.t, &draw.eps_t, sched)?.z;
    if draw.t == 1 {
        return Ok((z0, zt));
    }
    let post = forward_posterior(&z0, &zt, draw.t, sched)?;
    let sd = sched.posterior_variance(draw.t).sqrt();
    Ok((post.mean.zip_with(&draw.eps_prev, |m, e| m + sd * e)?, zt))
}

/// Stop-gradient guidance shift `s · Σ_t · ∇ log p(y | z_t)` for a draw.
pub fn guidance_shift(
    disc: &Discriminator<'_>,
    image: &Grid,
    label: Label,
    draw: &DdmDraw,
    sched: &NoiseSchedule,
    s: f64,
) -> Result<Option<Grid>> {
    if s == 0.0 {
        return Ok(None);
    }
    let (_, zt) = transition_pair(image, draw, sched)?;
    let il = classifier_image_logit(disc, &zt, draw.t)?;
    let k = s * sched.reverse_variance(draw.t);
    Ok(Some(il.grad_log_prob(label).map(|g| k * g)))
}

/// One training item.
#[derive(Debug, Clone, Copy)]
pub struct DdmItem<'a> {
    pub image: &'a Grid,
    pub label: Label,
    pub mask: &'a Grid,
}

/// Loss parts of one item: the summed transition NLL, the mean pixel
/// cross-entropy and the image distance.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DdmParts {
    pub nll: f64,
    pub ce: f64,
    pub distance: f64,
}

impl DdmParts {
    /// The optimized scalar: per-element NLL plus cross-entropy.
    pub fn objective(&self, elements: usize) -> f64 {
        self.nll / elements as f64 + self.ce
    }
}

/// Gradients of one item's objective, scaled by `weight`, plus
/// `distance_weight · d_image`.
pub struct ItemGrads {
    pub parts: DdmParts,
    pub student: ParamGrads,
    pub classifier: ParamGrads,
}

/// Evaluates one item on a tape. `teacher_stack` is the teacher's feature
/// stack for `draw.feature_noise` (constant). When `use_classifier` is off
/// the cross-entropy part is skipped.
#[allow(clippy::too_many_arguments)]
pub fn ddm_item(
    student: &DenoiserParams,
    classifier: &PixelClassifierParams,
    teacher_stack: &Grid,
    item: &DdmItem<'_>,
    draw: &DdmDraw,
    shift: Option<&Grid>,
    sched: &NoiseSchedule,
    timesteps: &[usize],
    weight: f64,
    distance_weight: f64,
    use_classifier: bool,
) -> Result<ItemGrads> {
    let mut tape = Tape::new();
    let bs = BoundParams::bind(&mut tape, student, true);
    let bc = BoundClassifier::bind(&mut tape, classifier, true);

    let inputs = noised_inputs(item.image, sched, timesteps, &draw.feature_noise)?;
    let mut taps = Vec::new();
    for (z, &t) in inputs.iter().zip(timesteps) {
        let zv = tape.constant(z.clone());
        taps.extend(build_forward(&mut tape, student, &bs, zv, t)?.features);
    }
    let stack = tape.concat(&taps)?;
    let fp = FeaturePair {
        teacher: teacher_stack.clone(),
        student: tape.value(stack).clone(),
        timesteps: timesteps.to_vec(),
    };
    let (_, distance) = feature_distance(&fp)?;

    let mut seeds: Vec<(Var, Grid)> = Vec::new();
    let mut ce = 0.0;
    if use_classifier {
        let ev = tape.constant(teacher_stack.clone());
        let input = tape.concat(&[ev, stack])?;
        let logits = build_classifier(&mut tape, classifier, &bc, input)?;
        let (v, g) = pixel_cross_entropy(tape.value(logits), item.mask)?;
        ce = v;
        seeds.push((logits, g.map(|x| x * weight)));
    }
    if distance_weight != 0.0 {
        seeds.push((stack, distance_grad_student(&fp)?.map(|x| x * distance_weight)));
    }

    let (z_prev, zt) = transition_pair(item.image, draw, sched)?;
    let zv = tape.constant(zt.clone());
    let eps_var = build_forward(&mut tape, student, &bs, zv, draw.t)?.eps_hat;
    let (nll, g) = transition_nll(&z_prev, &zt, tape.value(eps_var), shift, draw.t, sched)?;
    let d = zt.len() as f64;
    seeds.push((eps_var, g.map(|x| x * weight / d)));

    let seed_refs: Vec<(Var, &Grid)> = seeds.iter().map(|(v, g)| (*v, g)).collect();
    let grads = tape.backward(&seed_refs)?;
    Ok(ItemGrads {
        parts: DdmParts { nll, ce, distance },
        student: bs.collect(student, &grads),
        classifier: bc.collect(classifier, &grads),
    })
}

/// Batch-mean discrimination loss with its student and classifier gradients.
#[derive(Debug, Clone)]
pub struct DdmLoss {
    /// Mean of the per-item objective.
    pub value: f64,
    pub parts: Vec<DdmParts>,
    pub student: ParamGrads,
    pub classifier: ParamGrads,
}

/// [`ddm_loss`] with explicit draws and guidance shifts.
pub fn ddm_loss_fixed(
    disc: &Discriminator<'_>,
    batch: &[DdmItem<'_>],
    draws: &[DdmDraw],
    shifts: &[Option<Grid>],
    sched: &NoiseSchedule,
    timesteps: &[usize],
) -> Result<DdmLoss> {
    if batch.is_empty() {
        return Err(HdmError::param("ddm_loss needs a non-empty batch"));
    }
    let nb = batch.len() as f64;
    let mut out = DdmLoss {
        value: 0.0,
        parts: Vec::with_capacity(batch.len()),
        student: disc.student.zero_grads(),
        classifier: disc.classifier.zero_grads(),
    };
    for ((item, draw), shift) in batch.iter().zip(draws).zip(shifts) {
        let inputs = noised_inputs(item.image, sched, timesteps, &draw.feature_noise)?;
        let teacher_stack = branch_features(disc.teacher, &inputs, timesteps)?;
        let g = ddm_item(
            disc.student,
            disc.classifier,
            &teacher_stack,
            item,
            draw,
            shift.as_ref(),
            sched,
            timesteps,
            1.0 / nb,
            0.0,
            true,
        )?;
        add_grads(&mut out.student, &g.student);
        add_grads(&mut out.classifier, &g.classifier);
        out.value += g.parts.objective(item.image.len()) / nb;
        out.parts.push(g.parts);
    }
    Ok(out)
}

/// Draws feature noise, a transition step and its noise per item, computes
/// the stop-gradient guidance shifts, and evaluates the loss.
pub fn ddm_loss<R: Rng + ?Sized>(
    disc: &Discriminator<'_>,
    batch: &[DdmItem<'_>],
    sched: &NoiseSchedule,
    timesteps: &[usize],
    s: f64,
    rng: &mut R,
) -> Result<DdmLoss> {
    check_timesteps(timesteps, sched)?;
    let draws: Vec<DdmDraw> = batch
        .iter()
        .map(|it| draw_ddm(it.image.shape(), sched, timesteps, rng))
        .collect();
    let shifts = batch
        .iter()
        .zip(&draws)
        .map(|(it, d)| guidance_shift(disc, it.image, it.label, d, sched, s))
        .collect::<Result<Vec<_>>>()?;
    ddm_loss_fixed(disc, batch, &draws, &shifts, sched, timesteps)
}

pub(crate) fn add_grads(acc: &mut ParamGrads, g: &ParamGrads) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}
