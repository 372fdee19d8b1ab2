//! The ε-prediction network: a small convolutional encoder–decoder with skip
//! connections, FiLM time conditioning and per-channel running-statistic
//! normalization. Decoder outputs double as feature taps for the dual-branch
//! discriminator.
//!
//! Layout for `widths = [w0, w1, w2]`:
//!
//! ```text
//! x ─ in_conv ─ enc0 ──────────────────────────── dec0 ─ out_conv ─ ε̂
//!                 └ pool ─ enc1 ────────── dec1 ──┘ (tap, full res)
//!                            └ pool ─ enc2 ─┘ (tap, ½ res)
//!                                     (tap, ¼ res)
//! ```
//!
//! Every block is `conv3×3 → norm → FiLM(t) → SiLU`. Taps are the `taps`
//! finest decoder outputs (the bottleneck counts as the coarsest), each
//! upsampled to input resolution by nearest neighbour.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::diffusion::EpsModel;
use crate::error::{HdmError, Result};
use crate::grid::{Grid, Shape};

pub const NORM_EPS: f64 = 1e-5;

/// Architecture descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel width per scale, finest first.
    pub widths: Vec<usize>,
    /// Number of feature taps `K`.
    pub taps: usize,
    /// Sinusoidal embedding size (also the hidden width of the time MLP).
    pub time_dim: usize,
}

impl Architecture {
    pub fn scales(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(HdmError::param("architecture needs at least one scale"));
        }
        if self.taps == 0 || self.taps > self.widths.len() {
            return Err(HdmError::param(format!(
                "taps must be in 1..={}, got {}",
                self.widths.len(),
                self.taps
            )));
        }
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(HdmError::param("channel counts must be positive"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(HdmError::param("time_dim must be even and at least 2"));
        }
        let div = 1usize << (self.scales() - 1);
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return Err(HdmError::param(format!(
                "resolution {}x{} must be positive and divisible by {div}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Channel widths of the `K` taps, coarse to fine.
    pub fn tap_widths(&self) -> Vec<usize> {
        let all: Vec<usize> = self.widths.iter().rev().copied().collect();
        all[all.len() - self.taps..].to_vec()
    }

    /// Channels contributed per timestep to a feature stack.
    pub fn feature_channels(&self) -> usize {
        self.tap_widths().iter().sum()
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(self.in_channels, self.height, self.width)
    }

    /// Ordered `(name, shape, trainable)` entries for this architecture.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        let td = self.time_dim;
        let mut push = |name: String, shape: Vec<usize>, trainable: bool| out.push((name, shape, trainable));
        push("temb.weight".into(), vec![td, td, 1, 1], true);
        push("temb.bias".into(), vec![td], true);
        push("in.weight".into(), vec![self.widths[0], self.in_channels, 3, 3], true);
        push("in.bias".into(), vec![self.widths[0]], true);
        let mut block = |prefix: String, cin: usize, cout: usize| {
            push(format!("{prefix}.conv.weight"), vec![cout, cin, 3, 3], true);
            push(format!("{prefix}.conv.bias"), vec![cout], true);
            push(format!("{prefix}.norm.gamma"), vec![cout], true);
            push(format!("{prefix}.norm.beta"), vec![cout], true);
            push(format!("{prefix}.norm.running_mean"), vec![cout], false);
            push(format!("{prefix}.norm.running_var"), vec![cout], false);
            push(format!("{prefix}.film.weight"), vec![2 * cout, td, 1, 1], true);
            push(format!("{prefix}.film.bias"), vec![2 * cout], true);
        };
        for (i, &w) in self.widths.iter().enumerate() {
            let cin = if i == 0 { self.widths[0] } else { self.widths[i - 1] };
            block(format!("enc{i}"), cin, w);
        }
        for i in (0..self.scales() - 1).rev() {
            block(format!("dec{i}"), self.widths[i + 1] + self.widths[i], self.widths[i]);
        }
        push("out.weight".into(), vec![self.in_channels, self.widths[0], 3, 3], true);
        push("out.bias".into(), vec![self.in_channels], true);
        out
    }

    /// Trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        self.layout()
            .iter()
            .filter(|(_, _, t)| *t)
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }
}

/// A named tensor stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub trainable: bool,
}

/// Round to the nearest `f32`, the precision checkpoints persist.
pub fn to_storage_precision(v: f64) -> f64 {
    v as f32 as f64
}

/// Denoiser parameters. Values are kept `f32`-representable after
/// initialization and after every optimizer update, so checkpoints round-trip
/// exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Architecture,
    pub tensors: Vec<NamedTensor>,
    pub frozen: bool,
}

/// Per-tensor gradients, aligned with [`DenoiserParams::tensors`].
pub type ParamGrads = Vec<Vec<f64>>;

impl DenoiserParams {
    /// Seeded initialization.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape, trainable)| {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let mut std = (1.0 / fan_in as f64).sqrt();
                    if name.contains("film") {
                        std *= 0.1;
                    }
                    (0..n)
                        .map(|_| to_storage_precision(std * rng.sample::<f64, _>(StandardNormal)))
                        .collect()
                } else if name.ends_with("gamma") || name.ends_with("running_var") {
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
        Ok(DenoiserParams {
            arch: arch.clone(),
            tensors,
            frozen: false,
        })
    }

    /// Teacher handle: an identical copy that rejects updates.
    pub fn freeze(&self) -> DenoiserParams {
        let mut p = self.clone();
        p.frozen = true;
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.values.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.tensors.iter().map(|t| vec![0.0; t.values.len()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// Checks tensor names and shapes against the architecture.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let layout = self.arch.layout();
        if layout.len() != self.tensors.len() {
            return Err(HdmError::format(format!(
                "expected {} tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape, _), t) in layout.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.shape || t.values.len() != shape.iter().product::<usize>() {
                return Err(HdmError::format(format!("tensor {} does not match the architecture", t.name)));
            }
        }
        Ok(())
    }

    /// Blend observed pre-normalization statistics into the running buffers.
    pub fn update_running_stats(&mut self, observed: &[NormObservation], momentum: f64) -> Result<()> {
        if observed.is_empty() {
            return Ok(());
        }
        if self.frozen {
            return Err(HdmError::contract("cannot update statistics of frozen parameters"));
        }
        let n_layers = observed[0].layers.len();
        for layer in 0..n_layers {
            let name = &observed[0].layers[layer].0;
            let c = observed[0].layers[layer].1.len();
            let mut mean = vec![0.0; c];
            let mut sq = vec![0.0; c];
            for obs in observed {
                let (_, m, s) = &obs.layers[layer];
                for i in 0..c {
                    mean[i] += m[i];
                    sq[i] += s[i];
                }
            }
            let k = observed.len() as f64;
            let var: Vec<f64> = (0..c).map(|i| (sq[i] / k - (mean[i] / k).powi(2)).max(0.0)).collect();
            for (suffix, batch) in [("running_mean", mean.iter().map(|m| m / k).collect::<Vec<_>>()), ("running_var", var)] {
                let full = format!("{name}.{suffix}");
                let t = self
                    .tensors
                    .iter_mut()
                    .find(|t| t.name == full)
                    .ok_or_else(|| HdmError::contract(format!("missing buffer {full}")))?;
                for (v, b) in t.values.iter_mut().zip(&batch) {
                    *v = to_storage_precision((1.0 - momentum) * *v + momentum * b);
                }
            }
        }
        Ok(())
    }
}

/// Channel statistics seen at each normalization layer during one forward
/// pass: `(layer prefix, mean, mean of squares)`.
#[derive(Debug, Clone, Default)]
pub struct NormObservation {
    pub layers: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// Network output: ε̂ plus `K` full-resolution feature grids, coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: Grid,
    pub features: Vec<Grid>,
}

/// Upstream gradients, shaped like [`DenoiserOutput`]. Missing entries are zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub eps_hat: Option<Grid>,
    pub features: Vec<Option<Grid>>,
}

/// Sinusoidal embedding of a timestep.
pub fn time_embedding(t: usize, dim: usize) -> Grid {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        v[i] = a.sin();
        v[half + i] = a.cos();
    }
    Grid::vector(v)
}

/// Parameters placed on a tape.
pub struct BoundParams {
    vars: Vec<Var>,
    tracked: bool,
}

impl BoundParams {
    /// Puts every tensor on the tape; trainable ones are tracked when `track`.
    pub fn bind(tape: &mut Tape, params: &DenoiserParams, track: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| tape.leaf(Grid::vector(t.values.clone()), track && t.trainable))
            .collect();
        BoundParams { vars, tracked: track }
    }

    /// Parameter gradients after a backward sweep (zeros where untracked).
    pub fn collect(&self, params: &DenoiserParams, grads: &Gradients) -> ParamGrads {
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

/// Vars produced by one network application on a tape.
pub struct BuiltForward {
    pub eps_hat: Var,
    /// Full-resolution taps, coarse to fine.
    pub features: Vec<Var>,
    pub norm: NormObservation,
}

struct Cursor<'a> {
    params: &'a DenoiserParams,
    bound: &'a BoundParams,
}

impl Cursor<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.params
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| self.bound.vars[i])
            .ok_or_else(|| HdmError::contract(format!("missing tensor {name}")))
    }

    fn values(&self, name: &str) -> Result<&[f64]> {
        self.params
            .tensor(name)
            .map(|t| t.values.as_slice())
            .ok_or_else(|| HdmError::contract(format!("missing tensor {name}")))
    }
}

fn block(
    tape: &mut Tape,
    cur: &Cursor<'_>,
    prefix: &str,
    x: Var,
    temb: Var,
    cout: usize,
    obs: &mut NormObservation,
) -> Result<Var> {
    let h = tape.conv(
        x,
        cur.var(&format!("{prefix}.conv.weight"))?,
        cur.var(&format!("{prefix}.conv.bias"))?,
        cout,
        3,
    )?;
    let hv = tape.value(h);
    let n = hv.shape().pixels() as f64;
    let mean: Vec<f64> = (0..cout).map(|c| hv.channel(c).iter().sum::<f64>() / n).collect();
    let sq: Vec<f64> = (0..cout).map(|c| hv.channel(c).iter().map(|v| v * v).sum::<f64>() / n).collect();
    obs.layers.push((format!("{prefix}.norm"), mean, sq));
    let h = tape.norm(
        h,
        cur.var(&format!("{prefix}.norm.gamma"))?,
        cur.var(&format!("{prefix}.norm.beta"))?,
        cur.values(&format!("{prefix}.norm.running_mean"))?,
        cur.values(&format!("{prefix}.norm.running_var"))?,
        NORM_EPS,
    )?;
    let m = tape.conv(
        temb,
        cur.var(&format!("{prefix}.film.weight"))?,
        cur.var(&format!("{prefix}.film.bias"))?,
        2 * cout,
        1,
    )?;
    let h = tape.film(h, m)?;
    Ok(tape.silu(h))
}

/// Applies the network to `z` (already on the tape) at step `t`.
pub fn build_forward(tape: &mut Tape, params: &DenoiserParams, bound: &BoundParams, z: Var, t: usize) -> Result<BuiltForward> {
    let arch = &params.arch;
    let shape = tape.value(z).shape();
    if shape != arch.input_shape() {
        return Err(HdmError::contract(format!(
            "denoiser expects input {}, got {shape}",
            arch.input_shape()
        )));
    }
    if t == 0 {
        return Err(HdmError::contract("denoiser step must be at least 1"));
    }
    let cur = Cursor { params, bound };
    let mut obs = NormObservation::default();
    let emb = tape.constant(time_embedding(t, arch.time_dim));
    let temb = tape.conv(emb, cur.var("temb.weight")?, cur.var("temb.bias")?, arch.time_dim, 1)?;
    let temb = tape.silu(temb);

    let mut h = tape.conv(z, cur.var("in.weight")?, cur.var("in.bias")?, arch.widths[0], 3)?;
    let mut skips = Vec::with_capacity(arch.scales());
    for (i, &w) in arch.widths.iter().enumerate() {
        if i > 0 {
            h = tape.avg_pool2(h)?;
        }
        h = block(tape, &cur, &format!("enc{i}"), h, temb, w, &mut obs)?;
        skips.push(h);
    }
    // decoder outputs with their downsampling factor, coarse to fine
    let mut decoded = vec![(h, 1usize << (arch.scales() - 1))];
    for i in (0..arch.scales() - 1).rev() {
        let up = tape.upsample(h, 2);
        let cat = tape.concat(&[up, skips[i]])?;
        h = block(tape, &cur, &format!("dec{i}"), cat, temb, arch.widths[i], &mut obs)?;
        decoded.push((h, 1usize << i));
    }
    let eps_hat = tape.conv(h, cur.var("out.weight")?, cur.var("out.bias")?, arch.in_channels, 3)?;
    let features = decoded[decoded.len() - arch.taps..]
        .iter()
        .map(|&(v, f)| tape.upsample(v, f))
        .collect();
    Ok(BuiltForward {
        eps_hat,
        features,
        norm: obs,
    })
}

/// A complete forward pass kept around for differentiation.
pub struct ForwardPass {
    pub tape: Tape,
    pub bound: BoundParams,
    pub input: Var,
    pub built: BuiltForward,
}

impl ForwardPass {
    pub fn run(params: &DenoiserParams, z: &Grid, t: usize, track_params: bool, track_input: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, track_params);
        let input = tape.leaf(z.clone(), track_input);
        let built = build_forward(&mut tape, params, &bound, input, t)?;
        Ok(ForwardPass {
            tape,
            bound,
            input,
            built,
        })
    }

    pub fn output(&self) -> DenoiserOutput {
        DenoiserOutput {
            eps_hat: self.tape.value(self.built.eps_hat).clone(),
            features: self.built.features.iter().map(|v| self.tape.value(*v).clone()).collect(),
        }
    }

    /// Parameter and input gradients for the given upstream gradients.
    pub fn backward(&self, params: &DenoiserParams, up: &OutputGrads) -> Result<(ParamGrads, Option<Grid>)> {
        let mut seeds: Vec<(Var, &Grid)> = Vec::new();
        if let Some(g) = &up.eps_hat {
            seeds.push((self.built.eps_hat, g));
        }
        if up.features.len() > self.built.features.len() {
            return Err(HdmError::contract("more feature gradients than taps"));
        }
        for (v, g) in self.built.features.iter().zip(&up.features) {
            if let Some(g) = g {
                seeds.push((*v, g));
            }
        }
        let grads = self.tape.backward(&seeds)?;
        let pg = self.bound.collect(params, &grads);
        let ig = grads.get(self.input).cloned();
        Ok((pg, ig))
    }
}

/// Pure forward evaluation.
pub fn forward(params: &DenoiserParams, z: &Grid, t: usize) -> Result<DenoiserOutput> {
    Ok(ForwardPass::run(params, z, t, false, false)?.output())
}

/// Parameter gradients of `⟨upstream, output⟩`.
///
/// Works on frozen parameters too; it is the update that is refused.
pub fn backward(params: &DenoiserParams, z: &Grid, t: usize, upstream: &OutputGrads) -> Result<ParamGrads> {
    let pass = ForwardPass::run(params, z, t, true, false)?;
    Ok(pass.backward(params, upstream)?.0)
}

impl EpsModel for DenoiserParams {
    fn predict_eps(&self, zt: &Grid, t: usize) -> Result<Grid> {
        Ok(forward(self, zt, t)?.eps_hat)
    }
}
