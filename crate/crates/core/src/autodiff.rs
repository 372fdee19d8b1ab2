//! A small tape-based reverse-mode differentiator over [`Grid`] values.
//!
//! Only the operations the denoiser and the pixel classifier need are
//! provided. Losses are evaluated outside the tape; their gradients with
//! respect to tape outputs are fed back in as seeds to [`Tape::backward`].

use crate::error::{HdmError, Result};
use crate::grid::{Grid, Shape};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        dims: ConvDims,
    },
    /// `x * (1 + m[c]) + m[C + c]` with `m` a `2C × 1 × 1` modulation vector.
    Film {
        x: Var,
        modulation: Var,
    },
    Silu(Var),
    /// Affine normalization with fixed per-channel statistics.
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AvgPool2(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat(Vec<Var>),
    SpatialMean(Var),
    Add(Var, Var),
}

struct Node {
    value: Grid,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so it can be differentiated afterwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Grid>>,
}

impl Gradients {
    /// Gradient of the seeded objective w.r.t. `v`, if `v` required one and
    /// the objective depends on it.
    pub fn get(&self, v: Var) -> Option<&Grid> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Grid> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Grid {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Grid, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked (trainable parameters, guided inputs).
    pub fn param(&mut self, value: Grid) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Grid) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that is tracked only when `track` is set.
    pub fn leaf(&mut self, value: Grid, track: bool) -> Var {
        self.push(value, Op::Leaf, track)
    }

    /// 2-D convolution with an odd square kernel, stride 1 and zero padding
    /// `kernel / 2`. `weight` holds `out × in × k × k` values, `bias` `out`.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Var, out_ch: usize, kernel: usize) -> Result<Var> {
        let x = self.value(input);
        let s = x.shape();
        let dims = ConvDims {
            out_ch,
            in_ch: s.channels,
            kernel,
        };
        if kernel % 2 == 0 {
            return Err(HdmError::contract("conv kernel must be odd"));
        }
        if self.value(weight).len() != out_ch * s.channels * kernel * kernel {
            return Err(HdmError::contract(format!(
                "conv weight has {} values, expected {}x{}x{k}x{k}",
                self.value(weight).len(),
                out_ch,
                s.channels,
                k = kernel
            )));
        }
        if self.value(bias).len() != out_ch {
            return Err(HdmError::contract("conv bias length mismatch"));
        }
        let out = conv_forward(x, self.value(weight).data(), self.value(bias).data(), dims);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                dims,
            },
            rg,
        ))
    }

    pub fn film(&mut self, x: Var, modulation: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = self.value(modulation);
        let c = xv.channels();
        if m.len() != 2 * c {
            return Err(HdmError::contract("film modulation must have 2C entries"));
        }
        let mut out = xv.clone();
        let md = m.data();
        for ch in 0..c {
            let (scale, shift) = (1.0 + md[ch], md[c + ch]);
            out.channel_mut(ch).iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        let rg = self.rg(x) || self.rg(modulation);
        Ok(self.push(out, Op::Film { x, modulation }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.channels();
        if mean.len() != c || var.len() != c || self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(HdmError::contract("norm statistics length mismatch"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = xv.clone();
        let (g, b) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        for ch in 0..c {
            let (m, s) = (mean[ch], inv_std[ch] * g[ch]);
            let shift = b[ch];
            out.channel_mut(ch).iter_mut().for_each(|v| *v = (*v - m) * s + shift);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.height % 2 != 0 || s.width % 2 != 0 {
            return Err(HdmError::contract(format!("avg_pool2 needs even size, got {s}")));
        }
        let os = Shape::new(s.channels, s.height / 2, s.width / 2);
        let mut out = Grid::zeros(os);
        for c in 0..s.channels {
            for y in 0..os.height {
                for xx in 0..os.width {
                    let v = xv.get(c, 2 * y, 2 * xx)
                        + xv.get(c, 2 * y, 2 * xx + 1)
                        + xv.get(c, 2 * y + 1, 2 * xx)
                        + xv.get(c, 2 * y + 1, 2 * xx + 1);
                    out.set(c, y, xx, 0.25 * v);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool2(x), rg))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        if factor == 1 {
            return x;
        }
        let out = self.value(x).upsample_nearest(factor);
        let rg = self.rg(x);
        self.push(out, Op::Upsample { x, factor }, rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let grids: Vec<&Grid> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Grid::concat_channels(&grids)?;
        let rg = parts.iter().any(|v| self.rg(*v));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Per-channel spatial mean, giving a `C × 1 × 1` vector.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.shape().pixels() as f64;
        let data = (0..xv.channels()).map(|c| xv.channel(c).iter().sum::<f64>() / n).collect();
        let rg = self.rg(x);
        self.push(Grid::vector(data), Op::SpatialMean(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Reverse sweep. Each seed is `(output, d objective / d output)`; seeds
    /// on the same node accumulate.
    pub fn backward(&self, seeds: &[(Var, &Grid)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Grid>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            self.value(*v).ensure_same_shape(g, "backward seed")?;
            accumulate(&mut grads[v.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Conv {
                    input,
                    weight,
                    bias,
                    dims,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weight).data();
                    if self.rg(*bias) {
                        let gb: Vec<f64> = (0..dims.out_ch).map(|c| gout.channel(c).iter().sum()).collect();
                        accumulate(&mut grads[bias.0], &Grid::vector(gb));
                    }
                    if self.rg(*weight) {
                        let gw = conv_weight_grad(x, &gout, *dims);
                        accumulate(&mut grads[weight.0], &gw);
                    }
                    if self.rg(*input) {
                        let gi = conv_input_grad(x.shape(), w, &gout, *dims);
                        accumulate(&mut grads[input.0], &gi);
                    }
                }
                Op::Film { x, modulation } => {
                    let xv = self.value(*x);
                    let m = self.value(*modulation).data();
                    let c = xv.channels();
                    if self.rg(*modulation) {
                        let mut gm = vec![0.0; 2 * c];
                        for ch in 0..c {
                            let go = gout.channel(ch);
                            gm[ch] = go.iter().zip(xv.channel(ch)).map(|(a, b)| a * b).sum();
                            gm[c + ch] = go.iter().sum();
                        }
                        accumulate(&mut grads[modulation.0], &Grid::vector(gm));
                    }
                    if self.rg(*x) {
                        let mut gx = gout.clone();
                        for ch in 0..c {
                            let scale = 1.0 + m[ch];
                            gx.channel_mut(ch).iter_mut().for_each(|v| *v *= scale);
                        }
                        accumulate(&mut grads[x.0], &gx);
                    }
                }
                Op::Silu(x) => {
                    let gx = self.value(*x).zip_with(&gout, |v, g| g * silu_grad(v))?;
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let xv = self.value(*x);
                    let g = self.value(*gamma).data();
                    let c = xv.channels();
                    if self.rg(*gamma) || self.rg(*beta) {
                        let mut gg = vec![0.0; c];
                        let mut gbeta = vec![0.0; c];
                        for ch in 0..c {
                            let go = gout.channel(ch);
                            gg[ch] = go
                                .iter()
                                .zip(xv.channel(ch))
                                .map(|(a, b)| a * (b - mean[ch]) * inv_std[ch])
                                .sum();
                            gbeta[ch] = go.iter().sum();
                        }
                        if self.rg(*gamma) {
                            accumulate(&mut grads[gamma.0], &Grid::vector(gg));
                        }
                        if self.rg(*beta) {
                            accumulate(&mut grads[beta.0], &Grid::vector(gbeta));
                        }
                    }
                    if self.rg(*x) {
                        let mut gx = gout.clone();
                        for ch in 0..c {
                            let s = g[ch] * inv_std[ch];
                            gx.channel_mut(ch).iter_mut().for_each(|v| *v *= s);
                        }
                        accumulate(&mut grads[x.0], &gx);
                    }
                }
                Op::AvgPool2(x) => {
                    let s = self.value(*x).shape();
                    let mut gx = Grid::zeros(s);
                    for c in 0..s.channels {
                        for y in 0..s.height {
                            for xx in 0..s.width {
                                gx.set(c, y, xx, 0.25 * gout.get(c, y / 2, xx / 2));
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Upsample { x, factor } => {
                    let s = self.value(*x).shape();
                    let mut gx = Grid::zeros(s);
                    let os = gout.shape();
                    for c in 0..os.channels {
                        for y in 0..os.height {
                            for xx in 0..os.width {
                                let (sy, sx) = (y / factor, xx / factor);
                                let v = gx.get(c, sy, sx) + gout.get(c, y, xx);
                                gx.set(c, sy, sx, v);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    let n = gout.shape().pixels();
                    for p in parts {
                        let ps = self.value(*p).shape();
                        let len = ps.channels * n;
                        if self.rg(*p) {
                            let slice = gout.data()[offset..offset + len].to_vec();
                            accumulate(&mut grads[p.0], &Grid::from_vec(ps, slice)?);
                        }
                        offset += len;
                    }
                }
                Op::SpatialMean(x) => {
                    let s = self.value(*x).shape();
                    let n = s.pixels() as f64;
                    let mut gx = Grid::zeros(s);
                    for c in 0..s.channels {
                        let g = gout.data()[c] / n;
                        gx.channel_mut(c).iter_mut().for_each(|v| *v = g);
                    }
                    accumulate(&mut grads[x.0], &gx);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], &gout);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], &gout);
                    }
                }
            }
            // leaves keep their gradient for the caller
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Grid>, g: &Grid) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.clone()),
    }
}

/// Valid output range `[lo, hi)` for a kernel offset `d` over length `n`.
#[inline]
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

fn conv_forward(x: &Grid, w: &[f64], b: &[f64], d: ConvDims) -> Grid {
    let s = x.shape();
    let (h, wd) = (s.height, s.width);
    let k = d.kernel;
    let pad = (k / 2) as isize;
    let mut out = Grid::zeros(Shape::new(d.out_ch, h, wd));
    for co in 0..d.out_ch {
        let oc = out.channel_mut(co);
        oc.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..d.in_ch {
            let ic = x.channel(ci);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, wd);
                    let wv = w[((co * d.in_ch + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut oc[y * wd + x0..y * wd + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let irow = &ic[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                        for (o, i) in orow.iter_mut().zip(irow) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_weight_grad(x: &Grid, gout: &Grid, d: ConvDims) -> Grid {
    let s = x.shape();
    let (h, wd) = (s.height, s.width);
    let k = d.kernel;
    let pad = (k / 2) as isize;
    let mut gw = vec![0.0; d.out_ch * d.in_ch * k * k];
    for co in 0..d.out_ch {
        let go = gout.channel(co);
        for ci in 0..d.in_ch {
            let ic = x.channel(ci);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, wd);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &go[y * wd + x0..y * wd + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let irow = &ic[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[((co * d.in_ch + ci) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    Grid::vector(gw)
}

fn conv_input_grad(s: Shape, w: &[f64], gout: &Grid, d: ConvDims) -> Grid {
    let (h, wd) = (s.height, s.width);
    let k = d.kernel;
    let pad = (k / 2) as isize;
    let mut gi = Grid::zeros(s);
    for ci in 0..d.in_ch {
        let gic = gi.channel_mut(ci);
        for co in 0..d.out_ch {
            let go = gout.channel(co);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, wd);
                    let wv = w[((co * d.in_ch + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &go[y * wd + x0..y * wd + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let irow = &mut gic[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)];
                        for (i, g) in irow.iter_mut().zip(grow) {
                            *i += wv * g;
                        }
                    }
                }
            }
        }
    }
    gi
}
