//! Independent reference implementations shared by the integration tests and
//! the acceptance run.
#![allow(dead_code)]

use hdm::dagm::{dagm_loss_fixed, draw_dagm, DagmDraw};
use hdm::ddm::{
    branch_features, classifier_image_logit, ddm_item, ddm_loss_fixed, draw_ddm, feature_distance, noised_inputs,
    pixel_cross_entropy, DdmDraw, DdmItem, Discriminator, FeaturePair, Label, PixelClassifierParams,
};
use hdm::denoiser::{Architecture, DenoiserParams, NamedTensor};
use hdm::diffusion::{BetaDirection, NoiseSchedule};
use hdm::pom::{pom_loss, DistStats};
use hdm::{Grid, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- metrics

/// Pairwise Mann–Whitney statistic, ties counted as one half.
pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            num += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

/// Labels 8-connected components by repeated relaxation until nothing
/// changes; returns one label per pixel (0 for background).
pub fn relaxation_labels(mask: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut lab: Vec<usize> = (0..h * w).map(|i| if mask[i] { i + 1 } else { 0 }).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if lab[i] == 0 {
                    continue;
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if lab[j] != 0 && lab[j] < lab[i] {
                            lab[i] = lab[j];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return lab;
        }
    }
}

/// PRO by enumerating every threshold `θ` in the sorted unique scores with
/// prediction `score > θ`, and integrating the (FPR, overlap) polyline from
/// the origin up to `limit`, held flat past its last point.
pub fn exhaustive_pro(maps: &[Grid], masks: &[Grid], limit: f64) -> f64 {
    let mut regions: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut negatives = Vec::new();
    for (k, (m, g)) in maps.iter().zip(masks).enumerate() {
        let (h, w) = (m.height(), m.width());
        let fg: Vec<bool> = g.data().iter().map(|v| *v > 0.5).collect();
        let lab = relaxation_labels(&fg, h, w);
        let mut ids: Vec<usize> = lab.iter().copied().filter(|l| *l > 0).collect();
        ids.sort();
        ids.dedup();
        for id in ids {
            regions.push((k, (0..h * w).filter(|&i| lab[i] == id).collect()));
        }
        negatives.extend((0..h * w).filter(|&i| !fg[i]).map(|i| m.data()[i]));
    }
    let mut thresholds: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let point = |th: f64| -> (f64, f64) {
        let fpr = negatives.iter().filter(|v| **v > th).count() as f64 / negatives.len() as f64;
        let ov = regions
            .iter()
            .map(|(k, px)| px.iter().filter(|&&i| maps[*k].data()[i] > th).count() as f64 / px.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        (fpr, ov)
    };
    // curve from the strictest threshold down, starting at the origin
    let mut pts = vec![(0.0, 0.0)];
    for th in thresholds.iter().rev() {
        pts.push(point(*th));
    }
    let mut area = 0.0;
    for win in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (win[0], win[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    let last = pts.last().copied().unwrap_or((0.0, 0.0));
    if last.0 < limit {
        area += (limit - last.0) * last.1;
    }
    area / limit
}

// -------------------------------------------------------- statistics

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Asymptotic critical value of the two-sample KS test at level `alpha`.
pub fn ks_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((n + m) as f64 / (n * m) as f64).sqrt()
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

// ------------------------------------------------------- gradients

pub fn tiny_sched() -> NoiseSchedule {
    NoiseSchedule::linear(6, 0.01, 0.3, BetaDirection::Increasing).unwrap()
}

/// A two-scale denoiser well under 1k parameters.
pub fn tiny_arch() -> Architecture {
    Architecture {
        in_channels: 1,
        height: 4,
        width: 4,
        widths: vec![2, 3],
        taps: 2,
        time_dim: 4,
    }
}

/// Worst relative error between analytic and central-difference gradients,
/// measured per coordinate as `|a − n| / max(|a|, |n|, floor)` with `floor`
/// one percent of the largest gradient magnitude, so coordinates that are
/// numerically zero do not dominate.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every trainable value.
pub fn fd_tensors<F>(tensors: &mut [NamedTensor], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[NamedTensor]) -> f64,
{
    let mut out = Vec::new();
    for ti in 0..tensors.len() {
        if !tensors[ti].trainable {
            continue;
        }
        for j in 0..tensors[ti].values.len() {
            let v = tensors[ti].values[j];
            tensors[ti].values[j] = v + h;
            let up = f(tensors);
            tensors[ti].values[j] = v - h;
            let dn = f(tensors);
            tensors[ti].values[j] = v;
            out.push((up - dn) / (2.0 * h));
        }
    }
    out
}

pub fn flatten_trainable(tensors: &[NamedTensor], grads: &[Vec<f64>]) -> Vec<f64> {
    tensors
        .iter()
        .zip(grads)
        .filter(|(t, _)| t.trainable)
        .flat_map(|(_, g)| g.iter().copied())
        .collect()
}

fn tiny_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<Grid> {
    (0..n)
        .map(|_| Grid::randn(tiny_arch().input_shape(), rng).map(|v| 0.5 * v))
        .collect()
}

/// Relative errors of the generation loss gradients: `(mse, kl)`.
pub fn dagm_gradient_errors(seed: u64) -> (f64, f64, usize) {
    let sched = tiny_sched();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = DenoiserParams::init(&tiny_arch(), seed).unwrap();
    let batch = tiny_batch(&mut rng, 2);
    let mut draws: Vec<DagmDraw> = draw_dagm(&batch, &sched, &mut rng);
    // keep t ≥ 2 so the KL term is a full Gaussian KL
    draws[0].t = 3;
    draws[1].t = 5;
    let zeros = vec![0.0; sched.steps()];
    let ones = vec![1.0; sched.steps()];
    let (_, g_mse, _) = dagm_loss_fixed(&params, &batch, &draws, &sched, &zeros).unwrap();
    let (_, g_all, _) = dagm_loss_fixed(&params, &batch, &draws, &sched, &ones).unwrap();
    let a_mse = flatten_trainable(&params.tensors, &g_mse);
    let a_kl: Vec<f64> = flatten_trainable(&params.tensors, &g_all)
        .iter()
        .zip(&a_mse)
        .map(|(t, m)| t - m)
        .collect();
    let arch = params.arch.clone();
    let eval = |ts: &[NamedTensor], part: fn(&hdm::dagm::DagmLossParts) -> f64| {
        let p = DenoiserParams {
            arch: arch.clone(),
            tensors: ts.to_vec(),
            frozen: false,
        };
        part(&dagm_loss_fixed(&p, &batch, &draws, &sched, &zeros).unwrap().0)
    };
    let n_mse = fd_tensors(&mut params.tensors, 1e-5, |ts| eval(ts, |p| p.mse));
    let n_kl = fd_tensors(&mut params.tensors, 1e-5, |ts| eval(ts, |p| p.kl));
    (relative_error(&a_mse, &n_mse), relative_error(&a_kl, &n_kl), a_mse.len())
}

pub struct DdmFixture {
    pub sched: NoiseSchedule,
    pub teacher: DenoiserParams,
    pub student: DenoiserParams,
    pub classifier: PixelClassifierParams,
    pub images: Vec<Grid>,
    pub masks: Vec<Grid>,
    pub draws: Vec<DdmDraw>,
    pub timesteps: Vec<usize>,
}

impl DdmFixture {
    pub fn new(seed: u64) -> Self {
        let sched = tiny_sched();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = DenoiserParams::init(&tiny_arch(), seed).unwrap().freeze();
        let mut student = teacher.clone();
        student.frozen = false;
        for t in student.tensors.iter_mut().filter(|t| t.trainable) {
            for v in t.values.iter_mut() {
                *v += 0.2 * rng.random_range(-1.0..1.0);
            }
        }
        let timesteps = vec![2, 4];
        let in_ch = 2 * tiny_arch().feature_channels() * timesteps.len();
        let mut classifier = PixelClassifierParams::init(in_ch, &[3], seed + 1).unwrap();
        for t in classifier.tensors.iter_mut().filter(|t| t.trainable && t.name.ends_with("bias")) {
            for v in t.values.iter_mut() {
                *v = 0.1 * rng.random_range(-1.0..1.0);
            }
        }
        let shape = tiny_arch().input_shape();
        let images: Vec<Grid> = (0..2)
            .map(|_| Grid::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap())
            .collect();
        let mut anomalous = Grid::zeros(Shape::new(1, 4, 4));
        for i in [5, 6, 9] {
            anomalous.data_mut()[i] = 1.0;
        }
        let masks = vec![Grid::zeros(Shape::new(1, 4, 4)), anomalous];
        let mut draws: Vec<DdmDraw> = images.iter().map(|_| draw_ddm(shape, &sched, &timesteps, &mut rng)).collect();
        draws[0].t = 1;
        draws[1].t = 4;
        DdmFixture {
            sched,
            teacher,
            student,
            classifier,
            images,
            masks,
            draws,
            timesteps,
        }
    }

    pub fn items(&self) -> Vec<DdmItem<'_>> {
        vec![
            DdmItem {
                image: &self.images[0],
                label: Label::Normal,
                mask: &self.masks[0],
            },
            DdmItem {
                image: &self.images[1],
                label: Label::Anomalous,
                mask: &self.masks[1],
            },
        ]
    }

    fn disc_with<'a>(
        &'a self,
        student: &'a DenoiserParams,
        classifier: &'a PixelClassifierParams,
    ) -> Discriminator<'a> {
        Discriminator {
            teacher: &self.teacher,
            student,
            classifier,
            groups: self.timesteps.len(),
        }
    }

    fn loss(&self, student: &DenoiserParams, classifier: &PixelClassifierParams, shifts: &[Option<Grid>]) -> f64 {
        let disc = self.disc_with(student, classifier);
        ddm_loss_fixed(&disc, &self.items(), &self.draws, shifts, &self.sched, &self.timesteps)
            .unwrap()
            .value
    }
}

/// Gradient errors of the discrimination objective: full objective with
/// respect to the student and the classifier, the NLL term alone, and the
/// image feature distance.
pub struct DdmGradientErrors {
    pub student: f64,
    pub classifier: f64,
    pub nll_only: f64,
    pub distance: f64,
    pub params: usize,
}

pub fn ddm_gradient_errors(seed: u64) -> DdmGradientErrors {
    let fx = DdmFixture::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
    let shifts: Vec<Option<Grid>> = vec![None, Some(Grid::randn(tiny_arch().input_shape(), &mut rng).map(|v| 0.05 * v))];
    let disc = fx.disc_with(&fx.student, &fx.classifier);
    let out = ddm_loss_fixed(&disc, &fx.items(), &fx.draws, &shifts, &fx.sched, &fx.timesteps).unwrap();
    let a_s = flatten_trainable(&fx.student.tensors, &out.student);
    let a_c = flatten_trainable(&fx.classifier.tensors, &out.classifier);

    let mut st = fx.student.clone();
    let n_s = fd_tensors(&mut st.tensors, 1e-5, |ts| {
        let p = DenoiserParams {
            tensors: ts.to_vec(),
            ..fx.student.clone()
        };
        fx.loss(&p, &fx.classifier, &shifts)
    });
    let mut cl = fx.classifier.clone();
    let n_c = fd_tensors(&mut cl.tensors, 1e-5, |ts| {
        let c = PixelClassifierParams {
            tensors: ts.to_vec(),
            ..fx.classifier.clone()
        };
        fx.loss(&fx.student, &c, &shifts)
    });

    // NLL term alone and the distance term alone, through one item
    let item = fx.items()[1];
    let draw = &fx.draws[1];
    let inputs = noised_inputs(item.image, &fx.sched, &fx.timesteps, &draw.feature_noise).unwrap();
    let teacher_stack = branch_features(&fx.teacher, &inputs, &fx.timesteps).unwrap();
    let run = |p: &DenoiserParams, w: f64, dw: f64| {
        ddm_item(
            p,
            &fx.classifier,
            &teacher_stack,
            &item,
            draw,
            shifts[1].as_ref(),
            &fx.sched,
            &fx.timesteps,
            w,
            dw,
            false,
        )
        .unwrap()
    };
    let d = item.image.len() as f64;
    let a_nll = flatten_trainable(&fx.student.tensors, &run(&fx.student, 1.0, 0.0).student);
    let a_dist = flatten_trainable(&fx.student.tensors, &run(&fx.student, 0.0, 1.0).student);
    let mut st = fx.student.clone();
    let n_nll = fd_tensors(&mut st.tensors, 1e-5, |ts| {
        let p = DenoiserParams {
            tensors: ts.to_vec(),
            ..fx.student.clone()
        };
        run(&p, 1.0, 0.0).parts.nll / d
    });
    let mut st = fx.student.clone();
    let n_dist = fd_tensors(&mut st.tensors, 1e-5, |ts| {
        let p = DenoiserParams {
            tensors: ts.to_vec(),
            ..fx.student.clone()
        };
        let fp = FeaturePair {
            teacher: teacher_stack.clone(),
            student: branch_features(&p, &inputs, &fx.timesteps).unwrap(),
            timesteps: fx.timesteps.clone(),
        };
        feature_distance(&fp).unwrap().1
    });
    DdmGradientErrors {
        student: relative_error(&a_s, &n_s),
        classifier: relative_error(&a_c, &n_c),
        nll_only: relative_error(&a_nll, &n_nll),
        distance: relative_error(&a_dist, &n_dist),
        params: a_s.len() + a_c.len(),
    }
}

/// Gradient error of the margin loss with respect to both distance lists.
pub fn pom_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = DistStats::new(0.9).unwrap();
    stats.mu_n = 1.3;
    stats.mu_a = 2.0;
    let n = 6;
    // clear of the d_n = d_a switch so the loss is smooth at the point
    let d_a: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let d_n: Vec<f64> = d_a
        .iter()
        .map(|a| if rng.random_bool(0.6) { a + rng.random_range(0.2..1.0) } else { (a - rng.random_range(0.2..0.4)).max(0.05) })
        .collect();
    let gamma = 1.7;
    let l = pom_loss(&d_n, &d_a, &stats, gamma).unwrap();
    let f = |dn: &[f64], da: &[f64]| pom_loss(dn, da, &stats, gamma).unwrap().value;
    let h = 1e-6;
    let mut num = Vec::new();
    for i in 0..n {
        let (mut up, mut dn) = (d_n.clone(), d_n.clone());
        up[i] += h;
        dn[i] -= h;
        num.push((f(&up, &d_a) - f(&dn, &d_a)) / (2.0 * h));
    }
    for i in 0..n {
        let (mut up, mut dn) = (d_a.clone(), d_a.clone());
        up[i] += h;
        dn[i] -= h;
        num.push((f(&d_n, &up) - f(&d_n, &dn)) / (2.0 * h));
    }
    let ana: Vec<f64> = l.grad_normal.iter().chain(&l.grad_anomaly).copied().collect();
    relative_error(&ana, &num)
}

/// Gradient error of the pixel cross-entropy with respect to the logits, and
/// of the classifier's pooled image logit with respect to its input.
pub fn classifier_gradient_errors(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Grid::randn(Shape::new(2, 3, 3), &mut rng);
    let mask = Grid::from_vec(Shape::new(1, 3, 3), (0..9).map(|i| f64::from(u8::from(i % 3 == 0))).collect()).unwrap();
    let (_, g) = pixel_cross_entropy(&logits, &mask).unwrap();
    let h = 1e-6;
    let mut num = Vec::new();
    for i in 0..logits.len() {
        let (mut up, mut dn) = (logits.clone(), logits.clone());
        up.data_mut()[i] += h;
        dn.data_mut()[i] -= h;
        num.push(
            (pixel_cross_entropy(&up, &mask).unwrap().0 - pixel_cross_entropy(&dn, &mask).unwrap().0) / (2.0 * h),
        );
    }
    let ce = relative_error(g.data(), &num);

    let fx = DdmFixture::new(seed);
    let disc = fx.disc_with(&fx.student, &fx.classifier);
    let zt = Grid::randn(tiny_arch().input_shape(), &mut rng);
    let t = 3;
    let il = classifier_image_logit(&disc, &zt, t).unwrap();
    let logit = |z: &Grid| {
        let p = classifier_image_logit(&disc, z, t).unwrap().p_anomalous;
        (p / (1.0 - p)).ln()
    };
    let mut num = Vec::new();
    for i in 0..zt.len() {
        let (mut up, mut dn) = (zt.clone(), zt.clone());
        up.data_mut()[i] += 1e-5;
        dn.data_mut()[i] -= 1e-5;
        num.push((logit(&up) - logit(&dn)) / 2e-5);
    }
    (ce, relative_error(il.grad_logit.data(), &num))
}

// ------------------------------------------------- random instances

/// Scores on a coarse grid so ties are common, with both classes present.
pub fn random_auroc_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..60);
    let levels = rng.random_range(2..12);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = labels
        .iter()
        .map(|&l| {
            let shift = if l { 2 } else { 0 };
            f64::from(rng.random_range(0..levels) + shift) / levels as f64
        })
        .collect();
    (scores, labels)
}

/// A few maps of at most 16×16 with blob-like masks and quantized scores.
pub fn random_pro_instance(rng: &mut ChaCha8Rng) -> (Vec<Grid>, Vec<Grid>) {
    let count = rng.random_range(1..4);
    let levels = rng.random_range(3..20);
    let (h, w) = (rng.random_range(3..=16), rng.random_range(3..=16));
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for k in 0..count {
        let mut mask = vec![0.0; h * w];
        if k == 0 || rng.random_bool(0.6) {
            for _ in 0..rng.random_range(1..4) {
                let (cy, cx) = (rng.random_range(0..h), rng.random_range(0..w));
                let r = rng.random_range(0..3) as i64;
                for y in 0..h {
                    for x in 0..w {
                        if (y as i64 - cy as i64).abs() <= r && (x as i64 - cx as i64).abs() <= r {
                            mask[y * w + x] = 1.0;
                        }
                    }
                }
            }
        }
        let map: Vec<f64> = mask
            .iter()
            .map(|m| {
                let base = rng.random_range(0..levels) as f64 / levels as f64;
                (base + 0.4 * m).min(1.0)
            })
            .collect();
        maps.push(Grid::from_rows(h, w, map).unwrap());
        masks.push(Grid::from_rows(h, w, mask).unwrap());
    }
    // one anomaly-free image keeps the negative set non-empty
    let clean: Vec<f64> = (0..h * w).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    maps.push(Grid::from_rows(h, w, clean).unwrap());
    masks.push(Grid::zeros(maps[0].shape()));
    (maps, masks)
}

// ------------------------------------------------- diffusion oracles

/// For three random `(z_0, t)`: the pooled mean error in standard errors and
/// the relative variance error of 10⁴ forward draws of a 4×4 grid.
pub fn forward_marginal_errors(seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02, BetaDirection::Increasing).unwrap();
    let shape = Shape::new(1, 4, 4);
    let mut out = Vec::new();
    for _ in 0..3 {
        let c: f64 = rng.random_range(-2.0..2.0);
        let t = rng.random_range(1..=sched.steps());
        let z0 = Grid::full(shape, c);
        let ab = sched.alpha_bar(t);
        let (want_mean, want_var) = (ab.sqrt() * c, 1.0 - ab);
        let (mut s1, mut s2, mut n) = (0.0, 0.0, 0.0);
        for _ in 0..10_000 {
            let eps = Grid::randn(shape, &mut rng);
            let zt = hdm::diffusion::forward_sample(&z0, t, &eps, &sched).unwrap().z;
            for v in zt.data() {
                s1 += v;
                s2 += (v - want_mean).powi(2);
                n += 1.0;
            }
        }
        let mean = s1 / n;
        let var = s2 / n - (mean - want_mean).powi(2);
        out.push(((mean - want_mean).abs() / (want_var / n).sqrt(), (var - want_var).abs() / want_var));
    }
    out
}

/// Relative error of the closed-form KL against a 10⁶-sample Monte-Carlo
/// estimate, for ten random 3-dimensional diagonal Gaussians.
pub fn kl_monte_carlo_errors(seed: u64) -> Vec<f64> {
    use hdm::diffusion::{gaussian_kl, GaussianStats};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 1, 3);
    let mut out = Vec::new();
    for _ in 0..10 {
        let mut draw = |lo: f64, hi: f64| Grid::from_vec(shape, (0..3).map(|_| rng.random_range(lo..hi)).collect()).unwrap();
        let p = GaussianStats::new(draw(-1.0, 1.0), draw(0.5, 2.0)).unwrap();
        let q = GaussianStats::new(draw(-1.0, 1.0), draw(0.5, 2.0)).unwrap();
        let exact = gaussian_kl(&p, &q).unwrap();
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for i in 0..3 {
                let (m1, v1) = (p.mean.data()[i], p.var.data()[i]);
                let (m2, v2) = (q.mean.data()[i], q.var.data()[i]);
                let x = m1 + v1.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
                acc += 0.5 * ((v2 / v1).ln() - (x - m1).powi(2) / v1 + (x - m2).powi(2) / v2);
            }
        }
        out.push((acc / n as f64 - exact).abs() / exact);
    }
    out
}

pub fn scalar_arch() -> Architecture {
    Architecture {
        in_channels: 1,
        height: 1,
        width: 1,
        widths: vec![16],
        taps: 1,
        time_dim: 16,
    }
}

/// Trains the small denoiser on scalar N(0, 1) data.
pub fn train_scalar_denoiser(steps: usize, seed: u64) -> (DenoiserParams, NoiseSchedule) {
    train_scalar_denoiser_with(steps, 256, 0.002, seed)
}

pub fn train_scalar_denoiser_with(steps: usize, batch_size: usize, lr_floor: f64, seed: u64) -> (DenoiserParams, NoiseSchedule) {
    use hdm::dagm::{train_dagm, DagmTrainSettings};
    let sched = NoiseSchedule::linear(100, 1e-4, 0.04, BetaDirection::Increasing).unwrap();
    let mut params = DenoiserParams::init(&scalar_arch(), seed).unwrap();
    let settings = DagmTrainSettings {
        steps,
        batch_size,
        lr: 1e-2,
        lr_floor,
        lambda: 0.0,
        norm_momentum: 0.05,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train_dagm(
        &mut params,
        &sched,
        &settings,
        |rng| Ok((0..settings.batch_size).map(|_| Grid::randn(Shape::new(1, 1, 1), rng)).collect()),
        &mut rng,
    )
    .unwrap();
    (params, sched)
}

/// Root-mean-square gap between the network and the optimal ε on fresh
/// `(z_0, t, ε)` draws.
pub fn rmse_to_optimum(params: &DenoiserParams, sched: &NoiseSchedule, n: usize, seed: u64) -> f64 {
    use hdm::diffusion::gaussian_optimal_eps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sq = 0.0;
    for _ in 0..n {
        let t = rng.random_range(1..=sched.steps());
        let z0 = Grid::randn(Shape::new(1, 1, 1), &mut rng);
        let eps = Grid::randn(Shape::new(1, 1, 1), &mut rng);
        let zt = hdm::diffusion::forward_sample(&z0, t, &eps, sched).unwrap().z;
        let got = hdm::denoiser::forward(params, &zt, t).unwrap().eps_hat;
        let want = gaussian_optimal_eps(&zt, t, 0.0, 1.0, sched).unwrap();
        sq += (got.data()[0] - want.data()[0]).powi(2);
    }
    (sq / n as f64).sqrt()
}

/// `(x, bound − log N(x; 0, 1), standard error)` for the exact reverse model
/// on scalar N(0, 1) data.
pub fn vlb_oracle_gaps(seed: u64) -> Vec<(f64, f64, f64)> {
    use hdm::diffusion::{estimate_vlb, GaussianOracle};
    let sched = NoiseSchedule::linear(50, 1e-3, 0.2, BetaDirection::Increasing).unwrap();
    let oracle = GaussianOracle {
        mean: 0.0,
        var: 1.0,
        sched: &sched,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [-1.3, 0.0, 0.4, 2.1]
        .into_iter()
        .map(|x| {
            let (vlb, se) = estimate_vlb(&oracle, &Grid::scalar(x), &sched, 400, &mut rng).unwrap();
            let exact = -0.5 * (x * x + (2.0 * std::f64::consts::PI).ln());
            (x, vlb - exact, se)
        })
        .collect()
}

/// τ = 0 on the forced-noise path: zero noise returns the reverse mean bit
/// for bit, unit noise adds exactly `√Σ`, and the rng path equals the
/// forced path with the same draws.
pub fn unperturbed_identity_holds(seed: u64) -> bool {
    use hdm::diffusion::{reverse_mean, reverse_step, reverse_step_with_noise, LatentState};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = NoiseSchedule::linear(20, 1e-3, 0.2, BetaDirection::Increasing).unwrap();
    let shape = Shape::new(1, 3, 5);
    (1..=20).all(|t| {
        let zt = LatentState { z: Grid::randn(shape, &mut rng), t };
        let eps = Grid::randn(shape, &mut rng);
        let sigma = Grid::full(shape, sched.reverse_variance(t));
        let mean = reverse_mean(&zt.z, &eps, t, &sched).unwrap();
        let zero = reverse_step_with_noise(&zt, &eps, 0.0, &sigma, &sched, &Grid::zeros(shape)).unwrap();
        let unit = reverse_step_with_noise(&zt, &eps, 0.0, &sigma, &sched, &Grid::full(shape, 1.0)).unwrap();
        let sd = sched.reverse_variance(t).sqrt();
        let mut a = ChaCha8Rng::seed_from_u64(seed + t as u64);
        let mut b = a.clone();
        let via_rng = reverse_step(&zt, &eps, 0.0, &sigma, &sched, &mut a).unwrap();
        let forced = reverse_step_with_noise(&zt, &eps, 0.0, &sigma, &sched, &Grid::randn(shape, &mut b)).unwrap();
        zero.z == mean
            && zero.t == t - 1
            && unit.z.data().iter().zip(mean.data()).all(|(u, m)| *u == m + sd)
            && via_rng == forced
    })
}

/// `s = 0` and a zero gradient leave the mean bit-exact; the shift is linear
/// in `s` at three scales.
pub fn guidance_identities_hold(seed: u64) -> bool {
    use hdm::ddm::guided_mean;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 4, 4);
    let mu = Grid::randn(shape, &mut rng);
    let sigma = Grid::randn(shape, &mut rng).map(|v| 0.1 + v * v);
    let grad = Grid::randn(shape, &mut rng);
    let s0 = guided_mean(&mu, &sigma, &grad, 0.0).unwrap() == mu;
    let g0 = guided_mean(&mu, &sigma, &Grid::zeros(shape), 2.5).unwrap() == mu;
    let unit = guided_mean(&mu, &sigma, &grad, 1.0).unwrap();
    let linear = [0.5, 2.0, 7.0].iter().all(|&s| {
        let got = guided_mean(&mu, &sigma, &grad, s).unwrap();
        got.data()
            .iter()
            .zip(unit.data())
            .zip(mu.data())
            .all(|((g, u), m)| ((g - m) - s * (u - m)).abs() <= 1e-12 * (1.0 + m.abs()))
    });
    s0 && g0 && linear
}
