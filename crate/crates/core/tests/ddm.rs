mod common;

use common::*;
use hdm::autodiff::Tape;
use hdm::ddm::*;
use hdm::denoiser::{Architecture, DenoiserParams};
use hdm::diffusion::{diag_gaussian_log_density, BetaDirection, GaussianOracle, NoiseSchedule, ReverseModel};
use hdm::{Grid, Shape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_grid(shape: Shape, rng: &mut ChaCha8Rng) -> Grid {
    Grid::randn(shape, rng)
}

fn pair(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeaturePair {
    FeaturePair {
        teacher: random_grid(Shape::new(c, h, w), rng),
        student: random_grid(Shape::new(c, h, w), rng),
        timesteps: vec![1],
    }
}

#[test]
fn identical_branches_give_identical_stacks() {
    let arch = Architecture {
        in_channels: 1,
        height: 8,
        width: 8,
        widths: vec![8, 8, 8],
        taps: 3,
        time_dim: 4,
    };
    let p = DenoiserParams::init(&arch, 3).unwrap();
    let sched = tiny_sched();
    let img = Grid::full(arch.input_shape(), 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fp = extract_features(&p, &p, &img, &sched, &[3], &mut rng).unwrap();
    assert_eq!(fp.teacher, fp.student);
    assert_eq!(fp.teacher.channels(), 24);
    let (d, mean) = feature_distance(&fp).unwrap();
    assert!(d.data().iter().all(|v| *v == 0.0) && mean == 0.0);
}

#[test]
fn feature_means_are_reproducible() {
    let p = DenoiserParams::init(&tiny_arch(), 4).unwrap();
    let q = DenoiserParams::init(&tiny_arch(), 5).unwrap();
    let sched = tiny_sched();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut acc = Grid::zeros(Shape::new(tiny_arch().feature_channels() * 2, 4, 4));
        for _ in 0..5 {
            let img = Grid::from_vec(tiny_arch().input_shape(), (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let fp = extract_features(&p, &q, &img, &sched, &[2, 5], &mut rng).unwrap();
            acc = acc.zip_with(&fp.teacher, |a, b| a + b / 5.0).unwrap();
        }
        acc
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn distance_matches_direct_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fp = pair(5, 3, 4, &mut rng);
    let (map, mean) = feature_distance(&fp).unwrap();
    let mut total = 0.0;
    for y in 0..3 {
        for x in 0..4 {
            let sq: f64 = (0..5).map(|c| (fp.teacher.get(c, y, x) - fp.student.get(c, y, x)).powi(2)).sum();
            assert!((map.get(0, y, x) - sq.sqrt()).abs() < 1e-14);
            total += sq.sqrt();
        }
    }
    assert!((mean - total / 12.0).abs() < 1e-14);
    let bad = FeaturePair { student: Grid::zeros(Shape::new(4, 3, 4)), ..fp };
    assert!(feature_distance(&bad).is_err());
}

#[test]
fn pixel_classifier_has_no_spatial_mixing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fp = pair(3, 4, 5, &mut rng);
    let mut params = PixelClassifierParams::init(6, &[7, 4], 3).unwrap();
    params.fit_input_stats(&[Grid::concat_channels(&[&fp.teacher, &fp.student]).unwrap()]).unwrap();
    let perm: Vec<usize> = {
        let mut p: Vec<usize> = (0..20).collect();
        for i in (1..20).rev() {
            p.swap(i, rng.random_range(0..=i));
        }
        p
    };
    let permute = |g: &Grid| {
        let mut out = g.clone();
        for c in 0..g.channels() {
            for (i, &j) in perm.iter().enumerate() {
                out.channel_mut(c)[i] = g.channel(c)[j];
            }
        }
        out
    };
    let base = pixel_classify(&params, &fp).unwrap();
    let moved = FeaturePair {
        teacher: permute(&fp.teacher),
        student: permute(&fp.student),
        timesteps: fp.timesteps.clone(),
    };
    assert_eq!(pixel_classify(&params, &moved).unwrap(), permute(&base));
}

#[test]
fn log_density_factorizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = Shape::new(2, 3, 3);
    let (z, mu) = (random_grid(s, &mut rng), random_grid(s, &mut rng));
    let var = random_grid(s, &mut rng).map(|v| 0.2 + v * v);
    let total = conditional_log_density(&z, &mu, &var).unwrap();
    let sum: f64 = (0..s.len())
        .map(|i| {
            let (x, m, v) = (z.data()[i], mu.data()[i], var.data()[i]);
            -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln())
        })
        .sum();
    assert!((total - sum).abs() < 1e-12);
}

#[test]
fn single_step_chain_is_one_density_term() {
    let sched = NoiseSchedule::from_betas(vec![0.3]).unwrap();
    let oracle = GaussianOracle { mean: 0.1, var: 0.4, sched: &sched };
    let img = Grid::from_rows(1, 2, vec![0.2, 0.9]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut replay = rng.clone();
    let ll = trajectory_log_likelihood(&img, Label::Normal, &oracle, None, &sched, 0.0, &mut rng).unwrap();
    let z0 = hdm::dagm::to_latent(&img);
    let z1 = hdm::diffusion::forward_transition(&z0, 1, &Grid::randn(img.shape(), &mut replay), &sched).unwrap();
    let p = oracle.reverse(&z1, 1).unwrap();
    assert_eq!(ll, conditional_log_density(&z0, &p.mean, &p.var).unwrap());
}

#[test]
fn exact_chain_matches_closed_form() {
    // E_q[Σ log p(z_{t−1}|z_t)] = log q(z_0) − Σ H(q(z_t|z_{t−1})) − E_q[log p(z_T)]
    let sched = NoiseSchedule::linear(20, 1e-3, 0.2, BetaDirection::Increasing).unwrap();
    let (m, s2) = (0.3, 0.6);
    let oracle = GaussianOracle { mean: m, var: s2, sched: &sched };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for x in [0.1, 0.5, 0.85] {
        let img = Grid::scalar(x);
        let z0 = 2.0 * x - 1.0;
        let draws: Vec<f64> = (0..100)
            .map(|_| trajectory_log_likelihood(&img, Label::Normal, &oracle, None, &sched, 0.0, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / 100.0;
        let se = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 99.0 / 100.0).sqrt();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let log_q0 = -0.5 * ((z0 - m).powi(2) / s2 + (s2).ln() + ln2pi);
        let entropy: f64 = (1..=20).map(|t| 0.5 * (1.0 + ln2pi + sched.beta(t).ln())).sum();
        let ab = sched.alpha_bar(20);
        let var_t = ab * s2 + 1.0 - ab;
        let prior = -0.5 * (var_t.ln() + ln2pi) - 0.5 * (ab * (z0 - m).powi(2) + 1.0 - ab) / var_t;
        let exact = log_q0 - entropy - prior;
        assert!((mean - exact).abs() < 3.0 * se, "x {x}: {mean} ± {se} vs {exact}");
    }
}

#[test]
fn transition_nll_at_the_exact_mean_is_the_entropy_floor() {
    let sched = tiny_sched();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shape = Shape::new(1, 2, 2);
    let t = 4;
    let zt = random_grid(shape, &mut rng);
    let eps = random_grid(shape, &mut rng);
    let mu = hdm::diffusion::reverse_mean(&zt, &eps, t, &sched).unwrap();
    let var = sched.reverse_variance(t);
    let n = 20_000;
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let z_prev = mu.zip_with(&random_grid(shape, &mut rng), |m, e| m + var.sqrt() * e).unwrap();
            transition_nll(&z_prev, &zt, &eps, None, t, &sched).unwrap().0
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n * (n - 1)) as f64).sqrt();
    let floor = 4.0 * 0.5 * (1.0 + (2.0 * std::f64::consts::PI * var).ln());
    assert!((mean - floor).abs() < 3.0 * se, "{mean} ± {se} vs {floor}");
}

#[test]
fn separable_features_drive_cross_entropy_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w) = (4, 4);
    let mask = Grid::from_rows(h, w, (0..16).map(|i| f64::from(u8::from(i % 3 == 0))).collect()).unwrap();
    // channel 0 carries the label, the rest is noise
    let mut stack = random_grid(Shape::new(4, h, w), &mut rng).map(|v| 0.1 * v);
    for p in 0..16 {
        stack.channel_mut(0)[p] = if mask.data()[p] > 0.5 { 1.0 } else { -1.0 };
    }
    let fp = FeaturePair {
        teacher: Grid::concat_channels(&[&Grid::from_vec(Shape::new(2, h, w), stack.data()[..32].to_vec()).unwrap()]).unwrap(),
        student: Grid::from_vec(Shape::new(2, h, w), stack.data()[32..].to_vec()).unwrap(),
        timesteps: vec![1],
    };
    let mut params = PixelClassifierParams::init(4, &[4], 8).unwrap();
    let ce_of = |p: &PixelClassifierParams| pixel_cross_entropy(&pixel_classify(p, &fp).unwrap(), &mask).unwrap();
    let start = ce_of(&params).0;
    for _ in 0..3000 {
        let mut tape = Tape::new();
        let bound = BoundClassifier::bind(&mut tape, &params, true);
        let x = tape.constant(stack.clone());
        let logits = build_classifier(&mut tape, &params, &bound, x).unwrap();
        let (_, g) = pixel_cross_entropy(tape.value(logits), &mask).unwrap();
        let grads = bound.collect(&params, &tape.backward(&[(logits, &g)]).unwrap());
        for (t, gi) in params.tensors.iter_mut().zip(grads) {
            if t.trainable {
                t.values.iter_mut().zip(gi).for_each(|(v, d)| *v -= 0.5 * d);
            }
        }
    }
    let end = ce_of(&params).0;
    assert!(start > 0.1 && end < 1e-2, "ce {start} -> {end}");
}

#[test]
fn posterior_examples_and_prior_scaling() {
    assert_eq!(posterior_from_likelihoods([-3.0, -3.0], [0.5, 0.5]).unwrap(), [0.5, 0.5]);
    assert_eq!(posterior_from_likelihoods([-1.0, -50.0], [0.0, 1.0]).unwrap(), [0.0, 1.0]);
    assert!(posterior_from_likelihoods([0.0, 0.0], [0.7, 0.7]).is_err());
}

proptest! {
    #[test]
    fn distance_is_a_metric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(3, 2, 2);
        let (a, b, c) = (random_grid(s, &mut rng), random_grid(s, &mut rng), random_grid(s, &mut rng));
        let d = |x: &Grid, y: &Grid| feature_distance(&FeaturePair { teacher: x.clone(), student: y.clone(), timesteps: vec![1] }).unwrap().0;
        let (ab, ba, bc, ac, aa) = (d(&a, &b), d(&b, &a), d(&b, &c), d(&a, &c), d(&a, &a));
        for p in 0..4 {
            prop_assert!(ab.data()[p] > 0.0);
            prop_assert_eq!(aa.data()[p], 0.0);
            prop_assert_eq!(ab.data()[p], ba.data()[p]);
            prop_assert!(ac.data()[p] <= ab.data()[p] + bc.data()[p] + 1e-12);
        }
    }

    #[test]
    fn guided_mean_superposes(seed in any::<u64>(), s1 in 0.0f64..5.0, s2 in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sh = Shape::new(1, 3, 3);
        let mu = random_grid(sh, &mut rng);
        let var = random_grid(sh, &mut rng).map(|v| 0.1 + v * v);
        let (g1, g2) = (random_grid(sh, &mut rng), random_grid(sh, &mut rng));
        let shift = |g: &Grid, s: f64| guided_mean(&mu, &var, g, s).unwrap().zip_with(&mu, |a, b| a - b).unwrap();
        let sum = g1.zip_with(&g2, |a, b| a + b).unwrap();
        let (a, b, both) = (shift(&g1, s1), shift(&g2, s1), shift(&sum, s1));
        let (one, two) = (shift(&g1, s1), shift(&g1, s2));
        for i in 0..9 {
            prop_assert!((both.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-12);
            prop_assert!((one.data()[i] * s2 - two.data()[i] * s1).abs() < 1e-11);
        }
    }

    #[test]
    fn density_peaks_at_the_mean(seed in any::<u64>(), scale in 1e-3f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sh = Shape::new(1, 2, 3);
        let mu = random_grid(sh, &mut rng);
        let var = random_grid(sh, &mut rng).map(|v| 0.1 + v * v);
        let moved = mu.zip_with(&random_grid(sh, &mut rng), |m, d| m + scale * d).unwrap();
        prop_assert!(conditional_log_density(&mu, &mu, &var).unwrap() > conditional_log_density(&moved, &mu, &var).unwrap());
        prop_assert_eq!(conditional_log_density(&mu, &mu, &var).unwrap(), diag_gaussian_log_density(&mu, &mu, &var).unwrap());
    }

    #[test]
    fn class_probabilities_sum_to_one(seed in 0u64..1000) {
        let fx = DdmFixture::new(seed);
        let disc = Discriminator { teacher: &fx.teacher, student: &fx.student, classifier: &fx.classifier, groups: fx.timesteps.len() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let il = classifier_image_logit(&disc, &random_grid(tiny_arch().input_shape(), &mut rng), 3).unwrap();
        let [a, b] = il.probabilities();
        prop_assert!((a + b - 1.0).abs() < 1e-15 && a > 0.0 && b > 0.0);
    }

    #[test]
    fn posterior_argmax_ignores_prior_scale(l0 in -50.0f64..0.0, l1 in -50.0f64..0.0, a in 0.01f64..1.0, b in 0.01f64..1.0, k in 0.1f64..10.0) {
        let norm = |x: f64, y: f64| [x / (x + y), y / (x + y)];
        let p = posterior_from_likelihoods([l0, l1], norm(a, b)).unwrap();
        let q = posterior_from_likelihoods([l0, l1], norm(k * a, k * b)).unwrap();
        prop_assert_eq!(p[0] >= p[1], q[0] >= q[1]);
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }
}
