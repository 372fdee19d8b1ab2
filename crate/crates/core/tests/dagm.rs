mod common;

use common::*;
use hdm::dagm::*;
use hdm::denoiser::DenoiserParams;
use hdm::diffusion::{forward_sample, gaussian_optimal_eps, sample_trajectory, BetaDirection, GaussianOracle, NoiseSchedule};
use hdm::{Grid, Shape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: Shape = Shape {
    channels: 1,
    height: 12,
    width: 12,
};

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(20, 1e-3, 0.2, BetaDirection::Increasing).unwrap()
}

fn plan(seed: u64, tau: f64, max_step: usize) -> PerturbationPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = PlanConfig {
        tau_range: [tau, tau],
        area_band: [0.1, 0.5],
        ..PlanConfig::default()
    };
    make_perturbation_plan(&mut rng, SHAPE, max_step, &cfg).unwrap()
}

fn synth(model: &dyn hdm::diffusion::EpsModel, s: &NoiseSchedule, p: &PerturbationPlan, src: SynthSource<'_>, seed: u64) -> SynthesizedAnomaly {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synthesize_anomaly(model, s, SHAPE, p, src, &mut rng).unwrap()
}

/// Mean squared deviation from `base` inside and outside the mask.
fn deviations(a: &Grid, base: &Grid, mask: &Grid) -> (f64, f64) {
    let (mut i, mut ni, mut o, mut no) = (0.0, 0.0f64, 0.0, 0.0f64);
    for ((x, y), m) in a.data().iter().zip(base.data()).zip(mask.data()) {
        let d = (x - y).powi(2);
        if *m > 0.5 {
            i += d;
            ni += 1.0;
        } else {
            o += d;
            no += 1.0;
        }
    }
    (i / ni.max(1.0), o / no.max(1.0))
}

#[test]
fn outside_mask_is_bit_identical_to_unperturbed_run() {
    let s = sched();
    let oracle = GaussianOracle { mean: 0.1, var: 0.3, sched: &s };
    let net = DenoiserParams::init(&hdm::denoiser::Architecture { height: 12, width: 12, ..tiny_arch() }, 3).unwrap();
    let src = Grid::full(SHAPE, 0.4);
    for k in 0..20 {
        let p = plan(k, 1.5, s.steps());
        let p0 = PerturbationPlan { tau: 0.0, ..p.clone() };
        let cases: [(&dyn hdm::diffusion::EpsModel, SynthSource<'_>); 3] = [
            (&oracle, SynthSource::Noise),
            (&net, SynthSource::Noise),
            (&oracle, SynthSource::Image { image: &src, depth: 1 + (k as usize % s.steps()) }),
        ];
        for (model, source) in cases {
            let a = synth(model, &s, &p, source, 100 + k);
            let b = synth(model, &s, &p0, source, 100 + k);
            assert_eq!(a.gt_mask, p.mask);
            for ((x, y), m) in a.image.data().iter().zip(b.image.data()).zip(p.mask.data()) {
                if *m < 0.5 {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}

#[test]
fn zero_tau_is_plain_sampling() {
    // same stream: identical; independent streams: same pixel marginals
    let s = sched();
    let oracle = GaussianOracle { mean: 0.2, var: 0.4, sched: &s };
    let centre = SHAPE.width * 6 + 6;
    let mut perturbed = Vec::new();
    let mut plain = Vec::new();
    for k in 0..500u64 {
        let p = plan(k, 0.0, s.steps());
        let a = synth(&oracle, &s, &p, SynthSource::Noise, k);
        let mut r = ChaCha8Rng::seed_from_u64(k);
        let same = sample_trajectory(&oracle, SHAPE, &s, 0.0, None, &mut r).unwrap();
        assert_eq!(a.image, from_latent(&same.sample));
        perturbed.push(a.image.data()[centre]);
        let mut r = ChaCha8Rng::seed_from_u64(10_000 + k);
        plain.push(from_latent(&sample_trajectory(&oracle, SHAPE, &s, 0.0, None, &mut r).unwrap().sample).data()[centre]);
    }
    let d = ks_statistic(&perturbed, &plain);
    assert!(d < ks_critical(500, 500, 0.01), "KS {d}");
}

#[test]
fn disturbance_concentrates_inside_the_mask() {
    let s = sched();
    let oracle = GaussianOracle { mean: 0.0, var: 0.5, sched: &s };
    let (mut inside, mut outside) = (0.0, 0.0);
    for k in 0..100u64 {
        let p = plan(k, 1.0, s.steps());
        let p0 = PerturbationPlan { tau: 0.0, ..p.clone() };
        let a = synth(&oracle, &s, &p, SynthSource::Noise, 500 + k);
        let b = synth(&oracle, &s, &p0, SynthSource::Noise, 500 + k);
        let (i, o) = deviations(&a.image, &b.image, &p.mask);
        inside += i;
        outside += o;
    }
    assert!(inside > outside, "inside {inside}, outside {outside}");
}

#[test]
fn disturbance_grows_with_tau() {
    let s = sched();
    let oracle = GaussianOracle { mean: 0.0, var: 0.5, sched: &s };
    let taus = [0.0, 0.25, 0.5, 1.0];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut means = [0.0; 4];
    for k in 0..100u64 {
        let p = plan(1000 + k, 0.0, s.steps());
        let base = synth(&oracle, &s, &p, SynthSource::Noise, 2000 + k);
        for (j, &tau) in taus.iter().enumerate() {
            let a = synth(&oracle, &s, &PerturbationPlan { tau, ..p.clone() }, SynthSource::Noise, 2000 + k);
            let d = deviations(&a.image, &base.image, &p.mask).0;
            xs.push(tau);
            ys.push(d);
            means[j] += d / 100.0;
        }
    }
    assert!(spearman(&xs, &ys) > 0.0);
    assert!(means.windows(2).all(|w| w[0] <= w[1]), "{means:?}");
}

#[test]
fn plan_masks_stay_in_the_area_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = PlanConfig::default();
    for _ in 0..1000 {
        let p = make_perturbation_plan(&mut rng, Shape::new(1, 32, 32), 50, &cfg).unwrap();
        let a = p.area_fraction();
        assert!((cfg.area_band[0]..=cfg.area_band[1]).contains(&a), "area {a}");
        assert!(p.tau >= cfg.tau_range[0] && p.tau <= cfg.tau_range[1]);
        assert_eq!(p.steps.len(), 25);
        assert!(p.steps.windows(2).all(|w| w[1] == w[0] + 1));
        assert!(p.mask.data().iter().all(|m| *m == 0.0 || *m == 1.0));
    }
}

#[test]
fn trained_loss_is_near_the_irreducible_floor() {
    let (params, sched) = train_scalar_denoiser(2000, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut net, mut best) = (0.0, 0.0);
    for _ in 0..20_000 {
        let t = rng.random_range(1..=sched.steps());
        let z0 = Grid::randn(Shape::new(1, 1, 1), &mut rng);
        let eps = Grid::randn(z0.shape(), &mut rng);
        let zt = forward_sample(&z0, t, &eps, &sched).unwrap().z;
        let opt = gaussian_optimal_eps(&zt, t, 0.0, 1.0, &sched).unwrap().data()[0];
        let got = hdm::denoiser::forward(&params, &zt, t).unwrap().eps_hat.data()[0];
        net += (eps.data()[0] - got).powi(2);
        best += (eps.data()[0] - opt).powi(2);
    }
    assert!(net <= 1.1 * best, "trained {net}, floor {best}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn locality_holds_for_any_plan(seed in any::<u64>(), tau in 0.0f64..3.0) {
        let s = NoiseSchedule::linear(6, 0.01, 0.3, BetaDirection::Increasing).unwrap();
        let oracle = GaussianOracle { mean: 0.0, var: 1.0, sched: &s };
        let p = plan(seed, tau, s.steps());
        let p0 = PerturbationPlan { tau: 0.0, ..p.clone() };
        let a = synth(&oracle, &s, &p, SynthSource::Noise, seed ^ 1);
        let b = synth(&oracle, &s, &p0, SynthSource::Noise, seed ^ 1);
        prop_assert_eq!(&a.gt_mask, &p.mask);
        prop_assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for ((x, y), m) in a.image.data().iter().zip(b.image.data()).zip(p.mask.data()) {
            if *m < 0.5 {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn plans_are_seed_deterministic(seed in any::<u64>()) {
        prop_assert_eq!(plan(seed, 0.5, 30), plan(seed, 0.5, 30));
    }
}
