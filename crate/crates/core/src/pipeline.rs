//! Staged training, bundles and inference.
//!
//! Stage one fits the generation network on normal images and freezes it as
//! the teacher. Stage two keeps a pool of (normal image, synthesized anomaly)
//! pairs, and trains the student and the pixel classifier on the weighted sum
//! of the discrimination and margin objectives. Afterwards, per-channel
//! Gaussians of both feature stacks and the spread of their per-pixel
//! likelihoods are fitted on training normals for use at inference.

use std::fmt;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{LossConfig, TrainConfig};
use crate::dagm::{
    make_perturbation_plan, synthesize_anomaly, to_latent, train_dagm, DagmLossParts, DagmTrainSettings, SynthSource,
};
use crate::data_io::{augment, resize, Sample};
use crate::ddm::{
    add_grads, anomaly_logit, branch_features, classify_image, ddm_item, draw_ddm, extract_features, feature_distance, guidance_shift,
    noised_inputs, sigmoid, ClassGuide, DdmItem, Discriminator, FeaturePair, Label, PixelClassifierParams,
};
use crate::denoiser::DenoiserParams;
use crate::diffusion::{EpsReverse, GaussianStats, NoiseSchedule, ReverseModel};
use crate::error::{HdmError, Result};
use crate::grid::{Grid, Shape};
use crate::metrics::{evaluate, EvalReport};
use crate::optim::{cosine_lr, Adam};
use crate::pom::{optimize_likelihood_maps, pom_loss, update_stats, DistStats, MapStats};

/// Which of the three modules take part in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modules {
    pub dagm: bool,
    pub ddm: bool,
    pub pom: bool,
}

impl Default for Modules {
    fn default() -> Self {
        Modules {
            dagm: true,
            ddm: true,
            pom: true,
        }
    }
}

impl Modules {
    /// Parses a `+`-joined list of modules to switch off (`""` keeps all).
    pub fn disabling(spec: &str) -> Result<Self> {
        let mut m = Modules::default();
        for name in spec.split('+').map(str::trim).filter(|s| !s.is_empty()) {
            match name.to_ascii_lowercase().as_str() {
                "dagm" => m.dagm = false,
                "ddm" => m.ddm = false,
                "pom" => m.pom = false,
                other => return Err(HdmError::param(format!("unknown module `{other}`"))),
            }
        }
        Ok(m)
    }
}

impl fmt::Display for Modules {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let off: Vec<&str> = [("dagm", self.dagm), ("ddm", self.ddm), ("pom", self.pom)]
            .iter()
            .filter(|(_, on)| !on)
            .map(|(n, _)| *n)
            .collect();
        if off.is_empty() {
            write!(f, "full")
        } else {
            write!(f, "-{}", off.join("-"))
        }
    }
}

/// `λ1 L_DAGM + λ2 L_DDM + λ3 L_POM`.
pub fn total_loss(l_dagm: f64, l_ddm: f64, l_pom: f64, cfg: &LossConfig) -> Result<f64> {
    for (name, v) in [("generation", l_dagm), ("discrimination", l_ddm), ("margin", l_pom)] {
        if !v.is_finite() {
            return Err(HdmError::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(cfg.lambda1 * l_dagm + cfg.lambda2 * l_ddm + cfg.lambda3 * l_pom)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub stage: &'static str,
    pub step: usize,
    pub total: f64,
    pub mse: Option<f64>,
    pub kl: Option<f64>,
    pub nll: Option<f64>,
    pub ce: Option<f64>,
    pub pom: Option<f64>,
    pub d_normal: Option<f64>,
    pub d_anomaly: Option<f64>,
}

impl LossRow {
    pub const CSV_HEADER: &'static str = "stage,step,total,mse,kl,nll,ce,pom,d_normal,d_anomaly";

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
        format!(
            "{},{},{:.6e},{},{},{},{},{},{},{}",
            self.stage,
            self.step,
            self.total,
            f(self.mse),
            f(self.kl),
            f(self.nll),
            f(self.ce),
            f(self.pom),
            f(self.d_normal),
            f(self.d_anomaly)
        )
    }
}

/// Per-channel diagonal Gaussian over a feature stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

const FEATURE_VAR_FLOOR: f64 = 1e-6;

impl FeatureGaussian {
    pub fn fit(stacks: &[Grid]) -> Result<Self> {
        let first = stacks.first().ok_or_else(|| HdmError::param("no stacks to fit"))?;
        let c = first.channels();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0.0;
        for s in stacks {
            for ch in 0..c {
                for v in s.channel(ch) {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += s.shape().pixels() as f64;
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let var = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0) + FEATURE_VAR_FLOOR)
            .collect();
        Ok(FeatureGaussian { mean, var })
    }

    /// Per-pixel log density of the stack.
    pub fn log_likelihood_map(&self, stack: &Grid) -> Result<Grid> {
        if stack.channels() != self.mean.len() {
            return Err(HdmError::BundleMismatch(format!(
                "feature stack has {} channels, statistics {}",
                stack.channels(),
                self.mean.len()
            )));
        }
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut out = vec![0.0; stack.shape().pixels()];
        for ch in 0..stack.channels() {
            let (m, v) = (self.mean[ch], self.var[ch]);
            let k = v.ln() + ln2pi;
            for (o, x) in out.iter_mut().zip(stack.channel(ch)) {
                *o -= 0.5 * ((x - m).powi(2) / v + k);
            }
        }
        Grid::from_rows(stack.height(), stack.width(), out)
    }
}

/// Statistics stored beside the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleStats {
    pub modules: Modules,
    pub timesteps: Vec<usize>,
    pub gamma: f64,
    pub dist: DistStats,
    pub teacher_features: FeatureGaussian,
    pub student_features: FeatureGaussian,
    pub teacher_map: MapStats,
    pub student_map: MapStats,
}

/// Trained components.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub teacher: DenoiserParams,
    pub student: DenoiserParams,
    pub classifier: PixelClassifierParams,
    pub stats: BundleStats,
    pub config: TrainConfig,
}

pub const TEACHER_FILE: &str = "teacher.ckpt";
pub const STUDENT_FILE: &str = "student.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const STATS_FILE: &str = "pom_stats.json";
pub const CONFIG_FILE: &str = "config.toml";

impl Bundle {
    pub fn discriminator(&self) -> Discriminator<'_> {
        Discriminator {
            teacher: &self.teacher,
            student: &self.student,
            classifier: &self.classifier,
            groups: self.stats.timesteps.len(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&self.teacher, &dir.join(TEACHER_FILE))?;
        save_checkpoint(&self.student, &dir.join(STUDENT_FILE))?;
        Checkpoint::from(&self.classifier).save(&dir.join(CLASSIFIER_FILE))?;
        let json = serde_json::to_string_pretty(&self.stats).expect("stats serialize");
        std::fs::write(dir.join(STATS_FILE), json + "\n")?;
        std::fs::write(dir.join(CONFIG_FILE), self.config.to_toml())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let teacher = load_checkpoint(&dir.join(TEACHER_FILE))?;
        let student = load_checkpoint(&dir.join(STUDENT_FILE))?;
        let classifier = PixelClassifierParams::try_from(Checkpoint::load(&dir.join(CLASSIFIER_FILE))?)?;
        let stats_path = dir.join(STATS_FILE);
        let text = std::fs::read_to_string(&stats_path)?;
        let stats: BundleStats =
            serde_json::from_str(&text).map_err(|e| HdmError::format(format!("{}: {e}", stats_path.display())))?;
        let config = TrainConfig::load(&dir.join(CONFIG_FILE))?;
        let b = Bundle {
            teacher,
            student,
            classifier,
            stats,
            config,
        };
        b.check()?;
        Ok(b)
    }

    /// Cross-checks components against each other and the stored config.
    pub fn check(&self) -> Result<()> {
        let mismatch = |m: String| Err(HdmError::BundleMismatch(m));
        if !self.teacher.frozen {
            return mismatch("teacher checkpoint is not frozen".into());
        }
        if self.teacher.arch != self.student.arch {
            return mismatch("teacher and student architectures differ".into());
        }
        if self.teacher.arch != self.config.architecture() {
            return mismatch("checkpoint architecture differs from the config snapshot".into());
        }
        if self.stats.timesteps != self.config.feature_timesteps() {
            return mismatch("feature timesteps differ from the config snapshot".into());
        }
        let per_branch = self.teacher.arch.feature_channels() * self.stats.timesteps.len();
        if self.classifier.in_channels != 2 * per_branch {
            return mismatch(format!(
                "classifier expects {} channels, branches give {}",
                self.classifier.in_channels,
                2 * per_branch
            ));
        }
        if self.stats.teacher_features.mean.len() != per_branch || self.stats.student_features.mean.len() != per_branch {
            return mismatch("feature statistics do not match the branches".into());
        }
        Ok(())
    }
}

fn training_batch(train: &[Sample], n: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Grid>> {
    let r = cfg.data.resolution;
    (0..n)
        .map(|_| {
            let s = &train[rng.random_range(0..train.len())];
            Ok(augment(s, (r, r), rng, &cfg.data.augment)?.image)
        })
        .collect()
}

fn check_train_set(train: &[Sample], cfg: &TrainConfig) -> Result<()> {
    if train.is_empty() {
        return Err(HdmError::param("training set is empty"));
    }
    if let Some(s) = train.iter().find(|s| s.image.channels() != cfg.data.channels) {
        return Err(HdmError::param(format!("{} has {} channels, config {}", s.id, s.image.channels(), cfg.data.channels)));
    }
    Ok(())
}

/// Stage one: fits the generation network and returns it frozen.
pub fn train_teacher(train: &[Sample], cfg: &TrainConfig, log: &mut Vec<LossRow>) -> Result<DenoiserParams> {
    cfg.validate()?;
    check_train_set(train, cfg)?;
    let sched = cfg.schedule()?;
    let mut params = DenoiserParams::init(&cfg.architecture(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let settings = DagmTrainSettings {
        steps: cfg.dagm.steps,
        batch_size: cfg.dagm.batch_size,
        lr: cfg.dagm.lr,
        lr_floor: cfg.dagm.lr_floor,
        lambda: cfg.dagm.lambda,
        norm_momentum: cfg.dagm.norm_momentum,
    };
    let bs = cfg.dagm.batch_size;
    let parts: Vec<DagmLossParts> = train_dagm(
        &mut params,
        &sched,
        &settings,
        |rng| Ok(training_batch(train, bs, cfg, rng)?.iter().map(to_latent).collect()),
        &mut rng,
    )?;
    for (step, p) in parts.iter().enumerate() {
        log.push(LossRow {
            stage: "dagm",
            step,
            total: total_loss(p.total, 0.0, 0.0, &cfg.loss)?,
            mse: Some(p.mse),
            kl: Some(p.kl),
            nll: None,
            ce: None,
            pom: None,
            d_normal: None,
            d_anomaly: None,
        });
    }
    Ok(params.freeze())
}

/// A normal image with the anomaly made from it.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub normal: Grid,
    pub anomaly: Grid,
    pub mask: Grid,
}

/// Noising depth before perturbed denoising, uniform over `range · T`.
pub fn draw_depth<R: Rng + ?Sized>(sched: &NoiseSchedule, range: [f64; 2], rng: &mut R) -> usize {
    let t = sched.steps();
    let lo = ((range[0] * t as f64).round() as usize).clamp(1, t);
    let hi = ((range[1] * t as f64).round() as usize).clamp(lo, t);
    rng.random_range(lo..=hi)
}

/// Synthesizes the anomalous partner of a random training image. With the
/// generation module off, the masked region is replaced by Gaussian noise.
pub fn make_pair(
    train: &[Sample],
    teacher: &DenoiserParams,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    use_dagm: bool,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingPair> {
    let normal = training_batch(train, 1, cfg, rng)?.remove(0);
    let shape = normal.shape();
    let depth = draw_depth(sched, cfg.dagm.depth_range, rng);
    let plan = make_perturbation_plan(rng, shape, depth, &cfg.dagm.plan)?;
    let (anomaly, mask) = if use_dagm {
        let syn = synthesize_anomaly(teacher, sched, shape, &plan, SynthSource::Image { image: &normal, depth }, rng)?;
        (syn.image, syn.gt_mask)
    } else {
        let noise = Grid::randn(shape, rng);
        let n = shape.pixels();
        let mut img = normal.clone();
        for c in 0..shape.channels {
            for p in 0..n {
                if plan.mask.data()[p] > 0.5 {
                    img.data_mut()[c * n + p] = (0.5 + 0.25 * noise.data()[c * n + p]).clamp(0.0, 1.0);
                }
            }
        }
        (img, plan.mask)
    };
    Ok(TrainingPair { normal, anomaly, mask })
}

fn calibration_stacks(
    train: &[Sample],
    teacher: &DenoiserParams,
    student: &DenoiserParams,
    sched: &NoiseSchedule,
    timesteps: &[usize],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FeaturePair>> {
    let n = count.clamp(1, train.len());
    let idx = sample_indices(rng, train.len(), n).into_vec();
    idx.into_iter()
        .map(|i| extract_features(teacher, student, &train[i].image, sched, timesteps, rng))
        .collect()
}

/// Stage two plus calibration.
pub fn train_discriminator(
    train: &[Sample],
    teacher: DenoiserParams,
    cfg: &TrainConfig,
    modules: Modules,
    log: &mut Vec<LossRow>,
) -> Result<Bundle> {
    cfg.validate()?;
    check_train_set(train, cfg)?;
    if teacher.arch != cfg.architecture() {
        return Err(HdmError::BundleMismatch("teacher architecture differs from the config".into()));
    }
    let teacher = teacher.freeze();
    let sched = cfg.schedule()?;
    let timesteps = cfg.feature_timesteps();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut student = teacher.clone();
    student.frozen = false;
    let per_branch = teacher.arch.feature_channels() * timesteps.len();
    let mut classifier = PixelClassifierParams::init(2 * per_branch, &cfg.ddm.hidden, cfg.seed.wrapping_add(1))?;
    let calib = calibration_stacks(train, &teacher, &student, &sched, &timesteps, cfg.infer.calibration_images, &mut rng)?;
    let inputs: Vec<Grid> = calib
        .iter()
        .map(|fp| Grid::concat_channels(&[&fp.teacher, &fp.student]))
        .collect::<Result<_>>()?;
    classifier.fit_input_stats(&inputs)?;

    let lambda2 = cfg.loss.lambda2;
    let lambda3 = if modules.pom { cfg.loss.lambda3 } else { 0.0 };
    let s = if modules.ddm { cfg.ddm.s } else { 0.0 };
    let mut dist = DistStats::new(cfg.pom.decay)?;
    let mut opt_s = Adam::new(&student.tensors);
    let mut opt_c = Adam::new(&classifier.tensors);
    let mut pool: Vec<TrainingPair> = (0..cfg.ddm.pool_size)
        .map(|_| make_pair(train, &teacher, &sched, cfg, modules.dagm, &mut rng))
        .collect::<Result<_>>()?;
    let mut cursor = 0;
    let nb = cfg.ddm.batch_size;

    for step in 0..cfg.ddm.steps {
        if step > 0 {
            for _ in 0..cfg.ddm.synth_per_step {
                pool[cursor] = make_pair(train, &teacher, &sched, cfg, modules.dagm, &mut rng)?;
                cursor = (cursor + 1) % pool.len();
            }
        }
        let slots = sample_indices(&mut rng, pool.len(), nb).into_vec();
        let zero_mask = Grid::zeros(Shape::new(1, cfg.data.resolution, cfg.data.resolution));
        let mut items = Vec::with_capacity(2 * nb);
        for &k in &slots {
            items.push(DdmItem {
                image: &pool[k].normal,
                label: Label::Normal,
                mask: &zero_mask,
            });
        }
        for &k in &slots {
            items.push(DdmItem {
                image: &pool[k].anomaly,
                label: Label::Anomalous,
                mask: &pool[k].mask,
            });
        }
        let draws: Vec<_> = items
            .iter()
            .map(|it| draw_ddm(it.image.shape(), &sched, &timesteps, &mut rng))
            .collect();

        // distances first: the margin loss couples each slot's two items
        let mut teacher_stacks = Vec::with_capacity(items.len());
        let mut dists = Vec::with_capacity(items.len());
        for (it, d) in items.iter().zip(&draws) {
            let inputs = noised_inputs(it.image, &sched, &timesteps, &d.feature_noise)?;
            let fp = FeaturePair {
                teacher: branch_features(&teacher, &inputs, &timesteps)?,
                student: branch_features(&student, &inputs, &timesteps)?,
                timesteps: timesteps.clone(),
            };
            dists.push(feature_distance(&fp)?.1);
            teacher_stacks.push(fp.teacher);
        }
        let (d_n, d_a) = dists.split_at(nb);
        let pom = pom_loss(d_n, d_a, &dist, cfg.pom.gamma)?;
        let l_pom = pom.value / nb as f64;
        dist = update_stats(&dist, d_n, d_a)?;

        let disc = Discriminator {
            teacher: &teacher,
            student: &student,
            classifier: &classifier,
            groups: timesteps.len(),
        };
        let mut g_student = student.zero_grads();
        let mut g_classifier = classifier.zero_grads();
        let mut l_ddm = 0.0;
        let (mut nll, mut ce) = (0.0, 0.0);
        let n_items = items.len() as f64;
        for (i, (it, d)) in items.iter().zip(&draws).enumerate() {
            let shift = guidance_shift(&disc, it.image, it.label, d, &sched, s)?;
            let dw = if i < nb { pom.grad_normal[i] } else { pom.grad_anomaly[i - nb] };
            let g = ddm_item(
                &student,
                &classifier,
                &teacher_stacks[i],
                it,
                d,
                shift.as_ref(),
                &sched,
                &timesteps,
                lambda2 / n_items,
                lambda3 * dw / nb as f64,
                modules.ddm,
            )?;
            add_grads(&mut g_student, &g.student);
            add_grads(&mut g_classifier, &g.classifier);
            l_ddm += g.parts.objective(it.image.len()) / n_items;
            nll += g.parts.nll / it.image.len() as f64 / n_items;
            ce += g.parts.ce / n_items;
        }
        let total = total_loss(0.0, l_ddm, l_pom, &LossConfig { lambda3, ..cfg.loss.clone() })?;
        let lr = cosine_lr(cfg.ddm.lr, step, cfg.ddm.steps, cfg.ddm.lr_floor);
        opt_s.step(&mut student.tensors, &g_student, lr, false)?;
        if modules.ddm {
            opt_c.step(&mut classifier.tensors, &g_classifier, lr, false)?;
        }
        log.push(LossRow {
            stage: "ddm",
            step,
            total,
            mse: None,
            kl: None,
            nll: Some(nll),
            ce: modules.ddm.then_some(ce),
            pom: Some(l_pom),
            d_normal: Some(d_n.iter().sum::<f64>() / nb as f64),
            d_anomaly: Some(d_a.iter().sum::<f64>() / nb as f64),
        });
    }

    let calib = calibration_stacks(train, &teacher, &student, &sched, &timesteps, cfg.infer.calibration_images, &mut rng)?;
    let teacher_features = FeatureGaussian::fit(&calib.iter().map(|fp| fp.teacher.clone()).collect::<Vec<_>>())?;
    let student_features = FeatureGaussian::fit(&calib.iter().map(|fp| fp.student.clone()).collect::<Vec<_>>())?;
    let nll_maps = |g: &FeatureGaussian, pick: fn(&FeaturePair) -> &Grid| -> Result<Vec<Grid>> {
        calib
            .iter()
            .map(|fp| Ok(g.log_likelihood_map(pick(fp))?.map(|v| -v)))
            .collect()
    };
    let teacher_map = MapStats::fit(&nll_maps(&teacher_features, |fp| &fp.teacher)?)?;
    let student_map = MapStats::fit(&nll_maps(&student_features, |fp| &fp.student)?)?;
    if !student.is_finite() || !classifier.is_finite() {
        return Err(HdmError::Numeric("parameters went non-finite".into()));
    }
    Ok(Bundle {
        teacher,
        student,
        classifier,
        stats: BundleStats {
            modules,
            timesteps,
            gamma: cfg.pom.gamma,
            dist,
            teacher_features,
            student_features,
            teacher_map,
            student_map,
        },
        config: cfg.clone(),
    })
}

/// Both stages.
pub fn train_all(train: &[Sample], cfg: &TrainConfig, modules: Modules, log: &mut Vec<LossRow>) -> Result<Bundle> {
    let teacher = train_teacher(train, cfg, log)?;
    train_discriminator(train, teacher, cfg, modules, log)
}

/// Per-pixel anomaly probabilities and their maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub map: Grid,
    pub image_score: f64,
}

/// Seed of the feature noise used at inference; every image sees the same
/// draws so scores differ only through image content.
pub fn inference_rng(cfg: &TrainConfig) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    rng
}

/// Anomaly map of one image (resolution must match the bundle).
pub fn infer_anomaly_map(image: &Grid, bundle: &Bundle, rng: &mut ChaCha8Rng) -> Result<AnomalyMap> {
    let arch = &bundle.teacher.arch;
    if image.shape() != arch.input_shape() {
        return Err(HdmError::contract(format!("image {} does not match the bundle's {}", image.shape(), arch.input_shape())));
    }
    let sched = bundle.config.schedule()?;
    let st = &bundle.stats;
    let draws = bundle.config.infer.feature_draws;
    let hw = Shape::new(1, image.height(), image.width());
    let (mut logit, mut lp_e, mut lp_a, mut dist) = (Grid::zeros(hw), Grid::zeros(hw), Grid::zeros(hw), Grid::zeros(hw));
    let acc = |a: &mut Grid, b: &Grid| a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y / draws as f64);
    for _ in 0..draws {
        let fp = extract_features(&bundle.teacher, &bundle.student, image, &sched, &st.timesteps, rng)?;
        if st.modules.ddm {
            acc(&mut logit, &anomaly_logit(&crate::ddm::pixel_classify(&bundle.classifier, &fp)?));
            acc(&mut lp_e, &st.teacher_features.log_likelihood_map(&fp.teacher)?);
            acc(&mut lp_a, &st.student_features.log_likelihood_map(&fp.student)?);
        } else {
            acc(&mut dist, &feature_distance(&fp)?.0);
        }
    }
    let map = if !st.modules.ddm {
        let mu = st.dist.mu_n.max(crate::pom::MIN_DISTANCE);
        dist.map(|d| d / (d + mu))
    } else {
        let p_e = if st.modules.pom {
            optimize_likelihood_maps(&lp_e, &lp_a, &st.teacher_map, &st.student_map, st.gamma)?.0
        } else {
            Grid::full(hw, 1.0)
        };
        p_e.zip_with(&logit, |p, l| sigmoid(p * l))?
    };
    if !map.is_finite() {
        return Err(HdmError::Numeric("anomaly map is not finite".into()));
    }
    let image_score = map.max();
    Ok(AnomalyMap { map, image_score })
}

/// Student reverse process with its variance scaled by `1 + τ`.
struct InflatedReverse<'a> {
    inner: EpsReverse<'a, DenoiserParams>,
    tau: f64,
}

impl ReverseModel for InflatedReverse<'_> {
    fn reverse(&self, zt: &Grid, t: usize) -> Result<GaussianStats> {
        let mut p = self.inner.reverse(zt, t)?;
        let k = 1.0 + self.tau;
        p.var = p.var.map(|v| v * k);
        Ok(p)
    }
}

/// Image-level posterior `(normal, anomalous)` from classifier-guided
/// trajectory likelihoods of the student, at guidance scale `s` and reverse
/// variance inflation `1 + τ`.
pub fn bayes_posterior(image: &Grid, bundle: &Bundle, s: f64, tau: f64, rng: &mut ChaCha8Rng) -> Result<[f64; 2]> {
    if !(tau >= 0.0) {
        return Err(HdmError::param(format!("tau {tau} must be non-negative")));
    }
    let sched = bundle.config.schedule()?;
    let model = InflatedReverse {
        inner: EpsReverse {
            model: &bundle.student,
            sched: &sched,
        },
        tau,
    };
    let disc = bundle.discriminator();
    let guide: Option<&dyn ClassGuide> = if bundle.stats.modules.ddm { Some(&disc) } else { None };
    classify_image(image, &model, guide, &sched, bundle.config.ddm.priors, s, rng)
}

/// Maps of every test sample, resized to the bundle resolution.
pub fn infer_all(samples: &[Sample], bundle: &Bundle) -> Result<Vec<AnomalyMap>> {
    let a = &bundle.teacher.arch;
    samples
        .iter()
        .map(|s| {
            let img = resize(&s.image, a.height, a.width);
            infer_anomaly_map(&img, bundle, &mut inference_rng(&bundle.config))
        })
        .collect()
}

/// Metrics of `bundle` on `test`, with masks resized to the bundle resolution.
pub fn evaluate_bundle(test: &[Sample], bundle: &Bundle) -> Result<(Vec<AnomalyMap>, EvalReport)> {
    let a = &bundle.teacher.arch;
    let maps = infer_all(test, bundle)?;
    let grids: Vec<Grid> = maps.iter().map(|m| m.map.clone()).collect();
    let masks: Vec<Grid> = test
        .iter()
        .map(|s| crate::data_io::resize_mask(&s.mask, a.height, a.width))
        .collect();
    let report = evaluate(&grids, &masks, bundle.config.infer.pro_fpr)?;
    Ok((maps, report))
}

/// Result of one ablation configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub modules: Modules,
    pub report: EvalReport,
}

/// Trains with `modules` and evaluates on `test`. A shared teacher can be
/// passed to skip stage one; it is retrained otherwise.
pub fn ablation_run(
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    modules: Modules,
    teacher: Option<&DenoiserParams>,
) -> Result<(Bundle, AblationRow)> {
    let mut log = Vec::new();
    let teacher = match teacher {
        Some(t) => t.clone(),
        None => train_teacher(train, cfg, &mut log)?,
    };
    let bundle = train_discriminator(train, teacher, cfg, modules, &mut log)?;
    let (_, report) = evaluate_bundle(test, &bundle)?;
    Ok((bundle, AblationRow { modules, report }))
}
