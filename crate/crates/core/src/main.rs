use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hdm::checkpoint::{load_checkpoint, save_checkpoint};
use hdm::config::TrainConfig;
use hdm::dagm::{make_perturbation_plan, synthesize_anomaly, SynthSource};
use hdm::data_io::{gen_synthetic, load_dataset, load_image, read_map, resize, resize_mask, save_image, sidecar_path, write_map, DatasetSpec, Sample,
};
use hdm::metrics::{evaluate, EvalReport};
use hdm::pipeline::{
    ablation_run, bayes_posterior, draw_depth, inference_rng, infer_anomaly_map, train_discriminator, train_teacher, Bundle, LossRow,
    Modules, CONFIG_FILE, TEACHER_FILE,
};
use hdm::{Grid, HdmError, Result, Shape};

/// Anomaly synthesis, training and evaluation for hybrid diffusion anomaly
/// detection.
///
/// Exit codes: 0 success, 2 usage, 3 I/O, 4 numeric failure, 5 bundle
/// mismatch, 6 shape mismatch. `HDM_SEED` overrides the configured seed and
/// `--seed` overrides both.
#[derive(Parser)]
#[command(name = "hdm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset in the MVTec layout.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// TOML file with dataset fields (resolution, counts, texture, ...),
        /// or a run config whose `[dataset]` section is used.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train the teacher, the student and classifier, or both.
    Train {
        /// Category directory (or a root combined with `data.category`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Stage::All)]
        stage: Stage,
        /// Modules to switch off, joined with `+`.
        #[arg(long, default_value = "")]
        disable: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Serial execution on a single random stream. Runs are always serial,
        /// so this only documents intent.
        #[arg(long)]
        deterministic: bool,
    },
    /// Write an anomaly map per image and a scores table.
    Infer {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reverse variance inflation for the likelihood posterior column.
        #[arg(long)]
        tau: Option<f64>,
        /// Guidance scale for the likelihood posterior column.
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Score maps against ground truth masks.
    Eval {
        #[arg(long)]
        maps: PathBuf,
        /// Category directory with `test/` and `ground_truth/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        pro_fpr: f64,
        #[arg(long)]
        deterministic: bool,
    },
    /// Compare the full model with module ablations.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated ablations; each entry is a `+`-joined module set.
        #[arg(long, default_value = "")]
        disable: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Synthesize labeled anomalies with a trained teacher.
    Synth {
        /// Bundle or teacher-only directory.
        #[arg(long)]
        bundle: PathBuf,
        /// Normal images to perturb; sampled from noise when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Dagm,
    Ddm,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, seed, spec } => gen_data(&out, seed, spec.as_deref()),
        Command::Train {
            data,
            config,
            out,
            stage,
            disable,
            seed,
            deterministic: _,
        } => train(&data, &config, &out, stage, &disable, seed),
        Command::Infer {
            bundle,
            images,
            out,
            tau,
            s,
            deterministic: _,
        } => infer(&bundle, &images, &out, tau, s),
        Command::Eval {
            maps,
            data,
            report,
            pro_fpr,
            deterministic: _,
        } => eval(&maps, &data, &report, pro_fpr),
        Command::Ablate {
            data,
            config,
            disable,
            out,
            seed,
            deterministic: _,
        } => ablate(&data, &config, &disable, &out, seed),
        Command::Synth {
            bundle,
            data,
            count,
            out,
            seed,
        } => synth(&bundle, data.as_deref(), count, &out, seed),
    }
}

fn resolve_seed(configured: u64, flag: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("HDM_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| HdmError::param(format!("HDM_SEED `{v}` is not an unsigned integer"))),
        Err(_) => Ok(configured),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path)?;
    cfg.seed = resolve_seed(cfg.seed, seed)?;
    Ok(cfg)
}

fn gen_data(out: &Path, seed: Option<u64>, spec: Option<&Path>) -> Result<()> {
    let mut spec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| HdmError::load(p, e.to_string()))?;
            // a run config is accepted too; its [dataset] section is used
            match toml::from_str::<DatasetSpec>(&text) {
                Ok(spec) => spec,
                Err(e) => match TrainConfig::from_toml(&text) {
                    Ok(cfg) => cfg.dataset,
                    Err(_) => return Err(HdmError::param(format!("{}: {e}", p.display()))),
                },
            }
        }
        None => DatasetSpec::default(),
    };
    spec.seed = resolve_seed(spec.seed, seed)?;
    let cat = gen_synthetic(&spec, out)?;
    println!("wrote {}", cat.display());
    Ok(())
}

fn load_training(data: &Path, cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let ds = load_dataset(data, &cfg.data.category, cfg.data.channels)?;
    if ds.train.is_empty() {
        return Err(HdmError::param(format!("no training images under {}", data.display())));
    }
    Ok(ds.train)
}

fn write_loss_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut s = String::from(LossRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn train(data: &Path, config: &Path, out: &Path, stage: Stage, disable: &str, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let modules = Modules::disabling(disable)?;
    let train = load_training(data, &cfg)?;
    std::fs::create_dir_all(out)?;
    let mut log = Vec::new();
    let teacher = if stage == Stage::Ddm {
        let t = load_checkpoint(&out.join(TEACHER_FILE))?;
        if !t.frozen {
            return Err(HdmError::BundleMismatch("teacher checkpoint is not frozen".into()));
        }
        t
    } else {
        let t = train_teacher(&train, &cfg, &mut log)?;
        save_checkpoint(&t, &out.join(TEACHER_FILE))?;
        t
    };
    if stage == Stage::Dagm {
        std::fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    } else {
        let bundle = train_discriminator(&train, teacher, &cfg, modules, &mut log)?;
        bundle.save(out)?;
    }
    write_loss_log(&out.join("loss.csv"), &log)?;
    println!("trained {} steps into {}", log.len(), out.display());
    Ok(())
}

fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| HdmError::load(dir, e.to_string()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_pngs(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    Ok(())
}

fn infer(bundle_dir: &Path, images: &Path, out: &Path, tau: Option<f64>, s: Option<f64>) -> Result<()> {
    let bundle = Bundle::load(bundle_dir)?;
    let arch = &bundle.teacher.arch;
    let mut paths = Vec::new();
    collect_pngs(images, &mut paths)?;
    let bayes = tau.is_some() || s.is_some();
    let mut csv = String::from(if bayes { "path,image_score,p_normal,p_anomalous\n" } else { "path,image_score\n" });
    for p in &paths {
        let rel = p.strip_prefix(images).expect("walked below images");
        let img = resize(&load_image(p, arch.in_channels)?, arch.height, arch.width);
        let m = infer_anomaly_map(&img, &bundle, &mut inference_rng(&bundle.config))?;
        let target = out.join(rel);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_map(&m.map, &target)?;
        let name = rel.to_string_lossy().replace('\\', "/");
        // scores are taken from the stored precision so they equal the sidecar max
        let stored = m.map.data().iter().map(|v| f64::from(*v as f32)).fold(f64::NEG_INFINITY, f64::max);
        write!(csv, "{name},{stored:.9}").expect("string write");
        if bayes {
            let post = bayes_posterior(
                &img,
                &bundle,
                s.unwrap_or(bundle.config.ddm.s),
                tau.unwrap_or(0.0),
                &mut inference_rng(&bundle.config),
            )?;
            write!(csv, ",{:.9},{:.9}", post[0], post[1]).expect("string write");
        }
        csv.push('\n');
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("scores.csv"), csv)?;
    println!("wrote {} maps to {}", paths.len(), out.display());
    Ok(())
}

/// Key-value report lines with per-defect breakdown.
fn report_text(overall: &EvalReport, per_defect: &BTreeMap<String, EvalReport>, n: usize, pro_fpr: f64) -> String {
    let mut s = String::new();
    let mut line = |k: &str, v: f64| writeln!(s, "{k} = {v:.6}").expect("string write");
    line("overall.image_auroc", overall.image_auroc);
    line("overall.pixel_auroc", overall.pixel_auroc);
    line("overall.pro", overall.pro);
    line("overall.images", n as f64);
    line("overall.pro_fpr", pro_fpr);
    for (d, r) in per_defect {
        line(&format!("{d}.image_auroc"), r.image_auroc);
        line(&format!("{d}.pixel_auroc"), r.pixel_auroc);
        line(&format!("{d}.pro"), r.pro);
    }
    s
}

fn defect_of(id: &str) -> &str {
    id.split('/').nth(1).unwrap_or("")
}

fn eval(maps_dir: &Path, data: &Path, report: &Path, pro_fpr: f64) -> Result<()> {
    let ds = load_dataset(data, "", 1)?;
    if ds.test.is_empty() {
        return Err(HdmError::param(format!("no test images under {}", data.display())));
    }
    let mut maps = Vec::with_capacity(ds.test.len());
    for s in &ds.test {
        let rel = s.id.strip_prefix("test/").unwrap_or(&s.id);
        maps.push(read_map(&sidecar_path(&maps_dir.join(rel)))?);
    }
    let masks: Vec<Grid> = ds.test.iter().map(|s| s.mask.clone()).collect();
    let overall = evaluate(&maps, &masks, pro_fpr)?;
    let mut per_defect = BTreeMap::new();
    let defects: Vec<&str> = ds.test.iter().map(|s| defect_of(&s.id)).filter(|d| *d != "good").collect();
    for d in defects {
        if per_defect.contains_key(d) {
            continue;
        }
        let idx: Vec<usize> = (0..ds.test.len())
            .filter(|&i| matches!(defect_of(&ds.test[i].id), "good") || defect_of(&ds.test[i].id) == d)
            .collect();
        let m: Vec<Grid> = idx.iter().map(|&i| maps[i].clone()).collect();
        let k: Vec<Grid> = idx.iter().map(|&i| masks[i].clone()).collect();
        per_defect.insert(d.to_string(), evaluate(&m, &k, pro_fpr)?);
    }
    let text = report_text(&overall, &per_defect, ds.test.len(), pro_fpr);
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(report, &text)?;
    print!("{text}");
    Ok(())
}

fn ablate(data: &Path, config: &Path, disable: &str, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let ds = load_dataset(data, &cfg.data.category, cfg.data.channels)?;
    let mut configs = vec![Modules::default()];
    for entry in disable.split(',').map(str::trim).filter(|e| !e.is_empty()) {
        let m = Modules::disabling(entry)?;
        if !configs.contains(&m) {
            configs.push(m);
        }
    }
    let mut log = Vec::new();
    let teacher = train_teacher(&ds.train, &cfg, &mut log)?;
    let mut table = String::from("config,image_auroc,pixel_auroc,pro\n");
    for m in configs {
        let (_, row) = ablation_run(&ds.train, &ds.test, &cfg, m, Some(&teacher))?;
        let r = row.report;
        writeln!(table, "{m},{:.6},{:.6},{:.6}", r.image_auroc, r.pixel_auroc, r.pro).expect("string write");
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("ablation.csv"), &table)?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    print!("{table}");
    Ok(())
}

fn synth(bundle_dir: &Path, data: Option<&Path>, count: usize, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(&bundle_dir.join(CONFIG_FILE), seed)?;
    let teacher = load_checkpoint(&bundle_dir.join(TEACHER_FILE))?;
    if teacher.arch != cfg.architecture() {
        return Err(HdmError::BundleMismatch("teacher architecture differs from the config snapshot".into()));
    }
    let sched = cfg.schedule()?;
    let shape: Shape = teacher.arch.input_shape();
    let normals = match data {
        Some(d) => load_training(d, &cfg)?,
        None => Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    std::fs::create_dir_all(out)?;
    for i in 0..count {
        let syn = if normals.is_empty() {
            let plan = make_perturbation_plan(&mut rng, shape, sched.steps(), &cfg.dagm.plan)?;
            synthesize_anomaly(&teacher, &sched, shape, &plan, SynthSource::Noise, &mut rng)?
        } else {
            let src = &normals[rng.random_range(0..normals.len())];
            let img = resize(&src.image, shape.height, shape.width);
            let depth = draw_depth(&sched, cfg.dagm.depth_range, &mut rng);
            let plan = make_perturbation_plan(&mut rng, shape, depth, &cfg.dagm.plan)?;
            synthesize_anomaly(&teacher, &sched, shape, &plan, SynthSource::Image { image: &img, depth }, &mut rng)?
        };
        save_image(&syn.image, &out.join(format!("{i:03}.png")))?;
        save_image(&resize_mask(&syn.gt_mask, shape.height, shape.width), &out.join(format!("{i:03}_mask.png")))?;
    }
    println!("wrote {count} anomalies to {}", out.display());
    Ok(())
}
