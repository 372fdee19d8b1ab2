//! Trains on a freshly generated synthetic dataset and prints the metrics.
//!
//! cargo run --release --example benchmark -- configs/benchmark.toml

use std::time::Instant;

use hdm::config::TrainConfig;
use hdm::data_io::{gen_synthetic, load_dataset};
use hdm::pipeline::{ablation_run, train_teacher, Modules};

fn main() -> hdm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args.first().map(String::as_str).unwrap_or("configs/benchmark.toml");
    let cfg = TrainConfig::load(path.as_ref())?;
    let dir = std::env::temp_dir().join(format!("hdm-benchmark-{}", std::process::id()));
    let cat = gen_synthetic(&cfg.dataset, &dir)?;
    let data = load_dataset(&cat, "", cfg.data.channels)?;

    let start = Instant::now();
    let mut log = Vec::new();
    let teacher = train_teacher(&data.train, &cfg, &mut log)?;
    println!("teacher: {:.1}s, final mse {:.4}", start.elapsed().as_secs_f64(), log.last().and_then(|r| r.mse).unwrap_or(f64::NAN));

    let mut configs = vec![Modules::default()];
    for spec in args.iter().skip(1) {
        configs.push(Modules::disabling(spec)?);
    }
    for m in configs {
        let t = Instant::now();
        let (_, row) = ablation_run(&data.train, &data.test, &cfg, m, Some(&teacher))?;
        let r = row.report;
        println!(
            "{:<10} image {:.4}  pixel {:.4}  pro {:.4}  ({:.1}s)",
            m.to_string(),
            r.image_auroc,
            r.pixel_auroc,
            r.pro,
            t.elapsed().as_secs_f64()
        );
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
