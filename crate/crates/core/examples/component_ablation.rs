//! Trains every component combination over a few seeds and prints the
//! mIoU table and the border / size / range breakdown.
//!
//! Usage: `cargo run --release --example component_ablation [seeds] [key=value ...]`

use fovguide::datagen::SceneConfig;
use fovguide::ig2d::train_guide;
use fovguide::pipeline::{generate_dataset, run_ablation, RunConfig, Toggles};

fn main() -> fovguide::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut cfg = RunConfig::default();
    for kv in args {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| fovguide::Error::Config(format!("expected key=value, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;

    let data = generate_dataset(&cfg, &SceneConfig::default())?;
    let guide = train_guide(&data.source, &data.train, data.num_classes(), &cfg.guide_config())?;
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
    let report = run_ablation(
        &cfg,
        &data,
        Some(&guide.model),
        &Toggles::ablation_rows(),
        &seeds,
        |row, seed, r| eprintln!("{row:<18} seed {seed}: mIoU {:.4}", r.miou),
    )?;
    println!("{}", report.to_table());
    println!("{}", report.to_split_table());
    Ok(())
}
