//! Trains one student with every component switched on, prints its
//! evaluation report and writes a bird's-eye comparison image.
//!
//! Usage: `cargo run --release --example train_and_evaluate [steps]`

use fovguide::datagen::SceneConfig;
use fovguide::ig2d::train_guide;
use fovguide::metrics::bev_ppm;
use fovguide::pipeline::{evaluate, generate_dataset, train_student, RunConfig, Toggles};

fn main() -> fovguide::Result<()> {
    let mut cfg = RunConfig {
        toggles: Toggles::FULL,
        ..RunConfig::default()
    };
    if let Some(steps) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.steps = steps;
    }
    let data = generate_dataset(&cfg, &SceneConfig::default())?;
    let guide = train_guide(&data.source, &data.train, data.num_classes(), &cfg.guide_config())?;
    println!("guide trained ({} steps)", cfg.guide_steps);

    let ckpt = train_student(&cfg, &data, Some(&guide.model))?;
    for (i, b) in ckpt
        .history
        .iter()
        .enumerate()
        .filter(|(i, _)| i % (cfg.steps / 8).max(1) == 0)
    {
        println!(
            "step {i:>5}: total {:.4}  ce {:.4}  mt {:.4}  ig {:.4}  cl {:.4}",
            b.total, b.supervised, b.consistency, b.image_guidance, b.contrastive
        );
    }
    let report = evaluate(&ckpt, &data, None)?;
    print!("{}", report.to_table());

    let frame = &data.eval[0];
    let pred = ckpt.predict(&frame.cloud)?;
    let path = std::env::temp_dir().join("fovguide-bev.ppm");
    std::fs::write(&path, bev_ppm(&frame.cloud, &pred, &frame.labels, 256, 40.0))?;
    println!("truth | prediction written to {}", path.display());
    Ok(())
}
