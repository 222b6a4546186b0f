//! Trains the 2D guide with and without target adaptation and compares
//! target-domain pixel accuracy.

use std::time::Instant;

use fovguide::datagen::{gen_scene, scribble_sim, Domain, SceneConfig};
use fovguide::ig2d::{pixel_accuracy, train_guide, GuideConfig, GuideMode};

fn main() -> fovguide::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let cfg = SceneConfig::default();
    let c = cfg.num_classes();
    for seed in 0..seeds {
        let base = 1000 * seed;
        let source: Vec<_> = (0..20)
            .map(|i| gen_scene(base + 500 + i, &cfg.clone().with_domain(Domain::Source)))
            .collect::<Result<_, _>>()?;
        let target: Vec<_> = (0..20)
            .map(|i| Ok(scribble_sim(&gen_scene(base + i, &cfg)?, 0.08, base + i)?.0))
            .collect::<fovguide::Result<_>>()?;
        let held_out: Vec<_> = (0..10)
            .map(|i| gen_scene(base + 900 + i, &cfg))
            .collect::<Result<_, _>>()?;
        let mut row = Vec::new();
        for mode in [GuideMode::SourceOnly, GuideMode::Adapt] {
            let t = Instant::now();
            let g = train_guide(
                &source,
                &target,
                c,
                &GuideConfig {
                    seed,
                    mode,
                    ..GuideConfig::default()
                },
            )?;
            let src_acc = pixel_accuracy(&g.model, &source)?;
            let acc = pixel_accuracy(&g.model, &held_out)?;
            row.push(format!(
                "{mode:?}: source {src_acc:.3} target {acc:.3} ({:.1}s)",
                t.elapsed().as_secs_f64()
            ));
        }
        println!("seed {seed}: {}", row.join(" | "));
    }
    Ok(())
}
