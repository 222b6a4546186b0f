//! Generates a few target-domain frames, applies scribble and
//! semi-supervised labeling, and round-trips them through the frame format.

use fovguide::datagen::{
    gen_scene, read_frame_file, scribble_sim, semi_supervise, write_frame_file, Domain, SceneConfig,
};
use fovguide::geometry::{partition, project};

fn main() -> fovguide::Result<()> {
    let cfg = SceneConfig::default();
    let dir = std::env::temp_dir().join("fovguide-scenes");
    std::fs::create_dir_all(&dir)?;

    let mut frames = Vec::new();
    for seed in 0..4 {
        let frame = gen_scene(seed, &cfg)?;
        let mut counts = vec![0usize; cfg.num_classes()];
        for &l in &frame.labels {
            counts[l as usize] += 1;
        }
        let (inside, outside) = partition(&project(&frame.cloud, &frame.cam));
        let (weak, outcome) = scribble_sim(&frame, 0.08, seed)?;
        println!(
            "frame {seed}: {} points, class counts {counts:?}, {} in view / {} out, {} scribbled ({:.2}%)",
            frame.len(),
            inside.len(),
            outside.len(),
            outcome.labeled,
            100.0 * outcome.attained_fraction
        );

        let path = dir.join(format!("{seed:05}.fdf"));
        write_frame_file(&path, &weak)?;
        assert_eq!(read_frame_file(&path)?, weak);
        frames.push(frame);
    }

    semi_supervise(&mut frames, 0.5)?;
    let flags: Vec<bool> = frames.iter().map(|f| f.frame_labeled).collect();
    println!("semi-supervised split at rate 0.5: {flags:?}");

    let source = gen_scene(0, &cfg.clone().with_domain(Domain::Source))?;
    let mean = |raw: &[f64]| raw.iter().sum::<f64>() / raw.len() as f64;
    println!(
        "mean pixel value, target {:.3} vs source {:.3}",
        mean(&frames[0].image.raw),
        mean(&source.image.raw)
    );
    println!("frames written to {}", dir.display());
    Ok(())
}
