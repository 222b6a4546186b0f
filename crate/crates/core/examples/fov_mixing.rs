//! Mixes frames so that image-covered points from one sweep land in a
//! different surrounding scene.

use fovguide::datagen::{gen_scene, semi_supervise, SceneConfig};
use fovguide::fovmix::{fovmix, fovmix_batch, Provenance};
use fovguide::geometry::fov_mask;

fn main() -> fovguide::Result<()> {
    let cfg = SceneConfig::default();
    let frames: Vec<_> = (0..4).map(|s| gen_scene(s, &cfg)).collect::<Result<_, _>>()?;

    let m = fovmix(&frames[0], &frames[1])?;
    let from_a = m.provenance.iter().filter(|&&p| p == Provenance::A).count();
    println!(
        "A has {} points, B has {}; the mix keeps {from_a} from A and {} from B",
        frames[0].len(),
        frames[1].len(),
        m.frame.len() - from_a
    );
    let in_view = fov_mask(&m.frame.cloud, &m.frame.cam.intrinsics, &m.frame.cam.extrinsics);
    let b_in_view = in_view
        .iter()
        .zip(&m.provenance)
        .filter(|(&v, &p)| v && p == Provenance::B)
        .count();
    println!("B points visible in A's image after mixing: {b_in_view}");

    let selfmix = fovmix(&frames[2], &frames[2])?;
    println!("self-mix keeps {} of {} points", selfmix.frame.len(), frames[2].len());

    let mut semi = frames.clone();
    semi_supervise(&mut semi, 0.25)?;
    for mix in fovmix_batch(&semi, true, std::f64::consts::PI, 11)? {
        println!(
            "slot: A = frame {} (labeled {}), B = frame {}, {} in-image points",
            mix.a,
            semi[mix.a].frame_labeled,
            mix.b,
            mix.sample.in_image.len()
        );
    }
    Ok(())
}
