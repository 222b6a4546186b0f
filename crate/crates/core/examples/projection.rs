//! Projects a LiDAR sweep into the camera and shows how little of it the
//! image covers, plus the half-open pixel convention at the image edge.

use fovguide::datagen::{gen_scene, SceneConfig};
use fovguide::geometry::{fov_mask, partition, project, project_point, Extrinsics, Intrinsics};

fn main() -> fovguide::Result<()> {
    let frame = gen_scene(7, &SceneConfig::default())?;
    let corr = project(&frame.cloud, &frame.cam);
    let (inside, outside) = partition(&corr);
    println!(
        "{} of {} points ({:.1}%) have a pixel in the {}×{} image",
        inside.len(),
        frame.len(),
        100.0 * inside.len() as f64 / frame.len() as f64,
        corr.width,
        corr.height
    );
    let mask = fov_mask(&frame.cloud, &frame.cam.intrinsics, &frame.cam.extrinsics);
    assert_eq!(mask.iter().filter(|&&m| m).count(), inside.len());

    let mut agree = 0;
    for &i in &inside {
        let px = corr.matches[i].pixel_index(frame.image.width).expect("in view");
        agree += usize::from(frame.image.classes[px] == frame.labels[i]);
    }
    println!(
        "image class matches point label for {:.1}% of in-view points",
        100.0 * agree as f64 / inside.len() as f64
    );
    println!("{} points rely on the 3D branch alone", outside.len());

    // A 4×2 camera at the origin looking along +z with unit focal length
    // and the principal point at the image centre.
    let k = [[1.0, 0.0, 2.0], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]];
    let intr = Intrinsics::new(k, 4, 2)?;
    let extr = Extrinsics::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3])?;
    for p in [
        [-2.0, -1.0, 1.0],
        [1.999, 0.999, 1.0],
        [2.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ] {
        let m = project_point(&p, &intr, &extr);
        println!("point {p:?} -> valid {} at column {} row {}", m.valid, m.k, m.l);
    }
    Ok(())
}
