//! Field-of-view mixing: graft frame A's image and its in-view points into
//! frame B, evicting B's points from the camera sector.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::Frame;
use crate::error::{Error, Result};
use crate::geometry::{fov_mask, yaw_rotation, PointCloud};

/// Which input frame a mixed point came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    /// Mixed cloud with A's image and camera.
    pub frame: Frame,
    pub provenance: Vec<Provenance>,
    /// Indices of the kept A-points, i.e. the in-image set of the sample.
    pub in_image: Vec<usize>,
}

impl MixedSample {
    /// True when no A-point survived, which leaves nothing to distil.
    pub fn starved(&self) -> bool {
        self.in_image.is_empty()
    }
}

/// Keeps A-points inside A's image, then appends B-points that fall outside
/// the same sector seen from B's pose (intrinsics of A, extrinsics of B).
pub fn fovmix(a: &Frame, b: &Frame) -> Result<MixedSample> {
    if a.num_classes != b.num_classes {
        return Err(Error::InvalidInput(format!(
            "class vocabularies differ ({} vs {})",
            a.num_classes, b.num_classes
        )));
    }
    let k_a = &a.cam.intrinsics;
    let keep_a = fov_mask(&a.cloud, k_a, &a.cam.extrinsics);
    let evict_b = fov_mask(&b.cloud, k_a, &b.cam.extrinsics);

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut weak_mask = Vec::new();
    let mut provenance = Vec::new();
    for (i, _) in keep_a.iter().enumerate().filter(|(_, &m)| m) {
        points.push(a.cloud.points[i]);
        labels.push(a.labels[i]);
        weak_mask.push(a.weak_mask[i]);
        provenance.push(Provenance::A);
    }
    let in_image = (0..points.len()).collect();
    for (i, _) in evict_b.iter().enumerate().filter(|(_, &m)| !m) {
        points.push(b.cloud.points[i]);
        labels.push(b.labels[i]);
        weak_mask.push(b.weak_mask[i]);
        provenance.push(Provenance::B);
    }
    let frame = Frame {
        cloud: PointCloud::new(points),
        cam: a.cam.clone(),
        image: a.image.clone(),
        num_classes: a.num_classes,
        labels,
        weak_mask,
        frame_labeled: a.frame_labeled || b.frame_labeled,
    };
    Ok(MixedSample {
        frame,
        provenance,
        in_image,
    })
}

/// Rotates the cloud by `yaw` about the vertical axis and adjusts the
/// extrinsics so every point keeps its pixel.
pub fn rotate_frame(frame: &Frame, yaw: f64) -> Frame {
    let rot = yaw_rotation(yaw);
    let mut out = frame.clone();
    out.cloud = frame.cloud.rotated(&rot);
    out.cam.extrinsics = frame.cam.extrinsics.after_rotating_cloud(&rot);
    out
}

/// One mixed slot of a batch and the frames it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMix {
    pub a: usize,
    pub b: usize,
    pub sample: MixedSample,
}

/// Mixes every slot of a batch with a random partner.
///
/// Each frame is first turned by an independent yaw drawn from
/// `[-max_yaw, max_yaw]`. Slot `j` then draws its A-frame (a labeled frame
/// when `semi` is set) and a B-frame different from A when the batch allows.
pub fn fovmix_batch(batch: &[Frame], semi: bool, max_yaw: f64, seed: u64) -> Result<Vec<BatchMix>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotated: Vec<Frame> = batch
        .iter()
        .map(|f| {
            let yaw = if max_yaw > 0.0 {
                rng.random_range(-max_yaw..=max_yaw)
            } else {
                0.0
            };
            rotate_frame(f, yaw)
        })
        .collect();
    let candidates: Vec<usize> = if semi {
        (0..batch.len()).filter(|&i| batch[i].frame_labeled).collect()
    } else {
        (0..batch.len()).collect()
    };
    if candidates.is_empty() {
        return Err(Error::InvalidInput(
            "semi-supervised mixing needs at least one labeled frame".into(),
        ));
    }
    let mut out = Vec::with_capacity(batch.len());
    for _ in 0..batch.len() {
        let ai = *candidates.choose(&mut rng).expect("non-empty");
        let bi = if batch.len() > 1 {
            let r = rng.random_range(0..batch.len() - 1);
            if r >= ai {
                r + 1
            } else {
                r
            }
        } else {
            ai
        };
        out.push(BatchMix {
            a: ai,
            b: bi,
            sample: fovmix(&rotated[ai], &rotated[bi])?,
        });
    }
    Ok(out)
}
