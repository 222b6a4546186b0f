use proptest::prelude::*;

use fovguide::geometry::{yaw_rotation, PointCloud};
use fovguide::metrics::{border_split, confusion_and_miou, range_split, Confusion, Evaluator, BORDER_NEIGHBORS};

fn labels(n: usize, c: u16) -> impl Strategy<Value = Vec<u16>> {
    prop::collection::vec(0..c, n)
}

/// Brute-force IoU from the raw vectors, no confusion matrix involved.
fn iou_direct(pred: &[u16], truth: &[u16], k: u16) -> Option<f64> {
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p == k && **t == k).count();
    let union = pred.iter().zip(truth).filter(|(p, t)| **p == k || **t == k).count();
    (union > 0).then(|| tp as f64 / union as f64)
}

/// Border flags from a full sort of all pairwise distances.
fn border_direct(pts: &[[f64; 3]], labels: &[u16]) -> Vec<bool> {
    (0..pts.len())
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| ((0..3).map(|a| (pts[i][a] - pts[j][a]).powi(2)).sum(), j))
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            d[..BORDER_NEIGHBORS].iter().any(|&(_, j)| labels[j] != labels[i])
        })
        .collect()
}

fn cloud_strategy() -> impl Strategy<Value = (Vec<[f64; 3]>, Vec<u16>)> {
    (BORDER_NEIGHBORS + 1..60).prop_flat_map(|n| {
        (
            prop::collection::vec(
                (-50.0f64..50.0, -50.0f64..50.0, -2.0f64..4.0).prop_map(|(x, y, z)| [x, y, z]),
                n,
            ),
            labels(n, 3),
        )
    })
}

proptest! {
    #[test]
    fn miou_matches_direct_count((pred, truth) in (1usize..80).prop_flat_map(|n| (labels(n, 5), labels(n, 5)))) {
        let (conf, miou) = confusion_and_miou(&pred, &truth, 5).unwrap();
        let direct: Vec<f64> = (0..5).filter_map(|k| iou_direct(&pred, &truth, k)).collect();
        prop_assert!((miou - direct.iter().sum::<f64>() / direct.len() as f64).abs() < 1e-12);
        for (k, v) in conf.per_class_iou().iter().enumerate() {
            prop_assert_eq!(*v, iou_direct(&pred, &truth, k as u16));
        }
        prop_assert!((0.0..=1.0).contains(&miou));
        let total: u64 = conf.counts.iter().flatten().sum();
        prop_assert_eq!(total as usize, pred.len());
    }

    #[test]
    fn merging_equals_accumulating((a, b) in (1usize..40).prop_flat_map(|n| (labels(2 * n, 4), labels(2 * n, 4)))) {
        let half = a.len() / 2;
        let mut one = Confusion::new(4);
        one.add(&a, &b).unwrap();
        let mut x = Confusion::new(4);
        x.add(&a[..half], &b[..half]).unwrap();
        let mut y = Confusion::new(4);
        y.add(&a[half..], &b[half..]).unwrap();
        x.merge(&y);
        prop_assert_eq!(one, x);
    }

    #[test]
    fn perfect_prediction_scores_one(truth in labels(30, 4)) {
        let (_, miou) = confusion_and_miou(&truth, &truth, 4).unwrap();
        prop_assert_eq!(miou, 1.0);
    }

    #[test]
    fn border_flags_match_full_sort((pts, lab) in cloud_strategy()) {
        let got = border_split(&PointCloud::new(pts.clone()), &lab).unwrap();
        prop_assert_eq!(got, border_direct(&pts, &lab));
    }

    #[test]
    fn border_flags_survive_rigid_motion((pts, lab) in cloud_strategy(), yaw in -3.2f64..3.2, shift in -5.0f64..5.0) {
        let cloud = PointCloud::new(pts);
        let moved = PointCloud::new(
            cloud.rotated(&yaw_rotation(yaw)).points.iter().map(|p| [p[0] + shift, p[1] - shift, p[2]]).collect(),
        );
        prop_assert_eq!(border_split(&cloud, &lab).unwrap(), border_split(&moved, &lab).unwrap());
    }

    #[test]
    fn splits_partition_the_points((pts, truth) in cloud_strategy(), seed in any::<u64>()) {
        let n = pts.len();
        let pred: Vec<u16> = (0..n).map(|i| ((seed >> (i % 60)) & 1) as u16 + truth[i] % 2).collect();
        let cloud = PointCloud::new(pts);
        let mut ev = Evaluator::new(3, vec![false, true, false]);
        ev.add_frame(&cloud, &pred, &truth).unwrap();
        let rep = ev.finish(Some(0.5));
        let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64;
        let border = border_split(&cloud, &truth).unwrap();
        let near = range_split(&cloud);
        let nb = border.iter().filter(|&&b| b).count() as u64;
        let nn = near.iter().filter(|&&b| b).count() as u64;
        prop_assert_eq!(rep.border_points, nb);
        prop_assert_eq!(rep.near_points, nn);
        // Weighted subset accuracies recombine into the overall accuracy.
        let recombine = |a: Option<f64>, na: u64, b: Option<f64>, nb: u64| {
            a.unwrap_or(0.0) * na as f64 + b.unwrap_or(0.0) * nb as f64
        };
        prop_assert!((recombine(rep.border_acc, nb, rep.non_border_acc, n as u64 - nb) - correct).abs() < 1e-9);
        prop_assert!((recombine(rep.near_acc, nn, rep.far_acc, n as u64 - nn) - correct).abs() < 1e-9);
        prop_assert!((rep.accuracy.unwrap() * n as f64 - correct).abs() < 1e-9);
        prop_assert_eq!(rep.rel_miou, Some(rep.miou / 0.5));
    }
}

#[test]
fn absent_classes_are_skipped_in_the_mean() {
    let (conf, miou) = confusion_and_miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 4).unwrap();
    assert_eq!(conf.per_class_iou(), vec![Some(0.5), Some(2.0 / 3.0), None, None]);
    assert!((miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
}

#[test]
fn malformed_inputs_are_rejected() {
    assert!(confusion_and_miou(&[0, 1], &[0], 2).is_err());
    assert!(confusion_and_miou(&[0, 2], &[0, 1], 2).is_err());
    let small = PointCloud::new(vec![[0.0; 3]; BORDER_NEIGHBORS]);
    assert!(border_split(&small, &[0; BORDER_NEIGHBORS]).is_err());
    let cloud = PointCloud::new((0..20).map(|i| [i as f64, 0.0, 0.0]).collect());
    let mut ev = Evaluator::new(2, vec![false, false]);
    assert!(ev
        .add_frame_with_border(&cloud, &[0; 20], &[0; 20], &[false; 19])
        .is_err());
}
