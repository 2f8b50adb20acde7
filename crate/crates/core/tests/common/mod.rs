//! Independent reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use crowddet::geometry::{Box2D, Box3D, CameraIntrinsics};
use crowddet::metrics::{Detection2D, GroundTruth2D};
use rand::Rng;

/// IoU from first principles.
pub fn iou_oracle(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let area = |r: &Box2D| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Counts index triples whose three pairwise IoUs all reach `thresh`.
pub fn triplets_oracle(boxes: &[Box2D], thresh: f64) -> u64 {
    let n = boxes.len();
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if iou_oracle(&boxes[i], &boxes[j]) >= thresh
                    && iou_oracle(&boxes[i], &boxes[k]) >= thresh
                    && iou_oracle(&boxes[j], &boxes[k]) >= thresh
                {
                    count += 1;
                }
            }
        }
    }
    count
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleOutcome {
    Tp(usize),
    Fp,
    Ignored,
}

/// Greedy matching by repeated selection: the highest-scoring unprocessed detection
/// (lowest index on ties) takes the unmatched non-ignored gt with the highest IoU
/// (lowest index on ties), else any ignore gt with IoU at or above the threshold.
/// Returns per-detection outcomes (input order) and the processing order.
pub fn match_oracle(dets: &[Detection2D], gts: &[GroundTruth2D], thresh: f64) -> (Vec<OracleOutcome>, Vec<usize>) {
    let mut done = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    let mut out = vec![OracleOutcome::Fp; dets.len()];
    let mut order = Vec::new();
    for _ in 0..dets.len() {
        let mut pick: Option<usize> = None;
        for i in 0..dets.len() {
            if done[i] {
                continue;
            }
            if pick.is_none() || dets[i].score > dets[pick.unwrap()].score {
                pick = Some(i);
            }
        }
        let i = pick.unwrap();
        done[i] = true;
        order.push(i);
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.ignore || taken[g] || gt.image_id != dets[i].image_id {
                continue;
            }
            let iou = iou_oracle(&dets[i].bbox, &gt.bbox);
            if iou >= thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[i] = OracleOutcome::Tp(g);
        } else if gts
            .iter()
            .any(|gt| gt.ignore && gt.image_id == dets[i].image_id && iou_oracle(&dets[i].bbox, &gt.bbox) >= thresh)
        {
            out[i] = OracleOutcome::Ignored;
        }
    }
    (out, order)
}

/// Area under the PR curve with precision replaced by its running maximum from the
/// right, integrated over recall increments, by direct double loop.
pub fn ap_oracle(flags: &[bool], n_gt: usize) -> f64 {
    let n = flags.len();
    let mut tp = vec![0usize; n];
    let mut acc = 0;
    for k in 0..n {
        acc += flags[k] as usize;
        tp[k] = acc;
    }
    let recall = |k: usize| tp[k] as f64 / n_gt as f64;
    let precision = |k: usize| tp[k] as f64 / (k + 1) as f64;
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..n {
        if !flags[k] {
            continue;
        }
        let mut best = 0.0f64;
        for j in k..n {
            best = best.max(precision(j));
        }
        ap += (recall(k) - prev) * best;
        prev = recall(k);
    }
    ap
}

/// Log-average miss rate by sweeping every distinct score threshold.
pub fn mr2_oracle(ranked: &[(f64, bool)], n_gt: usize, n_images: usize) -> f64 {
    let mut thresholds: Vec<f64> = ranked.iter().map(|r| r.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    // (fppi, miss) for "nothing admitted" and each threshold
    let mut points = vec![(0.0, 1.0)];
    for t in thresholds {
        let tp = ranked.iter().filter(|r| r.0 >= t && r.1).count();
        let fp = ranked.iter().filter(|r| r.0 >= t && !r.1).count();
        points.push((fp as f64 / n_images as f64, 1.0 - tp as f64 / n_gt as f64));
    }
    let mut log_sum = 0.0;
    for i in 0..9 {
        let r = 10f64.powf(-2.0 + 0.25 * i as f64);
        let miss = points
            .iter()
            .filter(|p| p.0 <= r)
            .map(|p| p.1)
            .fold(1.0f64, f64::min);
        log_sum += miss.max(1e-10).ln();
    }
    (log_sum / 9.0).exp()
}

/// A box on a coarse integer grid so that overlaps and exact duplicates are common.
pub fn grid_box<R: Rng>(rng: &mut R) -> Box2D {
    let x = rng.gen_range(0..6) as f64;
    let y = rng.gen_range(0..6) as f64;
    let w = rng.gen_range(1..5) as f64;
    let h = rng.gen_range(1..5) as f64;
    Box2D::new(x, y, x + w, y + h).unwrap()
}

/// Random instance with at most 5 detections and 5 gts over two images; scores are
/// drawn from a small set so ties occur.
pub fn random_instance<R: Rng>(rng: &mut R) -> (Vec<Detection2D>, Vec<GroundTruth2D>) {
    let images = ["a", "b"];
    let n_det = rng.gen_range(0..=5);
    let n_gt = rng.gen_range(0..=5);
    let dets = (0..n_det)
        .map(|_| Detection2D {
            image_id: images[rng.gen_range(0..2)].to_string(),
            bbox: grid_box(rng),
            score: rng.gen_range(1..=4) as f64 / 4.0,
        })
        .collect();
    let gts = (0..n_gt)
        .map(|_| GroundTruth2D {
            image_id: images[rng.gen_range(0..2)].to_string(),
            bbox: grid_box(rng),
            ignore: rng.gen_bool(0.15),
        })
        .collect();
    (dets, gts)
}

pub fn camera() -> CameraIntrinsics {
    CameraIntrinsics::new(1000.0, 1000.0, 640.0, 360.0, 1280, 720).unwrap()
}

/// Ten pedestrians in front of [`camera`]; indices 7, 8 and 9 are out of view
/// (behind the camera, far left, below the image).
pub fn crafted_scene() -> Vec<Box3D> {
    let dims = [0.6, 1.7, 0.5];
    let centers = [
        [0.0, 0.5, 8.0],
        [1.0, 0.5, 10.0],
        [-1.5, 0.4, 12.0],
        [2.5, 0.6, 15.0],
        [-3.0, 0.5, 9.0],
        [0.5, 0.3, 20.0],
        [4.0, 0.8, 25.0],
        [0.0, 0.5, -6.0],
        [-20.0, 0.5, 10.0],
        [0.0, 10.0, 10.0],
    ];
    centers
        .iter()
        .enumerate()
        .map(|(i, &c)| Box3D::new(c, dims, 0.1 * i as f64, (i % 3) as u8).unwrap())
        .collect()
}
