//! Detection metrics: greedy matching, AP, log-average miss rate, center-distance
//! mAP, occlusion-stratified recall and class-agnostic NMS.
//!
//! Detections are always ranked by descending score with ties broken by input order.
//! Per-image matching runs on the current rayon pool; aggregation only uses counts
//! and the global ranking, so results do not depend on the schedule.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou2d, Box2D, Box3D};

pub const DEFAULT_IOU_THRESH: f64 = 0.5;
pub const DEFAULT_DISTANCE_THRESHOLDS: [f64; 3] = [0.25, 0.5, 1.0];
pub const MISS_RATE_FLOOR: f64 = 1e-10;
pub const NUSCENES_MIN_RECALL: f64 = 0.1;
pub const NUSCENES_MIN_PRECISION: f64 = 0.1;
/// Number of occlusion levels (0 = none).
pub const OCCLUSION_LEVELS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no (non-ignored) ground truths: metric is undefined")]
    NoGroundTruth,
    #[error("no images to evaluate")]
    NoImages,
    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),
    #[error("detection {index} has non-finite score {score}")]
    NonFiniteScore { index: usize, score: f64 },
    #[error("ground truth {index} has occlusion label {label}, expected 0, 1 or 2")]
    OcclusionLabel { index: usize, label: u8 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection<B> {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: B,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth<B> {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: B,
    #[serde(default)]
    pub ignore: bool,
}

pub type Detection2D = Detection<Box2D>;
pub type Detection3D = Detection<Box3D>;
pub type GroundTruth2D = GroundTruth<Box2D>;
pub type GroundTruth3D = GroundTruth<Box3D>;

impl<B> Detection<B> {
    pub fn new(image_id: impl Into<String>, bbox: B, score: f64) -> Self {
        Detection {
            image_id: image_id.into(),
            bbox,
            score,
        }
    }
}

impl<B> GroundTruth<B> {
    pub fn new(image_id: impl Into<String>, bbox: B) -> Self {
        GroundTruth {
            image_id: image_id.into(),
            bbox,
            ignore: false,
        }
    }

    pub fn ignored(image_id: impl Into<String>, bbox: B) -> Self {
        GroundTruth {
            image_id: image_id.into(),
            bbox,
            ignore: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchCriterion {
    /// IoU at or above the threshold.
    Iou(f64),
    /// Euclidean 3D center distance at or below the threshold (meters).
    CenterDistance(f64),
}

/// A box type that can be matched under some criterion.
pub trait Matchable {
    /// Match quality (higher is better) when `self` meets the criterion against `gt`.
    fn match_quality(&self, gt: &Self, criterion: MatchCriterion) -> Option<f64>;
}

impl Matchable for Box2D {
    fn match_quality(&self, gt: &Self, criterion: MatchCriterion) -> Option<f64> {
        match criterion {
            MatchCriterion::Iou(t) => {
                let iou = iou2d(self, gt);
                (iou >= t).then_some(iou)
            }
            MatchCriterion::CenterDistance(d) => {
                let (ax, ay) = self.center();
                let (bx, by) = gt.center();
                let dist = (ax - bx).hypot(ay - by);
                (dist <= d).then_some(-dist)
            }
        }
    }
}

impl Matchable for Box3D {
    fn match_quality(&self, gt: &Self, criterion: MatchCriterion) -> Option<f64> {
        match criterion {
            MatchCriterion::CenterDistance(d) => {
                let dist = self.center_distance(gt);
                (dist <= d).then_some(-dist)
            }
            MatchCriterion::Iou(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchOutcome {
    TruePositive { gt: usize },
    FalsePositive,
    /// Matched an ignore-flagged ground truth: neither TP nor FP.
    Ignored { gt: usize },
}

impl MatchOutcome {
    pub fn is_tp(&self) -> bool {
        matches!(self, MatchOutcome::TruePositive { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Detection indices in ranking order.
    pub order: Vec<usize>,
    /// Outcome per detection, indexed like the input.
    pub outcomes: Vec<MatchOutcome>,
    /// Whether each ground truth was claimed by a detection.
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_tp()).count()
    }

    pub fn fp(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o, MatchOutcome::FalsePositive))
            .count()
    }

    /// Outcomes in ranking order.
    pub fn ranked(&self) -> impl Iterator<Item = MatchOutcome> + '_ {
        self.order.iter().map(|&i| self.outcomes[i])
    }
}

/// Indices sorted by descending score, ties kept in input order.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn check_scores<B>(dets: &[Detection<B>]) -> Result<(), MetricsError> {
    for (index, d) in dets.iter().enumerate() {
        if !d.score.is_finite() {
            return Err(MetricsError::NonFiniteScore { index, score: d.score });
        }
    }
    Ok(())
}

/// Greedy one-to-one matching within a single image.
///
/// Each detection, in ranking order, claims the best unmatched non-ignored ground
/// truth meeting the criterion (first index on equal quality). Failing that, a
/// detection meeting the criterion against an ignore-flagged ground truth is marked
/// [`MatchOutcome::Ignored`]; ignore regions may absorb any number of detections.
pub fn match_greedy<B: Matchable>(
    dets: &[Detection<B>],
    gts: &[GroundTruth<B>],
    criterion: MatchCriterion,
) -> MatchResult {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = rank_by_score(&scores);
    let mut outcomes = vec![MatchOutcome::FalsePositive; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for &di in &order {
        let det = &dets[di].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.ignore || gt_matched[gi] {
                continue;
            }
            if let Some(q) = det.match_quality(&gt.bbox, criterion) {
                if best.is_none_or(|(_, bq)| q > bq) {
                    best = Some((gi, q));
                }
            }
        }
        if let Some((gi, _)) = best {
            gt_matched[gi] = true;
            outcomes[di] = MatchOutcome::TruePositive { gt: gi };
            continue;
        }
        let mut best_ignore: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if !gt.ignore {
                continue;
            }
            if let Some(q) = det.match_quality(&gt.bbox, criterion) {
                if best_ignore.is_none_or(|(_, bq)| q > bq) {
                    best_ignore = Some((gi, q));
                }
            }
        }
        if let Some((gi, _)) = best_ignore {
            gt_matched[gi] = true;
            outcomes[di] = MatchOutcome::Ignored { gt: gi };
        }
    }
    MatchResult {
        order,
        outcomes,
        gt_matched,
    }
}

/// Dataset-level matching outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMatch {
    /// `(score, is_tp)` for every non-ignored detection, in global ranking order.
    pub ranked: Vec<(f64, bool)>,
    /// Non-ignored ground truths.
    pub n_gt: usize,
    pub n_images: usize,
    /// Per ground truth (input order), whether it was claimed.
    pub gt_matched: Vec<bool>,
}

impl DatasetMatch {
    pub fn flags(&self) -> Vec<bool> {
        self.ranked.iter().map(|&(_, tp)| tp).collect()
    }

    pub fn tp(&self) -> usize {
        self.ranked.iter().filter(|(_, tp)| *tp).count()
    }

    pub fn fp(&self) -> usize {
        self.ranked.len() - self.tp()
    }
}

/// Matches every image independently and merges the results.
///
/// Images are the union of image ids found in detections and ground truths.
pub fn match_dataset<B: Matchable + Sync>(
    dets: &[Detection<B>],
    gts: &[GroundTruth<B>],
    criterion: MatchCriterion,
) -> Result<DatasetMatch, MetricsError> {
    check_scores(dets)?;
    let mut images: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        images.entry(d.image_id.as_str()).or_default().0.push(i);
    }
    for (i, g) in gts.iter().enumerate() {
        images.entry(g.image_id.as_str()).or_default().1.push(i);
    }
    let groups: Vec<(Vec<usize>, Vec<usize>)> = images.into_values().collect();
    let per_image: Vec<(Vec<(usize, MatchOutcome)>, Vec<(usize, bool)>)> = groups
        .par_iter()
        .map(|(di, gi)| {
            let d: Vec<Detection<&B>> = di
                .iter()
                .map(|&i| Detection {
                    image_id: String::new(),
                    bbox: &dets[i].bbox,
                    score: dets[i].score,
                })
                .collect();
            let g: Vec<GroundTruth<&B>> = gi
                .iter()
                .map(|&i| GroundTruth {
                    image_id: String::new(),
                    bbox: &gts[i].bbox,
                    ignore: gts[i].ignore,
                })
                .collect();
            let m = match_greedy(&d, &g, criterion);
            let det_out = di.iter().zip(&m.outcomes).map(|(&i, &o)| (i, o)).collect();
            let gt_out = gi.iter().zip(&m.gt_matched).map(|(&i, &b)| (i, b)).collect();
            (det_out, gt_out)
        })
        .collect();
    let n_images = per_image.len();
    let mut outcomes = vec![MatchOutcome::FalsePositive; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for (det_out, gt_out) in per_image {
        for (i, o) in det_out {
            outcomes[i] = o;
        }
        for (i, b) in gt_out {
            gt_matched[i] = b;
        }
    }
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let ranked = rank_by_score(&scores)
        .into_iter()
        .filter_map(|i| match outcomes[i] {
            MatchOutcome::Ignored { .. } => None,
            o => Some((scores[i], o.is_tp())),
        })
        .collect();
    Ok(DatasetMatch {
        ranked,
        n_gt: gts.iter().filter(|g| !g.ignore).count(),
        n_images,
        gt_matched,
    })
}

impl<B: Matchable> Matchable for &B {
    fn match_quality(&self, gt: &Self, criterion: MatchCriterion) -> Option<f64> {
        (*self).match_quality(*gt, criterion)
    }
}

/// All-point interpolated AP: `sum over ranks k of (r_k - r_{k-1}) * max_{j >= k} p_j`.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Result<f64, MetricsError> {
    if n_gt == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    let n = flags.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..n.saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        ap += (recall[k] - prev_recall) * precision[k];
        prev_recall = recall[k];
    }
    Ok(ap)
}

/// The nine FPPI reference points `10^-2, 10^-1.75, ..., 10^0`.
pub fn fppi_reference_points() -> [f64; 9] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 0.25 * i as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Lowest score admitted at this point (`None` for the empty start point).
    pub score: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fppi: f64,
    pub miss_rate: f64,
}

/// Operating points at every distinct score threshold, starting from "nothing admitted".
pub fn operating_points(ranked: &[(f64, bool)], n_gt: usize, n_images: usize) -> Vec<OperatingPoint> {
    let mut points = vec![OperatingPoint {
        score: None,
        tp: 0,
        fp: 0,
        fn_: n_gt,
        fppi: 0.0,
        miss_rate: 1.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(score, is_tp)) in ranked.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = ranked.get(k + 1).is_none_or(|&(next, _)| next != score);
        if group_ends {
            points.push(OperatingPoint {
                score: Some(score),
                tp,
                fp,
                fn_: n_gt - tp,
                fppi: fp as f64 / n_images as f64,
                miss_rate: 1.0 - tp as f64 / n_gt as f64,
            });
        }
    }
    points
}

/// Log-average miss rate over FPPI in `[1e-2, 1e0]`.
///
/// At each reference point the miss rate of the last operating point with
/// `fppi <= ref` is used; the result is the geometric mean with miss rates floored
/// at [`MISS_RATE_FLOOR`].
pub fn log_average_miss_rate(ranked: &[(f64, bool)], n_gt: usize, n_images: usize) -> Result<f64, MetricsError> {
    if n_images == 0 {
        return Err(MetricsError::NoImages);
    }
    if n_gt == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    let points = operating_points(ranked, n_gt, n_images);
    let mut log_sum = 0.0;
    let refs = fppi_reference_points();
    for r in refs {
        let miss = points
            .iter()
            .rev()
            .find(|p| p.fppi <= r)
            .map_or(1.0, |p| p.miss_rate);
        log_sum += miss.max(MISS_RATE_FLOOR).ln();
    }
    Ok((log_sum / refs.len() as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ApMode {
    /// 101-point interpolation, recall and precision below 0.1 removed, renormalized.
    #[default]
    NuScenes,
    /// All-point interpolated AP, as in 2D evaluation.
    Plain,
}

/// Linear interpolation with `np.interp` semantics (`left = fp[0]`, `right = 0`).
fn interp(x: f64, xp: &[f64], fp: &[f64]) -> f64 {
    let last = xp.len() - 1;
    if x < xp[0] {
        return fp[0];
    }
    if x > xp[last] {
        return 0.0;
    }
    if x == xp[last] {
        return fp[last];
    }
    let j = xp.partition_point(|&v| v <= x) - 1;
    let t = (x - xp[j]) / (xp[j + 1] - xp[j]);
    fp[j] + t * (fp[j + 1] - fp[j])
}

/// nuScenes-style AP from ranked TP flags.
///
/// Precision is sampled at 101 evenly spaced recall levels; levels with recall
/// `<= 0.1` are dropped and each remaining sample contributes
/// `max(p - 0.1, 0) / 0.9`.
pub fn nuscenes_ap(flags: &[bool], n_gt: usize) -> Result<f64, MetricsError> {
    if n_gt == 0 {
        return Err(MetricsError::NoGroundTruth);
    }
    if flags.is_empty() {
        return Ok(0.0);
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    let first = (100.0 * NUSCENES_MIN_RECALL).round() as usize + 1;
    let samples: Vec<f64> = (first..=100)
        .map(|i| {
            let p = interp(i as f64 / 100.0, &recall, &precision);
            (p - NUSCENES_MIN_PRECISION).max(0.0) / (1.0 - NUSCENES_MIN_PRECISION)
        })
        .collect();
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

fn ap_with_mode(flags: &[bool], n_gt: usize, mode: ApMode) -> Result<f64, MetricsError> {
    match mode {
        ApMode::NuScenes => nuscenes_ap(flags, n_gt),
        ApMode::Plain => average_precision(flags, n_gt),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Map3D {
    pub map: f64,
    pub per_threshold: Vec<ThresholdResult>,
}

fn check_thresholds(thresholds: &[f64]) -> Result<(), MetricsError> {
    if thresholds.is_empty() {
        return Err(MetricsError::InvalidThreshold(f64::NAN));
    }
    for &t in thresholds {
        if !(t > 0.0 && t.is_finite()) {
            return Err(MetricsError::InvalidThreshold(t));
        }
    }
    Ok(())
}

/// Center-distance mAP: the mean of per-threshold APs.
pub fn map_3d(
    dets: &[Detection3D],
    gts: &[GroundTruth3D],
    thresholds: &[f64],
    mode: ApMode,
) -> Result<Map3D, MetricsError> {
    check_thresholds(thresholds)?;
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let m = match_dataset(dets, gts, MatchCriterion::CenterDistance(t))?;
        let ap = ap_with_mode(&m.flags(), m.n_gt, mode)?;
        per_threshold.push(ThresholdResult {
            threshold: t,
            ap,
            tp: m.tp(),
            fp: m.fp(),
            fn_: m.n_gt - m.tp(),
        });
    }
    let map = per_threshold.iter().map(|r| r.ap).sum::<f64>() / per_threshold.len() as f64;
    Ok(Map3D { map, per_threshold })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRecall {
    /// `AR_i` per occlusion level; `None` when the level has no ground truths.
    pub ar: [Option<f64>; OCCLUSION_LEVELS],
    /// `Recall_{i,d}` per threshold (outer) and level (inner).
    pub recall: Vec<[Option<f64>; OCCLUSION_LEVELS]>,
    pub counts: [usize; OCCLUSION_LEVELS],
}

/// Occlusion-stratified average recall over distance thresholds.
///
/// Matching is done once per threshold against all ground truths; recall is then
/// computed separately for each occlusion level. Ignore-flagged entries are excluded.
pub fn average_recall_occlusion(
    dets: &[Detection3D],
    gts: &[GroundTruth3D],
    thresholds: &[f64],
) -> Result<OcclusionRecall, MetricsError> {
    check_thresholds(thresholds)?;
    for (index, g) in gts.iter().enumerate() {
        if g.bbox.occlusion as usize >= OCCLUSION_LEVELS {
            return Err(MetricsError::OcclusionLabel {
                index,
                label: g.bbox.occlusion,
            });
        }
    }
    let mut counts = [0usize; OCCLUSION_LEVELS];
    for g in gts.iter().filter(|g| !g.ignore) {
        counts[g.bbox.occlusion as usize] += 1;
    }
    let mut recall = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let m = match_dataset(dets, gts, MatchCriterion::CenterDistance(t))?;
        let mut hits = [0usize; OCCLUSION_LEVELS];
        for (g, &matched) in gts.iter().zip(&m.gt_matched) {
            if !g.ignore && matched {
                hits[g.bbox.occlusion as usize] += 1;
            }
        }
        recall.push(std::array::from_fn(|i| {
            (counts[i] > 0).then(|| hits[i] as f64 / counts[i] as f64)
        }));
    }
    let ar = std::array::from_fn(|i| {
        (counts[i] > 0).then(|| {
            recall.iter().map(|r: &[Option<f64>; OCCLUSION_LEVELS]| r[i].unwrap_or(0.0)).sum::<f64>()
                / thresholds.len() as f64
        })
    });
    Ok(OcclusionRecall { ar, recall, counts })
}

/// Class-agnostic greedy NMS, applied within each image.
///
/// Detections are visited in ranking order; one is removed when its IoU with an
/// already kept detection of the same image is at least `iou_thresh`. The kept
/// detections are returned in ranking order.
pub fn nms(dets: &[Detection2D], iou_thresh: f64) -> Result<Vec<Detection2D>, MetricsError> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(MetricsError::InvalidThreshold(iou_thresh));
    }
    check_scores(dets)?;
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut kept: Vec<Detection2D> = Vec::new();
    for i in rank_by_score(&scores) {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.image_id == d.image_id && iou2d(&k.bbox, &d.bbox) >= iou_thresh);
        if !suppressed {
            kept.push(d.clone());
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report2D {
    pub ap: f64,
    pub mr2: f64,
    pub iou_thresh: f64,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_detections: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub operating_points: Vec<OperatingPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report3D {
    pub map: f64,
    pub ar0: Option<f64>,
    pub ar1: Option<f64>,
    pub ar2: Option<f64>,
    pub ap_mode: ApMode,
    pub n_gt: usize,
    pub n_detections: usize,
    pub per_threshold: Vec<ThresholdResult>,
    pub recall_by_occlusion: Vec<[Option<f64>; OCCLUSION_LEVELS]>,
    pub gt_per_occlusion: [usize; OCCLUSION_LEVELS],
}

/// Metric output of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum EvalReport {
    #[serde(rename = "2d")]
    TwoD(Report2D),
    #[serde(rename = "3d")]
    ThreeD(Report3D),
}

impl EvalReport {
    /// Scalar metrics as `(name, value)` rows; undefined recalls are omitted.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = Vec::new();
        match self {
            EvalReport::TwoD(r) => {
                rows.push(("ap".to_string(), r.ap));
                rows.push(("mr2".to_string(), r.mr2));
                rows.push(("n_images".to_string(), r.n_images as f64));
                rows.push(("n_gt".to_string(), r.n_gt as f64));
                rows.push(("tp".to_string(), r.tp as f64));
                rows.push(("fp".to_string(), r.fp as f64));
                rows.push(("fn".to_string(), r.fn_ as f64));
            }
            EvalReport::ThreeD(r) => {
                rows.push(("map".to_string(), r.map));
                for (name, v) in [("ar0", r.ar0), ("ar1", r.ar1), ("ar2", r.ar2)] {
                    if let Some(v) = v {
                        rows.push((name.to_string(), v));
                    }
                }
                for t in &r.per_threshold {
                    rows.push((format!("ap@{}", t.threshold), t.ap));
                }
                rows.push(("n_gt".to_string(), r.n_gt as f64));
            }
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,value\n");
        for (name, value) in self.rows() {
            out.push_str(&format!("{name},{value}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// AP at IoU `iou_thresh` and MR⁻² over a 2D dataset.
pub fn evaluate_2d(
    dets: &[Detection2D],
    gts: &[GroundTruth2D],
    iou_thresh: f64,
) -> Result<Report2D, MetricsError> {
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(MetricsError::InvalidThreshold(iou_thresh));
    }
    let m = match_dataset(dets, gts, MatchCriterion::Iou(iou_thresh))?;
    let ap = average_precision(&m.flags(), m.n_gt)?;
    let mr2 = log_average_miss_rate(&m.ranked, m.n_gt, m.n_images)?;
    let tp = m.tp();
    Ok(Report2D {
        ap,
        mr2,
        iou_thresh,
        n_images: m.n_images,
        n_gt: m.n_gt,
        n_detections: dets.len(),
        tp,
        fp: m.fp(),
        fn_: m.n_gt - tp,
        operating_points: operating_points(&m.ranked, m.n_gt, m.n_images),
    })
}

/// Center-distance mAP and occlusion-stratified AR over a 3D dataset.
pub fn evaluate_3d(
    dets: &[Detection3D],
    gts: &[GroundTruth3D],
    thresholds: &[f64],
    mode: ApMode,
) -> Result<Report3D, MetricsError> {
    let m = map_3d(dets, gts, thresholds, mode)?;
    let ar = average_recall_occlusion(dets, gts, thresholds)?;
    Ok(Report3D {
        map: m.map,
        ar0: ar.ar[0],
        ar1: ar.ar[1],
        ar2: ar.ar[2],
        ap_mode: mode,
        n_gt: gts.iter().filter(|g| !g.ignore).count(),
        n_detections: dets.len(),
        per_threshold: m.per_threshold,
        recall_by_occlusion: ar.recall,
        gt_per_occlusion: ar.counts,
    })
}
