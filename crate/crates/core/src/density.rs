//! Ground-truth density maps.
//!
//! The primary formulation places one unnormalized Gaussian window per bounding
//! box, with standard deviations proportional to the box width and height, and
//! truncates it to the box. Three point/statistics based formulations are kept for
//! comparison: fixed-sigma head points, adaptive (K nearest neighbour) head points
//! and per-class average box size.
//!
//! Maps are sampled at pixel centers `(x + 0.5, y + 0.5)` of the output grid, after
//! dividing annotation coordinates by the configured scale `s`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou2d, Box2D};

/// Scale factor `d` used throughout the experiments: `sigma = w / 3`, `h / 3`.
pub const DEFAULT_D: f64 = 1.0 / 3.0;
/// Default spread factor for the nearest-neighbour head-point mode.
pub const DEFAULT_KNN_BETA: f64 = 0.3;
/// IoU every pair of a triplet has to reach to count as overlapping.
pub const DEFAULT_TRIPLET_IOU: f64 = 0.3;

/// Normalized kernels are evaluated within this many sigmas of their mean.
const KERNEL_RADIUS_SIGMAS: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensityError {
    #[error("shape mismatch: {left_h}x{left_w} vs {right_h}x{right_w}")]
    Shape {
        left_h: usize,
        left_w: usize,
        right_h: usize,
        right_w: usize,
    },
    #[error("invalid density map: {0}")]
    InvalidMap(String),
    #[error("invalid density config: {0}")]
    Config(String),
    #[error("annotations do not match density mode {0}")]
    ModeMismatch(&'static str),
    #[error("no size statistics for class {0:?}")]
    UnknownClass(String),
    #[error("triplet statistic needs at least one image")]
    NoImages,
}

/// Scalar grid at feature-map resolution, stored row-major.
///
/// Rendered targets are non-negative by construction. Maps produced by a density
/// head (predictions) can hold negative values, so only finiteness is enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Result<Self, DensityError> {
        Self::from_vec(height, width, vec![0.0; height * width])
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self, DensityError> {
        if height == 0 || width == 0 {
            return Err(DensityError::InvalidMap(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(DensityError::InvalidMap(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DensityError::InvalidMap(format!(
                "non-finite value at row {}, column {}",
                i / width,
                i % width
            )));
        }
        Ok(DensityMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.width)
    }

    fn add_at(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] += v;
    }
}

/// Per-class average box size used by the class-average formulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSize {
    pub mean_height: f64,
    pub mean_width: f64,
}

impl ClassSize {
    /// `sigma = 0.5 * sqrt(h^2 + w^2)`.
    pub fn sigma(&self) -> f64 {
        0.5 * (self.mean_height * self.mean_height + self.mean_width * self.mean_width).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DensityMode {
    /// Box-truncated Gaussian window with `sigma_x = d w`, `sigma_y = d h`.
    BoxWindow,
    /// Normalized isotropic Gaussian around head points, constant sigma (pixels).
    HeadPointFixed { sigma: f64 },
    /// Normalized isotropic Gaussian with `sigma = beta * mean distance to the k
    /// nearest other points`. Falls back to `sigma_fixed` when fewer than `k + 1`
    /// points exist or the mean distance is zero.
    HeadPointKnn { k: usize, beta: f64, sigma_fixed: f64 },
    /// Normalized isotropic Gaussian at box centers, sigma from class size statistics.
    ClassAverage { classes: BTreeMap<String, ClassSize> },
}

impl DensityMode {
    pub fn name(&self) -> &'static str {
        match self {
            DensityMode::BoxWindow => "bbox-window",
            DensityMode::HeadPointFixed { .. } => "head-point-fixed",
            DensityMode::HeadPointKnn { .. } => "head-point-knn",
            DensityMode::ClassAverage { .. } => "class-average",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    pub d: f64,
    /// Annotation pixels per density-grid pixel.
    pub scale: f64,
    pub mode: DensityMode,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            d: DEFAULT_D,
            scale: 1.0,
            mode: DensityMode::BoxWindow,
        }
    }
}

impl DensityConfig {
    pub fn validate(&self) -> Result<(), DensityError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(DensityError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("d", self.d)?;
        positive("scale", self.scale)?;
        match &self.mode {
            DensityMode::BoxWindow => {}
            DensityMode::HeadPointFixed { sigma } => positive("sigma_fixed", *sigma)?,
            DensityMode::HeadPointKnn {
                k,
                beta,
                sigma_fixed,
            } => {
                if *k == 0 {
                    return Err(DensityError::Config("knn k must be at least 1".into()));
                }
                positive("beta", *beta)?;
                positive("sigma_fixed", *sigma_fixed)?;
            }
            DensityMode::ClassAverage { classes } => {
                for (name, size) in classes {
                    positive(&format!("class {name} mean height"), size.mean_height)?;
                    positive(&format!("class {name} mean width"), size.mean_width)?;
                }
            }
        }
        Ok(())
    }
}

/// Density-loss weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 1.0 }
    }
}

impl LossConfig {
    pub fn new(lambda: f64) -> Result<Self, DensityError> {
        if lambda >= 0.0 && lambda.is_finite() {
            Ok(LossConfig { lambda })
        } else {
            Err(DensityError::Config(format!("lambda must be >= 0, got {lambda}")))
        }
    }

    pub fn weighted(&self, loss: f64) -> f64 {
        self.lambda * loss
    }
}

/// Contribution of a single box at point `(x, y)`: a Gaussian window peaking at 1
/// on the box center and zero outside the (closed) box.
pub fn density_value(bx: &Box2D, d: f64, x: f64, y: f64) -> f64 {
    if !bx.contains(x, y) {
        return 0.0;
    }
    let (mx, my) = bx.center();
    let zx = (x - mx) / (d * bx.width());
    let zy = (y - my) / (d * bx.height());
    (-0.5 * (zx * zx + zy * zy)).exp()
}

/// Normalized isotropic 2D Gaussian density at squared distance `r2`.
pub fn gaussian_value(sigma: f64, r2: f64) -> f64 {
    (-0.5 * r2 / (sigma * sigma)).exp() / (2.0 * PI * sigma * sigma)
}

/// Index range of sample columns (or rows) whose centers fall in `[lo, hi]`.
fn sample_range(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(n as f64 - 1.0);
    if first > last || !first.is_finite() || !last.is_finite() {
        None
    } else {
        Some((first as usize, last as usize))
    }
}

/// Sums the box-truncated Gaussian windows of `boxes` on an `out.0 x out.1` grid.
pub fn render_density_map(
    boxes: &[Box2D],
    cfg: &DensityConfig,
    out: (usize, usize),
) -> Result<DensityMap, DensityError> {
    cfg.validate()?;
    let (h, w) = out;
    let mut map = DensityMap::zeros(h, w)?;
    for bx in boxes {
        let b = bx.scaled_down(cfg.scale);
        let (Some((c0, c1)), Some((r0, r1))) =
            (sample_range(b.x_min, b.x_max, w), sample_range(b.y_min, b.y_max, h))
        else {
            continue;
        };
        for row in r0..=r1 {
            let y = row as f64 + 0.5;
            for col in c0..=c1 {
                let v = density_value(&b, cfg.d, col as f64 + 0.5, y);
                map.add_at(row, col, v);
            }
        }
    }
    Ok(map)
}

/// Annotation kinds accepted by the comparison formulations.
#[derive(Debug, Clone, Copy)]
pub enum Annotations<'a> {
    /// Head points `(x, y)` in annotation pixels.
    Points(&'a [(f64, f64)]),
    /// Boxes with their class names.
    ClassBoxes(&'a [(Box2D, String)]),
}

/// Renders one of the point/statistics based formulations. Kernels are normalized
/// Gaussians and are not truncated to any box.
pub fn render_alt_density_map(
    annotations: Annotations<'_>,
    cfg: &DensityConfig,
    out: (usize, usize),
) -> Result<DensityMap, DensityError> {
    cfg.validate()?;
    let s = cfg.scale;
    // (center in grid pixels, sigma in grid pixels)
    let kernels: Vec<((f64, f64), f64)> = match (&cfg.mode, annotations) {
        (DensityMode::HeadPointFixed { sigma }, Annotations::Points(points)) => points
            .iter()
            .map(|&(x, y)| ((x / s, y / s), sigma / s))
            .collect(),
        (
            DensityMode::HeadPointKnn {
                k,
                beta,
                sigma_fixed,
            },
            Annotations::Points(points),
        ) => knn_sigmas(points, *k, *beta, *sigma_fixed)
            .into_iter()
            .zip(points)
            .map(|(sigma, &(x, y))| ((x / s, y / s), sigma / s))
            .collect(),
        (DensityMode::ClassAverage { classes }, Annotations::ClassBoxes(boxes)) => {
            let mut out = Vec::with_capacity(boxes.len());
            for (bx, class) in boxes {
                let size = classes
                    .get(class)
                    .ok_or_else(|| DensityError::UnknownClass(class.clone()))?;
                let (cx, cy) = bx.center();
                out.push(((cx / s, cy / s), size.sigma() / s));
            }
            out
        }
        (mode, _) => return Err(DensityError::ModeMismatch(mode.name())),
    };

    let (h, w) = out;
    let mut map = DensityMap::zeros(h, w)?;
    for ((mx, my), sigma) in kernels {
        let radius = KERNEL_RADIUS_SIGMAS * sigma;
        let (Some((c0, c1)), Some((r0, r1))) = (
            sample_range(mx - radius, mx + radius, w),
            sample_range(my - radius, my + radius, h),
        ) else {
            continue;
        };
        for row in r0..=r1 {
            let dy = row as f64 + 0.5 - my;
            for col in c0..=c1 {
                let dx = col as f64 + 0.5 - mx;
                map.add_at(row, col, gaussian_value(sigma, dx * dx + dy * dy));
            }
        }
    }
    Ok(map)
}

/// Per-point sigma: `beta` times the mean distance to the `k` nearest other points.
pub fn knn_sigmas(points: &[(f64, f64)], k: usize, beta: f64, sigma_fixed: f64) -> Vec<f64> {
    if points.len() < k + 1 {
        return vec![sigma_fixed; points.len()];
    }
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let mut dists: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &(px, py))| ((px - x).powi(2) + (py - y).powi(2)).sqrt())
                .collect();
            dists.sort_by(f64::total_cmp);
            let mean = dists[..k].iter().sum::<f64>() / k as f64;
            if mean > 0.0 {
                beta * mean
            } else {
                sigma_fixed
            }
        })
        .collect()
}

/// Pixel-wise L1 loss, averaged over all pixels. Unweighted; see [`LossConfig`].
pub fn density_loss(pred: &DensityMap, target: &DensityMap) -> Result<f64, DensityError> {
    check_same_shape(pred, target)?;
    let n = pred.values.len() as f64;
    Ok(pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n)
}

/// Subgradient of [`density_loss`] with respect to the prediction: `sign(pred - target) / n`,
/// zero at ties.
pub fn density_loss_grad(pred: &DensityMap, target: &DensityMap) -> Result<Vec<f64>, DensityError> {
    check_same_shape(pred, target)?;
    let n = pred.values.len() as f64;
    Ok(pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(p, t)| {
            if p > t {
                1.0 / n
            } else if p < t {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect())
}

fn check_same_shape(a: &DensityMap, b: &DensityMap) -> Result<(), DensityError> {
    if a.height != b.height || a.width != b.width {
        return Err(DensityError::Shape {
            left_h: a.height,
            left_w: a.width,
            right_h: b.height,
            right_w: b.width,
        });
    }
    Ok(())
}

/// Number of unordered box triples whose three pairwise IoUs all reach `iou_thresh`.
pub fn count_overlapping_triplets(boxes: &[Box2D], iou_thresh: f64) -> u64 {
    let n = boxes.len();
    let mut adjacent = vec![false; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let hit = iou2d(&boxes[i], &boxes[j]) >= iou_thresh;
            adjacent[i * n + j] = hit;
            adjacent[j * n + i] = hit;
        }
    }
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            if !adjacent[i * n + j] {
                continue;
            }
            count += (j + 1..n)
                .filter(|&k| adjacent[i * n + k] && adjacent[j * n + k])
                .count() as u64;
        }
    }
    count
}

/// Average number of overlapping triplets per image.
pub fn triplet_statistic(per_image_boxes: &[Vec<Box2D>], iou_thresh: f64) -> Result<f64, DensityError> {
    if per_image_boxes.is_empty() {
        return Err(DensityError::NoImages);
    }
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(DensityError::Config(format!(
            "triplet IoU threshold must lie in (0, 1], got {iou_thresh}"
        )));
    }
    let total: u64 = per_image_boxes
        .iter()
        .map(|boxes| count_overlapping_triplets(boxes, iou_thresh))
        .sum();
    Ok(total as f64 / per_image_boxes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> Box2D {
        Box2D::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn window_center_outside_and_corner() {
        let b = bx(10.0, 20.0, 40.0, 80.0);
        assert_eq!(density_value(&b, DEFAULT_D, 25.0, 50.0), 1.0);
        assert_eq!(density_value(&b, DEFAULT_D, 40.0001, 50.0), 0.0);
        assert_eq!(density_value(&b, DEFAULT_D, 5.0, 5.0), 0.0);
        for (x, y) in [(10.0, 20.0), (40.0, 20.0), (10.0, 80.0), (40.0, 80.0)] {
            let v = density_value(&b, DEFAULT_D, x, y);
            assert!((v - (-2.25f64).exp()).abs() < 1e-12);
            assert!((v - 0.105399).abs() < 1e-6);
        }
    }

    #[test]
    fn render_empty_and_peak() {
        let cfg = DensityConfig::default();
        let m = render_density_map(&[], &cfg, (4, 5)).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
        // center (2.5, 1.5) is the center of pixel (row 1, col 2)
        let b = bx(0.5, 0.0, 4.5, 3.0);
        let m = render_density_map(&[b], &cfg, (4, 5)).unwrap();
        assert_eq!(m.max(), 1.0);
        assert_eq!(m.get(1, 2), 1.0);
    }

    #[test]
    fn identical_boxes_double_the_map() {
        let cfg = DensityConfig::default();
        let b = bx(1.0, 1.0, 6.0, 10.0);
        let one = render_density_map(&[b], &cfg, (10, 8)).unwrap();
        let two = render_density_map(&[b, b], &cfg, (10, 8)).unwrap();
        for (a, c) in one.values().iter().zip(two.values()) {
            assert_eq!(2.0 * a, *c);
        }
        assert_eq!(two.max(), 2.0);
    }

    #[test]
    fn scale_divides_annotation_coordinates() {
        let native = DensityConfig::default();
        let scaled = DensityConfig {
            scale: 4.0,
            ..DensityConfig::default()
        };
        let small = render_density_map(&[bx(1.0, 2.0, 7.0, 9.0)], &native, (12, 12)).unwrap();
        let large = render_density_map(&[bx(4.0, 8.0, 28.0, 36.0)], &scaled, (12, 12)).unwrap();
        for (a, b) in small.values().iter().zip(large.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn class_average_sigma() {
        let s = ClassSize {
            mean_height: 100.0,
            mean_width: 50.0,
        };
        assert!((s.sigma() - 0.5 * 12500f64.sqrt()).abs() < 1e-12);
        assert!((s.sigma() - 55.9017).abs() < 1e-4);
    }

    #[test]
    fn normalized_gaussian_peak_and_mass() {
        assert!((gaussian_value(1.0, 0.0) - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((gaussian_value(1.0, 0.0) - 0.159155).abs() < 1e-6);
        let cfg = DensityConfig {
            mode: DensityMode::HeadPointFixed { sigma: 2.0 },
            ..DensityConfig::default()
        };
        let m = render_alt_density_map(Annotations::Points(&[(32.0, 30.0)]), &cfg, (64, 64)).unwrap();
        assert!((m.sum() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn knn_falls_back_with_too_few_points() {
        assert_eq!(knn_sigmas(&[(0.0, 0.0), (3.0, 4.0)], 2, 0.3, 7.0), vec![7.0, 7.0]);
        let s = knn_sigmas(&[(0.0, 0.0), (3.0, 4.0), (0.0, 10.0)], 1, 0.5, 7.0);
        assert_eq!(s, vec![2.5, 2.5, 0.5 * 45f64.sqrt()]);
        // coincident points give zero distance
        assert_eq!(knn_sigmas(&[(1.0, 1.0), (1.0, 1.0)], 1, 0.3, 7.0), vec![7.0, 7.0]);
    }

    #[test]
    fn knn_mode_renders() {
        let cfg = DensityConfig {
            mode: DensityMode::HeadPointKnn {
                k: 1,
                beta: DEFAULT_KNN_BETA,
                sigma_fixed: 2.0,
            },
            ..DensityConfig::default()
        };
        let pts = [(20.0, 20.0), (30.0, 20.0), (40.0, 40.0)];
        let m = render_alt_density_map(Annotations::Points(&pts), &cfg, (64, 64)).unwrap();
        assert!((m.sum() - 3.0).abs() < 1e-2);
    }

    #[test]
    fn class_average_mode_requires_known_classes() {
        let mut classes = BTreeMap::new();
        classes.insert(
            "person".to_string(),
            ClassSize {
                mean_height: 8.0,
                mean_width: 4.0,
            },
        );
        let cfg = DensityConfig {
            mode: DensityMode::ClassAverage { classes },
            ..DensityConfig::default()
        };
        let ok = [(bx(10.0, 10.0, 20.0, 30.0), "person".to_string())];
        let m = render_alt_density_map(Annotations::ClassBoxes(&ok), &cfg, (48, 48)).unwrap();
        assert!((m.sum() - 1.0).abs() < 1e-3);
        let bad = [(bx(10.0, 10.0, 20.0, 30.0), "car".to_string())];
        assert_eq!(
            render_alt_density_map(Annotations::ClassBoxes(&bad), &cfg, (48, 48)),
            Err(DensityError::UnknownClass("car".into()))
        );
        assert!(matches!(
            render_alt_density_map(Annotations::Points(&[]), &cfg, (4, 4)),
            Err(DensityError::ModeMismatch(_))
        ));
    }

    #[test]
    fn loss_examples() {
        let t = DensityMap::from_vec(2, 2, vec![0.0; 4]).unwrap();
        let p = DensityMap::from_vec(2, 2, vec![1.0, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(density_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(density_loss(&p, &t).unwrap(), 1.0);
        let shifted = DensityMap::from_vec(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(density_loss(&shifted, &t).unwrap(), 1.0);
        let other = DensityMap::zeros(3, 2).unwrap();
        assert!(matches!(density_loss(&p, &other), Err(DensityError::Shape { .. })));
        assert_eq!(density_loss_grad(&p, &t).unwrap(), vec![0.25, -0.25, 0.25, 0.0]);
        assert_eq!(LossConfig::new(0.5).unwrap().weighted(2.0), 1.0);
        assert!(LossConfig::new(-1.0).is_err());
    }

    #[test]
    fn triplet_examples() {
        let a = bx(0.0, 0.0, 10.0, 20.0);
        assert_eq!(triplet_statistic(&[vec![a, a, a]], 0.3).unwrap(), 1.0);
        assert_eq!(triplet_statistic(&[vec![a, a]], 0.3).unwrap(), 0.0);
        let far = bx(100.0, 0.0, 110.0, 20.0);
        let b = bx(1.0, 0.0, 11.0, 20.0);
        let c = bx(0.0, 1.0, 10.0, 21.0);
        assert_eq!(triplet_statistic(&[vec![a, b, c, far]], 0.3).unwrap(), 1.0);
        assert_eq!(triplet_statistic(&[vec![a, b, c], vec![]], 0.3).unwrap(), 0.5);
        assert_eq!(triplet_statistic(&[], 0.3), Err(DensityError::NoImages));
        assert!(triplet_statistic(&[vec![]], 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = DensityConfig::default();
        cfg.d = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = DensityConfig {
            mode: DensityMode::HeadPointKnn {
                k: 0,
                beta: 0.3,
                sigma_fixed: 1.0,
            },
            ..DensityConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(DensityMap::from_vec(1, 1, vec![f64::NAN]).is_err());
        assert!(DensityMap::zeros(0, 3).is_err());
    }
}
