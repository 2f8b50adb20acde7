//! Scenes, the native scene JSON schema and prediction files.
//!
//! Native scene file: a JSON array of scenes.
//!
//! ```json
//! [
//!   {
//!     "image_id": "000001",
//!     "width": 1280,
//!     "height": 720,
//!     "intrinsics": {"fx": 1000.0, "fy": 1000.0, "cx": 640.0, "cy": 360.0},
//!     "objects": [
//!       {
//!         "box2d": [100.0, 200.0, 150.0, 320.0],
//!         "box3d": {"center": [0.5, 1.0, 12.0], "dims": [0.6, 1.7, 0.5], "yaw": 0.1},
//!         "occlusion": 1,
//!         "ignore": false
//!       }
//!     ]
//!   }
//! ]
//! ```
//!
//! `box2d` is `[x_min, y_min, x_max, y_max]`, `box3d` uses camera coordinates in meters
//! with dims `[w, h, l]`. Every object needs at least one of the two boxes;
//! `intrinsics` is required when any object has a `box3d`. `occlusion` (0, 1 or 2)
//! defaults to 0 and `ignore` to false.
//!
//! Prediction files are JSON arrays of `{"image_id", "box", "score"}` where `box` is a
//! 2D array `[x_min, y_min, x_max, y_max]` or a 3D object `{"center", "dims", "yaw"}`.

use serde::{Deserialize, Serialize};

use super::{json_location, IoError};
use crate::density::{render_alt_density_map, render_density_map, Annotations, DensityConfig, DensityError, DensityMap, DensityMode};
use crate::geometry::{in_fov, project_box3d, Box2D, Box3D, CameraIntrinsics};
use crate::metrics::{Detection2D, Detection3D, GroundTruth2D, GroundTruth3D};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub box2d: Option<Box2D>,
    pub box3d: Option<Box3D>,
    pub ignore: bool,
    /// Annotation class tag, when the source format has one.
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: String,
    /// Image size in pixels, when known.
    pub size: Option<(u32, u32)>,
    pub intrinsics: Option<CameraIntrinsics>,
    pub objects: Vec<SceneObject>,
}

/// A 2D box derived from a cuboid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derived2D {
    /// `None` when the cuboid reaches behind the camera.
    pub box2d: Option<Box2D>,
    pub out_of_fov: bool,
}

impl Scene {
    /// Projects the cuboid of object `index`; `None` when it has no cuboid or the
    /// scene has no intrinsics.
    pub fn derive_2d(&self, index: usize) -> Option<Derived2D> {
        let bx = self.objects.get(index)?.box3d?;
        let cam = self.intrinsics.as_ref()?;
        let box2d = project_box3d(&bx, cam).ok();
        Some(Derived2D {
            box2d,
            out_of_fov: box2d.is_none() || !in_fov(&bx, cam),
        })
    }

    /// The 2D box of every object: the annotated one, else the projected cuboid.
    /// Objects without either are skipped.
    pub fn boxes_2d(&self) -> Vec<(Box2D, bool)> {
        (0..self.objects.len())
            .filter_map(|i| {
                let obj = &self.objects[i];
                obj.box2d
                    .or_else(|| self.derive_2d(i).and_then(|d| d.box2d))
                    .filter(|b| b.is_valid())
                    .map(|b| (b, obj.ignore))
            })
            .collect()
    }

    /// Non-ignored 2D boxes.
    pub fn person_boxes_2d(&self) -> Vec<Box2D> {
        self.boxes_2d().into_iter().filter(|(_, ig)| !ig).map(|(b, _)| b).collect()
    }

    /// Density grid size `(height, width)` at `scale`: the image size when known,
    /// else the extent of the annotated boxes.
    pub fn grid_size(&self, scale: f64) -> (usize, usize) {
        let (w, h) = match self.size {
            Some((w, h)) => (w as f64, h as f64),
            None => self.boxes_2d().iter().fold((1.0f64, 1.0f64), |(w, h), (b, _)| {
                (w.max(b.x_max), h.max(b.y_max))
            }),
        };
        (((h / scale).ceil() as usize).max(1), ((w / scale).ceil() as usize).max(1))
    }

    /// Target density map of the non-ignored objects under `cfg`.
    ///
    /// Point-based formulations use box centers as the object points; the
    /// class-average formulation looks up each object's tag (default `person`).
    pub fn density_map(&self, cfg: &DensityConfig, grid: (usize, usize)) -> Result<DensityMap, DensityError> {
        let boxes: Vec<(Box2D, Option<&str>)> = (0..self.objects.len())
            .filter(|&i| !self.objects[i].ignore)
            .filter_map(|i| {
                let obj = &self.objects[i];
                obj.box2d
                    .or_else(|| self.derive_2d(i).and_then(|d| d.box2d))
                    .filter(|b| b.is_valid())
                    .map(|b| (b, obj.tag.as_deref()))
            })
            .collect();
        match &cfg.mode {
            DensityMode::BoxWindow => {
                let plain: Vec<Box2D> = boxes.iter().map(|(b, _)| *b).collect();
                render_density_map(&plain, cfg, grid)
            }
            DensityMode::HeadPointFixed { .. } | DensityMode::HeadPointKnn { .. } => {
                let points: Vec<(f64, f64)> = boxes.iter().map(|(b, _)| b.center()).collect();
                render_alt_density_map(Annotations::Points(&points), cfg, grid)
            }
            DensityMode::ClassAverage { .. } => {
                let tagged: Vec<(Box2D, String)> = boxes
                    .iter()
                    .map(|(b, t)| (*b, t.unwrap_or(super::odgt::PERSON_TAG).to_string()))
                    .collect();
                render_alt_density_map(Annotations::ClassBoxes(&tagged), cfg, grid)
            }
        }
    }

    pub fn ground_truth_2d(&self) -> Vec<GroundTruth2D> {
        self.boxes_2d()
            .into_iter()
            .map(|(bbox, ignore)| GroundTruth2D {
                image_id: self.image_id.clone(),
                bbox,
                ignore,
            })
            .collect()
    }

    /// 3D ground truths; with `fov_filter`, cuboids whose center is not visible are dropped.
    pub fn ground_truth_3d(&self, fov_filter: bool) -> Vec<GroundTruth3D> {
        self.objects
            .iter()
            .filter_map(|o| o.box3d.map(|b| (b, o.ignore)))
            .filter(|(b, _)| {
                !fov_filter || self.intrinsics.as_ref().is_some_and(|cam| in_fov(b, cam))
            })
            .map(|(bbox, ignore)| GroundTruth3D {
                image_id: self.image_id.clone(),
                bbox,
                ignore,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox3D {
    center: [f64; 3],
    dims: [f64; 3],
    #[serde(default)]
    yaw: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObject {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    box2d: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    box3d: Option<RawBox3D>,
    #[serde(default)]
    occlusion: i64,
    #[serde(default)]
    ignore: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    image_id: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intrinsics: Option<RawIntrinsics>,
    #[serde(default)]
    objects: Vec<RawObject>,
}

fn box2d_from(arr: [f64; 4], at: &str) -> Result<Box2D, IoError> {
    Box2D::new(arr[0], arr[1], arr[2], arr[3]).map_err(|e| IoError::invalid(at, e))
}

fn box3d_from(raw: &RawBox3D, occlusion: i64, at: &str) -> Result<Box3D, IoError> {
    let occlusion = u8::try_from(occlusion)
        .ok()
        .filter(|o| *o <= 2)
        .ok_or_else(|| IoError::invalid(format!("{at}.occlusion"), format!("occlusion must be 0, 1 or 2, got {occlusion}")))?;
    Box3D::new(raw.center, raw.dims, raw.yaw, occlusion).map_err(|e| IoError::invalid(format!("{at}.box3d"), e))
}

/// Parses and validates a native scene file.
pub fn parse_scene_json(text: &str) -> Result<Vec<Scene>, IoError> {
    let raw: Vec<RawScene> =
        serde_json::from_str(text).map_err(|e| IoError::invalid(json_location(&e), e))?;
    raw.iter()
        .enumerate()
        .map(|(si, s)| {
            let at = format!("scene[{si}]");
            if s.width == 0 || s.height == 0 {
                return Err(IoError::invalid(&at, "image width and height must be positive"));
            }
            let intrinsics = s
                .intrinsics
                .as_ref()
                .map(|k| CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, s.width, s.height))
                .transpose()
                .map_err(|e| IoError::invalid(format!("{at}.intrinsics"), e))?;
            let objects = s
                .objects
                .iter()
                .enumerate()
                .map(|(oi, o)| {
                    let at = format!("{at}.objects[{oi}]");
                    if o.box2d.is_none() && o.box3d.is_none() {
                        return Err(IoError::invalid(&at, "object needs box2d or box3d"));
                    }
                    if !(0..=2).contains(&o.occlusion) {
                        return Err(IoError::invalid(
                            format!("{at}.occlusion"),
                            format!("occlusion must be 0, 1 or 2, got {}", o.occlusion),
                        ));
                    }
                    let box3d = match &o.box3d {
                        Some(b) => {
                            if intrinsics.is_none() {
                                return Err(IoError::invalid(&at, "3D box in a scene without intrinsics"));
                            }
                            Some(box3d_from(b, o.occlusion, &at)?)
                        }
                        None => None,
                    };
                    let box2d = o
                        .box2d
                        .map(|b| box2d_from(b, &format!("{at}.box2d")))
                        .transpose()?;
                    Ok(SceneObject {
                        box2d,
                        box3d,
                        ignore: o.ignore,
                        tag: None,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Scene {
                image_id: s.image_id.clone(),
                size: Some((s.width, s.height)),
                intrinsics,
                objects,
            })
        })
        .collect()
}

/// Writes scenes in the native schema. Scenes without a size cannot be represented.
pub fn serialize_scene_json(scenes: &[Scene]) -> Result<String, IoError> {
    let raw = scenes
        .iter()
        .enumerate()
        .map(|(si, s)| {
            let (width, height) = s
                .size
                .ok_or_else(|| IoError::invalid(format!("scene[{si}]"), "scene has no image size"))?;
            Ok(RawScene {
                image_id: s.image_id.clone(),
                width,
                height,
                intrinsics: s.intrinsics.map(|k| RawIntrinsics {
                    fx: k.fx,
                    fy: k.fy,
                    cx: k.cx,
                    cy: k.cy,
                }),
                objects: s
                    .objects
                    .iter()
                    .map(|o| RawObject {
                        box2d: o.box2d.map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]),
                        box3d: o.box3d.map(|b| RawBox3D {
                            center: b.center,
                            dims: b.dims,
                            yaw: b.yaw,
                        }),
                        occlusion: o.box3d.map_or(0, |b| b.occlusion as i64),
                        ignore: o.ignore,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    Ok(serde_json::to_string_pretty(&raw).expect("scenes serialize"))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrediction<B> {
    image_id: String,
    #[serde(rename = "box")]
    bbox: B,
    score: f64,
}

fn parse_predictions<B: for<'de> Deserialize<'de>, T>(
    text: &str,
    convert: impl Fn(&B, &str) -> Result<T, IoError>,
) -> Result<Vec<(String, T, f64)>, IoError> {
    let raw: Vec<RawPrediction<B>> =
        serde_json::from_str(text).map_err(|e| IoError::invalid(json_location(&e), e))?;
    raw.iter()
        .enumerate()
        .map(|(i, p)| {
            let at = format!("predictions[{i}]");
            if !p.score.is_finite() {
                return Err(IoError::invalid(format!("{at}.score"), "score must be finite"));
            }
            Ok((p.image_id.clone(), convert(&p.bbox, &format!("{at}.box"))?, p.score))
        })
        .collect()
}

pub fn parse_predictions_2d(text: &str) -> Result<Vec<Detection2D>, IoError> {
    Ok(parse_predictions(text, |b: &[f64; 4], at| box2d_from(*b, at))?
        .into_iter()
        .map(|(image_id, bbox, score)| Detection2D { image_id, bbox, score })
        .collect())
}

pub fn parse_predictions_3d(text: &str) -> Result<Vec<Detection3D>, IoError> {
    Ok(parse_predictions(text, |b: &RawBox3D, at| {
        Box3D::new(b.center, b.dims, b.yaw, 0).map_err(|e| IoError::invalid(at, e))
    })?
    .into_iter()
    .map(|(image_id, bbox, score)| Detection3D { image_id, bbox, score })
    .collect())
}
