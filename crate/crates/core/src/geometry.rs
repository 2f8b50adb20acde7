//! Box types, overlap, pinhole projection of 3D cuboids and field-of-view filtering.
//!
//! Camera frame convention: +x right, +y down, +z forward (optical axis). Image
//! coordinates follow `u = fx * x / z + cx`, `v = fy * y / z + cy`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid 2D box ({x_min}, {y_min}, {x_max}, {y_max}): need finite x_min < x_max and y_min < y_max")]
    InvalidBox2D {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("invalid 3D box: {0}")]
    InvalidBox3D(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidCamera(String),
    #[error("cuboid corner ({x:.4}, {y:.4}, {z:.4}) is at or behind the camera plane")]
    BehindCamera { x: f64, y: f64, z: f64 },
}

/// Axis-aligned image box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let b = Box2D {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(GeometryError::InvalidBox2D {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        }
    }

    /// Builds a box from a top-left corner and a size, as used by `[x, y, w, h]` annotations.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Boundary-inclusive point membership.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Divides every coordinate by `s`.
    pub fn scaled_down(&self, s: f64) -> Box2D {
        Box2D {
            x_min: self.x_min / s,
            y_min: self.y_min / s,
            x_max: self.x_max / s,
            y_max: self.y_max / s,
        }
    }
}

/// Intersection over union. Degenerate or empty unions give 0.
pub fn iou2d(a: &Box2D, b: &Box2D) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || !union.is_finite() {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Oriented 3D cuboid in the camera frame with an occlusion label.
///
/// `w` extends along x, `h` along y and `l` along z before the yaw rotation is applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub occlusion: u8,
}

impl Box3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64, occlusion: u8) -> Result<Self, GeometryError> {
        if !center.iter().chain(dims.iter()).all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(GeometryError::InvalidBox3D("non-finite value".into()));
        }
        if dims.iter().any(|&d| d <= 0.0) {
            return Err(GeometryError::InvalidBox3D(format!(
                "dimensions must be positive, got {dims:?}"
            )));
        }
        if occlusion > 2 {
            return Err(GeometryError::InvalidBox3D(format!(
                "occlusion {occlusion} not in {{0, 1, 2}}"
            )));
        }
        Ok(Box3D {
            center,
            dims,
            yaw,
            occlusion,
        })
    }

    /// Euclidean distance between the two cuboid centers.
    pub fn center_distance(&self, other: &Box3D) -> f64 {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        let dz = self.center[2] - other.center[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    /// Maps a point given in the box's local frame (axis-aligned, origin at the
    /// center) into the camera frame.
    pub fn local_to_camera(&self, local: [f64; 3], axis: YawAxis) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let [x, y, z] = local;
        let r = match axis {
            YawAxis::CameraY => [c * x + s * z, y, -s * x + c * z],
            YawAxis::CameraZ => [c * x - s * y, s * x + c * y, z],
        };
        [
            r[0] + self.center[0],
            r[1] + self.center[1],
            r[2] + self.center[2],
        ]
    }

    /// The eight cuboid corners in the camera frame.
    pub fn corners(&self, axis: YawAxis) -> [[f64; 3]; 8] {
        let [w, h, l] = self.dims;
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -0.5 } else { 0.5 };
            let sy = if i & 2 == 0 { -0.5 } else { 0.5 };
            let sz = if i & 4 == 0 { -0.5 } else { 0.5 };
            *corner = self.local_to_camera([sx * w, sy * h, sz * l], axis);
        }
        out
    }
}

/// Axis the yaw angle rotates about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum YawAxis {
    /// Camera-frame vertical axis; the usual choice for upright pedestrians.
    #[default]
    CameraY,
    CameraZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_w: u32,
    pub image_h: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, image_w: u32, image_h: u32) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite principal point".into()));
        }
        if image_w == 0 || image_h == 0 {
            return Err(GeometryError::InvalidCamera(format!(
                "image dimensions must be positive, got {image_w}x{image_h}"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            image_w,
            image_h,
        })
    }

    /// Pinhole projection. Does not check the sign of `z`.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        )
    }

    /// Half-open image membership test `[0, w) x [0, h)`.
    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.image_w as f64 && v >= 0.0 && v < self.image_h as f64
    }
}

/// Projects the eight corners of `bx` and returns their axis-aligned hull
/// (not clipped to the image).
pub fn project_box3d(bx: &Box3D, cam: &CameraIntrinsics) -> Result<Box2D, GeometryError> {
    project_box3d_with_axis(bx, cam, YawAxis::default())
}

pub fn project_box3d_with_axis(
    bx: &Box3D,
    cam: &CameraIntrinsics,
    axis: YawAxis,
) -> Result<Box2D, GeometryError> {
    let mut hull = Box2D {
        x_min: f64::INFINITY,
        y_min: f64::INFINITY,
        x_max: f64::NEG_INFINITY,
        y_max: f64::NEG_INFINITY,
    };
    for corner in bx.corners(axis) {
        if !(corner[2] > 0.0) {
            return Err(GeometryError::BehindCamera {
                x: corner[0],
                y: corner[1],
                z: corner[2],
            });
        }
        let (u, v) = cam.project(corner);
        hull.x_min = hull.x_min.min(u);
        hull.y_min = hull.y_min.min(v);
        hull.x_max = hull.x_max.max(u);
        hull.y_max = hull.y_max.max(v);
    }
    Ok(hull)
}

/// True when the cuboid center lies in front of the camera and projects inside the image.
pub fn in_fov(bx: &Box3D, cam: &CameraIntrinsics) -> bool {
    if !(bx.center[2] > 0.0) {
        return false;
    }
    let (u, v) = cam.project(bx.center);
    cam.in_image(u, v)
}

/// Keeps boxes whose center is visible to the camera, preserving order.
pub fn fov_filter(boxes: &[Box3D], cam: &CameraIntrinsics) -> Vec<Box3D> {
    boxes.iter().filter(|b| in_fov(b, cam)).copied().collect()
}
