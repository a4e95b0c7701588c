use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{rot_z, BBox2D, CameraIntrinsics, GeometryError, Pose};

/// Samples per circle when projecting a cylinder silhouette.
pub const CYLINDER_SAMPLES: usize = 32;

/// Points closer than this to the camera plane are treated as not visible.
pub(crate) const NEAR_PLANE: f64 = 1e-3;

/// Vertical cylinder standing on the ground (no yaw).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderModel {
    pub center: Vector3<f64>,
    pub height: f64,
    pub radius: f64,
    pub label: String,
}

/// Box with `dims = (w, l, h)` along its local x, y, z axes, rotated by `yaw` about z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuboidModel {
    pub center: Vector3<f64>,
    pub dims: Vector3<f64>,
    pub yaw: f64,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum LandmarkModel {
    Cylinder(CylinderModel),
    Cuboid(CuboidModel),
}

impl CylinderModel {
    /// Cylinder resting on `z = 0` at ground position `(x, y)`.
    pub fn grounded(x: f64, y: f64, height: f64, radius: f64, label: impl Into<String>) -> Self {
        Self {
            center: Vector3::new(x, y, 0.5 * height),
            height,
            radius,
            label: label.into(),
        }
    }

    /// Bottom-circle samples followed by top-circle samples.
    pub fn sample_offsets(&self) -> Vec<Vector3<f64>> {
        let half = 0.5 * self.height;
        let mut out = Vec::with_capacity(2 * CYLINDER_SAMPLES);
        for z in [-half, half] {
            for k in 0..CYLINDER_SAMPLES {
                let a = std::f64::consts::TAU * k as f64 / CYLINDER_SAMPLES as f64;
                out.push(Vector3::new(self.radius * a.cos(), self.radius * a.sin(), z));
            }
        }
        out
    }
}

impl CuboidModel {
    pub fn grounded(x: f64, y: f64, dims: Vector3<f64>, yaw: f64, label: impl Into<String>) -> Self {
        Self {
            center: Vector3::new(x, y, 0.5 * dims.z),
            dims,
            yaw: wrap_angle(yaw),
            label: label.into(),
        }
    }

    /// Corner offsets in the cuboid's local (unrotated) frame. Corners 0..4 are
    /// the bottom face in counter-clockwise order, 4..8 the top face.
    pub fn local_corners(&self) -> [Vector3<f64>; 8] {
        let h = self.dims * 0.5;
        let ring = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
        let mut out = [Vector3::zeros(); 8];
        for (k, (sx, sy)) in ring.iter().enumerate() {
            out[k] = Vector3::new(sx * h.x, sy * h.y, -h.z);
            out[k + 4] = Vector3::new(sx * h.x, sy * h.y, h.z);
        }
        out
    }

    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let r = rot_z(self.yaw);
        self.local_corners().map(|c| r * c + self.center)
    }

    /// The 12 edges as corner index pairs.
    pub const EDGES: [(usize, usize); 12] = [
        (0, 1),
        (1, 2),
        (2, 3),
        (3, 0),
        (4, 5),
        (5, 6),
        (6, 7),
        (7, 4),
        (0, 4),
        (1, 5),
        (2, 6),
        (3, 7),
    ];
}

impl LandmarkModel {
    pub fn center(&self) -> &Vector3<f64> {
        match self {
            LandmarkModel::Cylinder(c) => &c.center,
            LandmarkModel::Cuboid(c) => &c.center,
        }
    }

    pub fn center_mut(&mut self) -> &mut Vector3<f64> {
        match self {
            LandmarkModel::Cylinder(c) => &mut c.center,
            LandmarkModel::Cuboid(c) => &mut c.center,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            LandmarkModel::Cylinder(c) => &c.label,
            LandmarkModel::Cuboid(c) => &c.label,
        }
    }

    pub fn shape_name(&self) -> &'static str {
        match self {
            LandmarkModel::Cylinder(_) => "cylinder",
            LandmarkModel::Cuboid(_) => "cuboid",
        }
    }

    /// Full height of the model along its vertical axis.
    pub fn height(&self) -> f64 {
        match self {
            LandmarkModel::Cylinder(c) => c.height,
            LandmarkModel::Cuboid(c) => c.dims.z,
        }
    }

    pub fn yaw(&self) -> f64 {
        match self {
            LandmarkModel::Cylinder(_) => 0.0,
            LandmarkModel::Cuboid(c) => c.yaw,
        }
    }

    /// Points whose projections bound the silhouette, in the model's parent frame.
    pub fn sample_points(&self) -> Vec<Vector3<f64>> {
        match self {
            LandmarkModel::Cylinder(c) => c.sample_offsets().into_iter().map(|o| o + c.center).collect(),
            LandmarkModel::Cuboid(c) => c.corners().to_vec(),
        }
    }

    /// Same shape re-expressed in another frame: `frame_from_parent` maps the
    /// current parent frame into the new one. The vertical axis is assumed to
    /// stay vertical, so only yaw is carried over.
    pub fn transformed_planar(&self, frame_from_parent: &Pose) -> LandmarkModel {
        let mut out = self.clone();
        *out.center_mut() = frame_from_parent.apply(self.center());
        if let LandmarkModel::Cuboid(c) = &mut out {
            let axis = frame_from_parent.rotation() * (rot_z(c.yaw) * Vector3::x());
            c.yaw = wrap_angle(axis.y.atan2(axis.x));
        }
        out
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

/// Result of projecting a model silhouette into an image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedBox {
    /// Box clipped to the image.
    pub bbox: BBox2D,
    /// Unclipped extent of the visible samples.
    pub full: BBox2D,
    /// Set when the box was clipped or some samples were behind the camera.
    pub clamped: bool,
    /// Sample index attaining `x_min, y_min, x_max, y_max` of `full`.
    pub extremes: [usize; 4],
    /// Which sides of `bbox` were cut by the image border.
    pub side_clamped: [bool; 4],
}

impl ProjectedBox {
    /// Clipped area over unclipped area.
    pub fn visible_fraction(&self) -> f64 {
        let full = self.full.area();
        if full <= 0.0 {
            0.0
        } else {
            (self.bbox.area() / full).clamp(0.0, 1.0)
        }
    }
}

/// Projects camera-frame sample points and takes the axis-aligned extent.
pub(crate) fn bbox_of_camera_points(
    points_cam: &[Vector3<f64>],
    intr: &CameraIntrinsics,
) -> Result<ProjectedBox, GeometryError> {
    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut extremes = [usize::MAX; 4];
    let mut behind = 0usize;
    for (k, p) in points_cam.iter().enumerate() {
        if p.z <= NEAR_PLANE {
            behind += 1;
            continue;
        }
        let px = intr.project_unchecked(p);
        if px.x < lo.x {
            lo.x = px.x;
            extremes[0] = k;
        }
        if px.y < lo.y {
            lo.y = px.y;
            extremes[1] = k;
        }
        if px.x > hi.x {
            hi.x = px.x;
            extremes[2] = k;
        }
        if px.y > hi.y {
            hi.y = px.y;
            extremes[3] = k;
        }
    }
    if behind == points_cam.len() {
        return Err(GeometryError::ModelBehindCamera);
    }
    let full = BBox2D::new(lo.x, lo.y, hi.x, hi.y)?;
    let bbox = full.clamp_to(intr).ok_or(GeometryError::ModelOutsideImage)?;
    let side_clamped = [
        full.x_min < 0.0,
        full.y_min < 0.0,
        full.x_max > intr.width,
        full.y_max > intr.height,
    ];
    Ok(ProjectedBox {
        bbox,
        full,
        clamped: behind > 0 || side_clamped.iter().any(|&c| c),
        extremes,
        side_clamped,
    })
}

/// Axis-aligned image box enclosing a model's projection.
///
/// Cylinders use [`CYLINDER_SAMPLES`] points on each of the top and bottom
/// circles; cuboids use their 8 corners. The box is clipped to the image and
/// `clamped` is raised when clipping happened.
pub fn project_model_bbox(
    model: &LandmarkModel,
    cam_from_ground: &Pose,
    intr: &CameraIntrinsics,
) -> Result<ProjectedBox, GeometryError> {
    let pts: Vec<Vector3<f64>> = model.sample_points().iter().map(|p| cam_from_ground.apply(p)).collect();
    bbox_of_camera_points(&pts, intr)
}

/// Projected width of the top circle over that of the bottom circle.
///
/// A value away from the ratio implied by perspective alone hints at a tilted
/// ground estimate; it is reported, not corrected.
pub fn cylinder_width_ratio(model: &CylinderModel, cam_from_ground: &Pose, intr: &CameraIntrinsics) -> Option<f64> {
    let pts: Vec<Vector3<f64>> = model
        .sample_offsets()
        .into_iter()
        .map(|o| cam_from_ground.apply(&(o + model.center)))
        .collect();
    let (bottom, top) = pts.split_at(CYLINDER_SAMPLES);
    let width = |ring: &[Vector3<f64>]| -> Option<f64> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in ring {
            if p.z <= NEAR_PLANE {
                return None;
            }
            let u = intr.project_unchecked(p).x;
            lo = lo.min(u);
            hi = hi.max(u);
        }
        Some(hi - lo)
    };
    let (wt, wb) = (width(top)?, width(bottom)?);
    (wb > 0.0).then(|| wt / wb)
}
