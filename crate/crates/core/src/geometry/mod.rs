//! Camera model, rigid transforms, ground plane and model projection.

mod bbox;
mod camera;
mod model;
mod se3;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bbox::{iou, BBox2D};
pub use camera::{
    backproject_ground, cam_from_ground_for_plane, cam_from_ground_with_heading, project, CameraIntrinsics,
};
pub(crate) use model::NEAR_PLANE;
pub use model::{
    cylinder_width_ratio, project_model_bbox, wrap_angle, CuboidModel, CylinderModel, LandmarkModel, ProjectedBox,
    CYLINDER_SAMPLES,
};
pub use se3::{
    apply_pose, hat, rot_z, se3_right_jacobian, se3_right_jacobian_inv, so3_exp, so3_log, so3_right_jacobian,
    so3_right_jacobian_inv, Pose,
};

#[cfg(test)]
pub(crate) use camera::tests_support;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("viewing ray is parallel to the ground plane")]
    RayParallelToPlane,
    #[error("ray meets the ground plane behind the camera (lambda = {0})")]
    IntersectionBehindCamera(f64),
    #[error("model is entirely behind the camera")]
    ModelBehindCamera,
    #[error("model projects entirely outside the image")]
    ModelOutsideImage,
    #[error("rotation is not in SO(3): orthogonality error {ortho_error:e}, det {det}")]
    InvalidRotation { ortho_error: f64, det: f64 },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid camera intrinsics")]
    InvalidIntrinsics,
    #[error("invalid bounding box")]
    InvalidBox,
    #[error("plane normal must be non-zero")]
    DegeneratePlane,
}

/// Plane `{X : normal · X = offset}` with a unit normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl GroundPlane {
    /// Normalizes `normal` (and scales `offset` accordingly).
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self, GeometryError> {
        let n = normal.norm();
        if !(n > 1e-12) || !offset.is_finite() {
            return Err(GeometryError::DegeneratePlane);
        }
        Ok(Self {
            normal: normal / n,
            offset: offset / n,
        })
    }

    /// The world ground `z = 0` with upward normal.
    pub fn horizontal() -> Self {
        Self {
            normal: Vector3::z(),
            offset: 0.0,
        }
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }

    /// The same plane expressed in another frame (`frame_from_here` maps points of
    /// the current frame into the target frame).
    pub fn transformed(&self, frame_from_here: &Pose) -> GroundPlane {
        let n = frame_from_here.rotation() * self.normal;
        GroundPlane {
            normal: n,
            offset: self.offset + n.dot(frame_from_here.translation()),
        }
    }

    /// Flips the sign convention so that `point` lies on the positive side.
    pub fn oriented_toward(&self, point: &Vector3<f64>) -> GroundPlane {
        if self.signed_distance(point) < 0.0 {
            GroundPlane {
                normal: -self.normal,
                offset: -self.offset,
            }
        } else {
            *self
        }
    }
}
