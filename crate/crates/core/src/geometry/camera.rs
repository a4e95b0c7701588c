use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{GeometryError, GroundPlane, Pose};

/// Pinhole intrinsics without distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width
            && self.cy > 0.0
            && self.cy < self.height;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics)
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if !(p.z > 0.0) {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// d(pixel)/d(point) at a camera-frame point with positive depth.
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// `K⁻¹ · (u, v, 1)`: the normalized ray through a pixel at unit depth.
    pub fn unproject(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.x <= self.width && px.y >= 0.0 && px.y <= self.height
    }
}

/// `pixel = π(point)`, the pinhole projection of a camera-frame point.
pub fn project(intr: &CameraIntrinsics, point_cam: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    intr.project(point_cam)
}

/// Intersects the ray through `pixel` with the ground plane `z = 0`.
///
/// `cam_from_ground` maps ground-frame points into the camera frame
/// (`X_c = R X_g + t`). The camera centre in the ground frame is `C = -Rᵀt`
/// and the pixel lifted to the ground frame is `m = Rᵀ(K⁻¹[u v 1]ᵀ - t)`; the
/// returned point is `C + λ (m - C)` with `λ > 0` chosen so that `z = 0`.
pub fn backproject_ground(
    intr: &CameraIntrinsics,
    cam_from_ground: &Pose,
    pixel: &Vector2<f64>,
) -> Result<Vector3<f64>, GeometryError> {
    let rt = cam_from_ground.rotation().transpose();
    let center = -(rt * cam_from_ground.translation());
    let m = rt * (intr.unproject(pixel) - cam_from_ground.translation());
    let dir = m - center;
    if dir.z.abs() <= 1e-9 {
        return Err(GeometryError::RayParallelToPlane);
    }
    let lambda = -center.z / dir.z;
    if !(lambda > 0.0) {
        return Err(GeometryError::IntersectionBehindCamera(lambda));
    }
    let mut x = center + lambda * dir;
    // exact by construction; remove round-off in the plane coordinate
    x.z = 0.0;
    Ok(x)
}

/// Pose of a ground frame expressed in the camera frame, built from a plane
/// estimated in camera coordinates.
///
/// The ground frame has its origin at the foot of the camera, `z` along the
/// plane normal (pointing toward the camera side), and `x` along the camera
/// viewing direction projected onto the plane.
pub fn cam_from_ground_for_plane(plane_cam: &GroundPlane) -> Result<Pose, GeometryError> {
    cam_from_ground_with_heading(plane_cam, &Vector3::z())
}

/// Like [`cam_from_ground_for_plane`] but with the ground `x` axis along
/// `heading_cam` (a camera-frame direction) projected onto the plane.
pub fn cam_from_ground_with_heading(
    plane_cam: &GroundPlane,
    heading_cam: &Vector3<f64>,
) -> Result<Pose, GeometryError> {
    let mut n = plane_cam.normal;
    let mut d = plane_cam.offset;
    // orient the normal so the camera origin lies on the positive side: n·0 - d > 0
    if d > 0.0 {
        n = -n;
        d = -d;
    }
    let fx = heading_cam - n * n.dot(heading_cam);
    if fx.norm() < 1e-9 {
        return Err(GeometryError::RayParallelToPlane);
    }
    let ex = fx.normalize();
    let ez = n;
    let ey = ez.cross(&ex);
    // columns are the ground axes in camera coordinates
    let r = nalgebra::Matrix3::from_columns(&[ex, ey, ez]);
    // ground origin = foot of the camera on the plane: point with n·X = d closest to 0
    let origin = n * d;
    Pose::new(r, origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn fixture() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    /// Camera 1 m above the ground looking straight down, camera x aligned with ground x.
    fn nadir() -> Pose {
        // camera axes in ground coordinates: x_c = x_g, y_c = -y_g, z_c = -z_g
        let r_gc = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let ground_from_cam = Pose::new(r_gc, Vector3::new(0.0, 0.0, 1.0)).unwrap();
        ground_from_cam.inverse()
    }

    #[test]
    fn project_examples() {
        let k = fixture();
        assert_eq!(
            project(&k, &Vector3::new(0.0, 0.0, 2.0)).unwrap(),
            Vector2::new(320.0, 240.0)
        );
        assert_eq!(
            project(&k, &Vector3::new(1.0, 0.0, 2.0)).unwrap(),
            Vector2::new(570.0, 240.0)
        );
        assert!(matches!(
            project(&k, &Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(project(&k, &Vector3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn backproject_nadir_examples() {
        let k = fixture();
        let x = backproject_ground(&k, &nadir(), &Vector2::new(320.0, 240.0)).unwrap();
        assert!(x.norm() < 1e-12);
        let x = backproject_ground(&k, &nadir(), &Vector2::new(820.0, 240.0)).unwrap();
        assert!((x - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn backproject_horizon_ray_is_parallel() {
        let k = fixture();
        // level camera 1 m high looking along ground +x
        let r_gc = Matrix3::from_columns(&[
            Vector3::new(0.0, -1.0, 0.0),
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(1.0, 0.0, 0.0),
        ]);
        let cam_from_ground = Pose::new(r_gc, Vector3::new(0.0, 0.0, 1.0)).unwrap().inverse();
        assert!(matches!(
            backproject_ground(&k, &cam_from_ground, &Vector2::new(320.0, 240.0)),
            Err(GeometryError::RayParallelToPlane)
        ));
        // above the horizon: the ray meets the plane behind the camera
        assert!(matches!(
            backproject_ground(&k, &cam_from_ground, &Vector2::new(320.0, 100.0)),
            Err(GeometryError::IntersectionBehindCamera(_))
        ));
        let hit = backproject_ground(&k, &cam_from_ground, &Vector2::new(320.0, 365.0)).unwrap();
        assert!((hit - Vector3::new(4.0, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn plane_frame_roundtrip() {
        let plane = GroundPlane::new(Vector3::new(0.0, -0.98, -0.2), 0.9).unwrap();
        let pose = cam_from_ground_for_plane(&plane).unwrap();
        // ground origin and a point along ground x both lie on the plane
        for g in [Vector3::zeros(), Vector3::new(2.0, 1.0, 0.0)] {
            let c = pose.apply(&g);
            assert!(plane.signed_distance(&c).abs() < 1e-12);
        }
        // camera is above the ground
        assert!(pose.inverse().translation().z > 0.0);
    }
}
