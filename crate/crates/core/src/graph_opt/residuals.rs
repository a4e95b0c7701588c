//! Residuals and analytic Jacobians.
//!
//! Poses are camera-in-world and are perturbed on the right, `x ← x·exp(δ)`
//! with `δ = [ρ, θ]`. Landmark parameters are the centre (3) for cylinders and
//! centre plus yaw (4) for cuboids.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Matrix3x6, Matrix4x6, SMatrix, Vector2, Vector3, Vector4, Vector6};
use thiserror::Error;

use crate::geometry::{
    hat, project_model_bbox, rot_z, se3_right_jacobian_inv, BBox2D, CameraIntrinsics, GeometryError, GroundPlane,
    LandmarkModel, Pose,
};

pub type Matrix6 = SMatrix<f64, 6, 6>;
pub type Matrix4x3 = SMatrix<f64, 4, 3>;

/// Sharpness of the smoothed truncation residual, 1/m.
pub const TRUNCATION_SHARPNESS: f64 = 100.0;
/// Factor applied to bbox residuals whose predicted box touches the image border.
pub const CLAMP_DOWNWEIGHT: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResidualError {
    #[error("point is behind the camera (depth {0})")]
    PointBehindCamera(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Number of optimized parameters of a landmark.
pub fn landmark_dof(l: &LandmarkModel) -> usize {
    match l {
        LandmarkModel::Cylinder(_) => 3,
        LandmarkModel::Cuboid(_) => 4,
    }
}

/// Applies a parameter increment to a landmark.
pub fn retract_landmark(l: &LandmarkModel, delta: &[f64]) -> LandmarkModel {
    let mut out = l.clone();
    *out.center_mut() += Vector3::new(delta[0], delta[1], delta[2]);
    if let LandmarkModel::Cuboid(c) = &mut out {
        c.yaw = crate::geometry::wrap_angle(c.yaw + delta[3]);
    }
    out
}

// ---------------------------------------------------------------------------
// odometry

/// `log((x_i · u)⁻¹ · x_j)`.
pub fn residual_odometry(xi: &Pose, xj: &Pose, u: &Pose) -> Vector6<f64> {
    xi.compose(u).between(xj).log()
}

/// Residual and Jacobians with respect to `x_i` and `x_j`.
pub fn odometry_jacobians(xi: &Pose, xj: &Pose, u: &Pose) -> (Vector6<f64>, Matrix6, Matrix6) {
    let r = residual_odometry(xi, xj, u);
    let jinv = se3_right_jacobian_inv(&r);
    let a = xi.between(xj);
    let ji = -jinv * a.inverse().adjoint();
    (r, ji, jinv)
}

// ---------------------------------------------------------------------------
// reprojection

/// A world point in the camera frame with its derivatives w.r.t. the pose and the point.
fn to_camera(x: &Pose, p: &Vector3<f64>) -> (Vector3<f64>, Matrix3x6<f64>, Matrix3<f64>) {
    let rt = x.rotation().transpose();
    let pc = rt * (p - x.translation());
    let mut jx = Matrix3x6::zeros();
    jx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity()));
    jx.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(&pc));
    (pc, jx, rt)
}

/// `π(x⁻¹ p) − obs` with Jacobians w.r.t. the point and the pose.
pub fn reprojection_single(
    p: &Vector3<f64>,
    x: &Pose,
    obs: &Vector2<f64>,
    intr: &CameraIntrinsics,
) -> Result<(Vector2<f64>, Matrix2x3<f64>, SMatrix<f64, 2, 6>), ResidualError> {
    let (pc, jx, jp) = to_camera(x, p);
    if pc.z <= 0.0 {
        return Err(ResidualError::PointBehindCamera(pc.z));
    }
    let jpi = intr.project_jacobian(&pc);
    Ok((intr.project_unchecked(&pc) - obs, jpi * jp, jpi * jx))
}

/// Stacked reprojection residual of one point seen in frames `i` and `i+1`.
pub fn residual_reprojection(
    p: &Vector3<f64>,
    xi: &Pose,
    xj: &Pose,
    obs_i: &Vector2<f64>,
    obs_j: &Vector2<f64>,
    intr: &CameraIntrinsics,
) -> Result<Vector4<f64>, ResidualError> {
    Ok(reprojection_jacobians(p, xi, xj, obs_i, obs_j, intr)?.0)
}

/// Residual and Jacobians w.r.t. the point, `x_i` and `x_{i+1}`.
pub fn reprojection_jacobians(
    p: &Vector3<f64>,
    xi: &Pose,
    xj: &Pose,
    obs_i: &Vector2<f64>,
    obs_j: &Vector2<f64>,
    intr: &CameraIntrinsics,
) -> Result<(Vector4<f64>, Matrix4x3, Matrix4x6<f64>, Matrix4x6<f64>), ResidualError> {
    let (ri, jpi, jxi) = reprojection_single(p, xi, obs_i, intr)?;
    let (rj, jpj, jxj) = reprojection_single(p, xj, obs_j, intr)?;
    let r = Vector4::new(ri.x, ri.y, rj.x, rj.y);
    let mut jp = Matrix4x3::zeros();
    jp.fixed_view_mut::<2, 3>(0, 0).copy_from(&jpi);
    jp.fixed_view_mut::<2, 3>(2, 0).copy_from(&jpj);
    let mut ji = Matrix4x6::zeros();
    ji.fixed_view_mut::<2, 6>(0, 0).copy_from(&jxi);
    let mut jj = Matrix4x6::zeros();
    jj.fixed_view_mut::<2, 6>(2, 0).copy_from(&jxj);
    Ok((r, jp, ji, jj))
}

// ---------------------------------------------------------------------------
// bounding box

/// Derivative of a world sample point w.r.t. the landmark parameters.
fn sample_jacobian(l: &LandmarkModel, k: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(3, landmark_dof(l));
    j.view_mut((0, 0), (3, 3)).copy_from(&Matrix3::identity());
    if let LandmarkModel::Cuboid(c) = l {
        let arm = rot_z(c.yaw) * c.local_corners()[k];
        let d = Vector3::z().cross(&arm);
        j.view_mut((0, 3), (3, 1)).copy_from(&d);
    }
    j
}

/// Predicted minus observed box, scaled by [`CLAMP_DOWNWEIGHT`] when clamped.
pub fn residual_bbox(
    l: &LandmarkModel,
    x: &Pose,
    obs: &BBox2D,
    intr: &CameraIntrinsics,
) -> Result<Vector4<f64>, ResidualError> {
    Ok(bbox_jacobians(l, x, obs, intr)?.0)
}

/// Residual and (sub)gradient Jacobians w.r.t. the landmark and the pose.
///
/// Each box side follows the sample point that attains it; sides cut by the
/// image border are constant.
pub fn bbox_jacobians(
    l: &LandmarkModel,
    x: &Pose,
    obs: &BBox2D,
    intr: &CameraIntrinsics,
) -> Result<(Vector4<f64>, DMatrix<f64>, Matrix4x6<f64>, bool), ResidualError> {
    let proj = project_model_bbox(l, &x.inverse(), intr)?;
    let scale = if proj.clamped { CLAMP_DOWNWEIGHT } else { 1.0 };
    let pred = proj.bbox.as_array();
    let o = obs.as_array();
    let r = Vector4::from_fn(|k, _| scale * (pred[k] - o[k]));
    let samples = l.sample_points();
    let mut jl = DMatrix::zeros(4, landmark_dof(l));
    let mut jx = Matrix4x6::zeros();
    for side in 0..4 {
        if proj.side_clamped[side] {
            continue;
        }
        let k = proj.extremes[side];
        let (pc, dx, dp) = to_camera(x, &samples[k]);
        let jpi = intr.project_jacobian(&pc);
        // sides 0, 2 are u; 1, 3 are v
        let row = jpi.row(side % 2).into_owned();
        jx.row_mut(side).copy_from(&(scale * row * dx));
        let dl = (row * dp) * sample_jacobian(l, k);
        jl.row_mut(side).copy_from(&(scale * dl));
    }
    Ok((r, jl, jx, proj.clamped))
}

// ---------------------------------------------------------------------------
// point inside landmark volume

/// Point in the landmark's local frame (centre origin, axes along the model)
/// and the derivative of that point w.r.t. the landmark parameters.
fn landmark_local(p: &Vector3<f64>, l: &LandmarkModel) -> (Vector3<f64>, Matrix3<f64>, DMatrix<f64>) {
    let d = p - l.center();
    match l {
        LandmarkModel::Cylinder(_) => {
            let mut jl = DMatrix::zeros(3, 3);
            jl.view_mut((0, 0), (3, 3)).copy_from(&(-Matrix3::identity()));
            (d, Matrix3::identity(), jl)
        }
        LandmarkModel::Cuboid(c) => {
            let rinv = rot_z(-c.yaw);
            let q = rinv * d;
            let (s, co) = c.yaw.sin_cos();
            // d/dyaw of Rz(-yaw)
            let drinv = Matrix3::new(-s, co, 0.0, -co, -s, 0.0, 0.0, 0.0, 0.0);
            let mut jl = DMatrix::zeros(3, 4);
            jl.view_mut((0, 0), (3, 3)).copy_from(&(-rinv));
            jl.view_mut((0, 3), (3, 1)).copy_from(&(drinv * d));
            (q, rinv, jl)
        }
    }
}

fn half_extents(l: &LandmarkModel) -> Vector3<f64> {
    match l {
        LandmarkModel::Cylinder(c) => Vector3::new(c.radius, c.radius, 0.5 * c.height),
        LandmarkModel::Cuboid(c) => 0.5 * c.dims,
    }
}

fn signed_excess(q: f64, h: f64) -> f64 {
    q.signum() * (q.abs() - h).max(0.0)
}

/// Exact volume violation: zero inside the model, otherwise the signed
/// overshoot per axis (radial overshoot along the radial direction for cylinders).
pub fn truncation_residual(p: &Vector3<f64>, l: &LandmarkModel) -> Vector3<f64> {
    let (q, _, _) = landmark_local(p, l);
    let h = half_extents(l);
    match l {
        LandmarkModel::Cylinder(c) => {
            let rho = q.xy().norm();
            let v = (rho - c.radius).max(0.0);
            let xy = if rho > 0.0 {
                q.xy() * (v / rho)
            } else {
                Vector2::zeros()
            };
            Vector3::new(xy.x, xy.y, signed_excess(q.z, h.z))
        }
        LandmarkModel::Cuboid(_) => Vector3::from_fn(|k, _| signed_excess(q[k], h[k])),
    }
}

fn softplus(x: f64) -> f64 {
    let k = TRUNCATION_SHARPNESS;
    let z = k * x;
    if z > 30.0 {
        x + (-z).exp().ln_1p() / k
    } else {
        z.exp().ln_1p() / k
    }
}

fn sigmoid(x: f64) -> f64 {
    let z = TRUNCATION_SHARPNESS * x;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smooth two-sided excess `softplus(q − h) − softplus(−q − h)` and its derivative.
fn smooth_excess(q: f64, h: f64) -> (f64, f64) {
    (softplus(q - h) - softplus(-q - h), sigmoid(q - h) + sigmoid(-q - h))
}

/// Smoothed truncation residual used by the solver.
pub fn residual_point_landmark(p: &Vector3<f64>, l: &LandmarkModel) -> Vector3<f64> {
    point_landmark_jacobians(p, l).0
}

/// Residual and Jacobians w.r.t. the point and the landmark parameters.
pub fn point_landmark_jacobians(p: &Vector3<f64>, l: &LandmarkModel) -> (Vector3<f64>, Matrix3<f64>, DMatrix<f64>) {
    let (q, dq_dp, dq_dl) = landmark_local(p, l);
    let h = half_extents(l);
    let mut r = Vector3::zeros();
    let mut dr_dq = Matrix3::zeros();
    match l {
        LandmarkModel::Cylinder(c) => {
            let rho = q.xy().norm();
            if rho > 1e-12 {
                let n = q.xy() / rho;
                let v = softplus(rho - c.radius);
                let dv = sigmoid(rho - c.radius);
                let xy = n * v;
                r.x = xy.x;
                r.y = xy.y;
                // d(v n)/dq = v/ρ (I − n nᵀ) + v' n nᵀ
                let nn = n * n.transpose();
                let block = (nalgebra::Matrix2::identity() - nn) * (v / rho) + nn * dv;
                dr_dq.fixed_view_mut::<2, 2>(0, 0).copy_from(&block);
            }
            let (z, dz) = smooth_excess(q.z, h.z);
            r.z = z;
            dr_dq[(2, 2)] = dz;
        }
        LandmarkModel::Cuboid(_) => {
            for k in 0..3 {
                let (v, dv) = smooth_excess(q[k], h[k]);
                r[k] = v;
                dr_dq[(k, k)] = dv;
            }
        }
    }
    (r, dr_dq * dq_dp, DMatrix::from_fn(3, 3, |i, j| dr_dq[(i, j)]) * dq_dl)
}

// ---------------------------------------------------------------------------
// ground plane

/// World ground plane expressed in the camera frame of pose `x`.
pub fn plane_in_camera(x: &Pose, ground_world: &GroundPlane) -> (Vector3<f64>, f64) {
    let n = x.rotation().transpose() * ground_world.normal;
    (n, ground_world.offset - ground_world.normal.dot(x.translation()))
}

/// `(n_pred − n_ref) + (d_pred − d_ref)·n_ref` for the ground seen from pose `x`.
pub fn residual_ground_plane(x: &Pose, ground_world: &GroundPlane, reference_cam: &GroundPlane) -> Vector3<f64> {
    ground_plane_jacobian(x, ground_world, reference_cam).0
}

pub fn ground_plane_jacobian(
    x: &Pose,
    ground_world: &GroundPlane,
    reference_cam: &GroundPlane,
) -> (Vector3<f64>, Matrix3x6<f64>) {
    let (n, d) = plane_in_camera(x, ground_world);
    let nr = reference_cam.normal;
    let r = (n - nr) + nr * (d - reference_cam.offset);
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-nr * n.transpose()));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(&n));
    (r, j)
}

/// Height of the landmark centre above the ground minus half its height.
pub fn residual_ground_landmark(l: &LandmarkModel) -> f64 {
    l.center().z - 0.5 * l.height()
}
