//! 3D object proposals from single-frame 2D detections.
//!
//! Cylinders are grounded from the point where a leg line meets the bottom of
//! the detection box. Cuboids are placed by sampling yaw and fitting the
//! grounded box to the detection. Both are gated on reprojected IOU.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classes::{ObjectDatabase, ShapeSpec};
use crate::geometry::{
    backproject_ground, iou, project_model_bbox, BBox2D, CameraIntrinsics, CuboidModel, CylinderModel, GroundPlane,
    LandmarkModel, Pose, NEAR_PLANE,
};
use crate::world_sim::{Frame, LineObs};

/// Proposals must reproject with IOU strictly above this.
pub const IOU_GATE: f64 = 0.3;
/// Cap on grounding hypotheses per detection.
pub const MAX_HYPOTHESES: usize = 5;

const LEG_MIN_LENGTH: f64 = 10.0;
const LEG_MAX_TILT: f64 = std::f64::consts::PI / 6.0;
const BOTTOM_STEP_FRACTION: f64 = 0.03;

const RANSAC_THRESHOLD: f64 = 0.02;
const RANSAC_ITERATIONS: usize = 100;
const RANSAC_SEED: u64 = 0x6772_6f75_6e64;

#[derive(Debug, Error, PartialEq)]
pub enum ProposalError {
    #[error("no grounding ray meets the ground plane")]
    NoGroundIntersection,
    #[error("class `{0}` has no {1} entry in the object database")]
    WrongShape(String, &'static str),
    #[error("detection index {0} out of range")]
    NoSuchDetection(usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
}

/// A candidate 3D model for one detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal3D {
    /// Model in the ground frame of `cam_from_ground`.
    pub model: LandmarkModel,
    pub cam_from_ground: Pose,
    pub detection: usize,
    /// Geometric score `iou_with_bbox × visible fraction`.
    pub score: f64,
    /// Projection of the model centre.
    pub centroid_px: Vector2<f64>,
    /// Reprojected model box (clipped).
    pub bbox: BBox2D,
    pub iou_with_bbox: f64,
    pub clamped: bool,
    /// Ranking key: IOU for cylinders, IOU plus line alignment for cuboids.
    pub rank: f64,
}

impl Proposal3D {
    fn evaluate(
        model: LandmarkModel,
        cam_from_ground: &Pose,
        detection: usize,
        det_box: &BBox2D,
        intr: &CameraIntrinsics,
    ) -> Option<Self> {
        let proj = project_model_bbox(&model, cam_from_ground, intr).ok()?;
        let c = cam_from_ground.apply(model.center());
        if c.z <= NEAR_PLANE {
            return None;
        }
        let overlap = iou(&proj.bbox, det_box);
        Some(Self {
            cam_from_ground: *cam_from_ground,
            detection,
            score: (overlap * proj.visible_fraction()).clamp(0.0, 1.0),
            centroid_px: intr.project_unchecked(&c),
            bbox: proj.bbox,
            iou_with_bbox: overlap,
            clamped: proj.clamped,
            rank: overlap,
            model,
        })
    }

    /// The model in a frame reached by `frame_from_ground`.
    pub fn model_in(&self, frame_from_ground: &Pose) -> LandmarkModel {
        self.model.transformed_planar(frame_from_ground)
    }
}

fn passes_gate(p: &Proposal3D) -> bool {
    p.iou_with_bbox > IOU_GATE
}

fn detection_box(frame: &Frame, det: usize) -> Result<BBox2D, ProposalError> {
    frame
        .detections
        .get(det)
        .map(|d| d.bbox)
        .ok_or(ProposalError::NoSuchDetection(det))
}

/// Camera centre and its foot on the ground, in ground coordinates.
fn camera_foot(cam_from_ground: &Pose) -> Vector3<f64> {
    let c = -(cam_from_ground.rotation().transpose() * cam_from_ground.translation());
    Vector3::new(c.x, c.y, 0.0)
}

/// Lowest image row reached by the model, or `+∞` when part of it is behind the camera.
fn bottom_row(model: &LandmarkModel, cam_from_ground: &Pose, intr: &CameraIntrinsics) -> f64 {
    let mut y = f64::NEG_INFINITY;
    for p in model.sample_points() {
        let c = cam_from_ground.apply(&p);
        if c.z <= NEAR_PLANE {
            return f64::INFINITY;
        }
        y = y.max(intr.fy * c.y / c.z + intr.cy);
    }
    y
}

/// Distance `s` along a ground ray from the camera foot at which the cylinder's
/// lowest projected row equals `row`. The row decreases monotonically with `s`.
fn solve_cylinder_range(
    cyl: &CylinderModel,
    foot: &Vector3<f64>,
    dir: &Vector3<f64>,
    row: f64,
    cam_from_ground: &Pose,
    intr: &CameraIntrinsics,
) -> Option<f64> {
    let at = |s: f64| {
        let mut m = cyl.clone();
        m.center = Vector3::new(foot.x + s * dir.x, foot.y + s * dir.y, 0.5 * cyl.height);
        bottom_row(&LandmarkModel::Cylinder(m), cam_from_ground, intr) - row
    };
    let mut lo = cyl.radius + 1e-3;
    let mut hi = 50.0;
    if !(at(lo) > 0.0) || !(at(hi) < 0.0) {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Some(0.5 * (lo + hi))
}

fn is_leg_line(l: &LineObs) -> bool {
    let d = l.direction();
    l.length() >= LEG_MIN_LENGTH && d.x.abs().atan2(d.y.abs()) <= LEG_MAX_TILT
}

/// Grounding pixels `P′` and the image row each must reach.
fn grounding_candidates(frame: &Frame, det: usize, b: &BBox2D) -> Vec<Vector2<f64>> {
    let mut out: Vec<Vector2<f64>> = Vec::new();
    for l in frame.lines.iter().filter(|l| l.detection == det && is_leg_line(l)) {
        let d = l.direction();
        let t = (b.y_max - l.a.y) / d.y;
        let p = Vector2::new(l.a.x + t * d.x, b.y_max);
        if p.x < b.x_min || p.x > b.x_max {
            continue;
        }
        if out.iter().all(|q| (q - p).norm() > 0.5) {
            out.push(p);
        }
        if out.len() == MAX_HYPOTHESES {
            return out;
        }
    }
    if out.is_empty() {
        // no usable leg: hypothesize the contact row along -y from the box bottom
        let step = BOTTOM_STEP_FRACTION * b.height();
        let cx = b.center().x;
        out.extend((0..MAX_HYPOTHESES).map(|k| Vector2::new(cx, b.y_max - k as f64 * step)));
    }
    out
}

/// Cylinder proposals for detection `det`, in the ground frame of `cam_from_ground`.
pub fn cylinder_proposals(
    frame: &Frame,
    det: usize,
    cam_from_ground: &Pose,
    intr: &CameraIntrinsics,
    db: &ObjectDatabase,
) -> Result<Vec<Proposal3D>, ProposalError> {
    let b = detection_box(frame, det)?;
    let label = &frame.detections[det].label;
    let Some(ShapeSpec::Cylinder { dims: [h, r] }) = db.spec(label).map(|s| &s.shape) else {
        return Err(ProposalError::WrongShape(label.clone(), "cylinder"));
    };
    let template = CylinderModel::grounded(0.0, 0.0, *h, *r, label.clone());
    let foot = camera_foot(cam_from_ground);
    let candidates = grounding_candidates(frame, det, &b);
    let mut any_ground = false;
    let mut out = Vec::new();
    for p in candidates {
        let Ok(g) = backproject_ground(intr, cam_from_ground, &p) else {
            continue;
        };
        any_ground = true;
        let mut dir = g - foot;
        dir.z = 0.0;
        if dir.norm() < 1e-9 {
            continue;
        }
        let dir = dir.normalize();
        let Some(s) = solve_cylinder_range(&template, &foot, &dir, p.y, cam_from_ground, intr) else {
            continue;
        };
        let c = foot + s * dir;
        let model = LandmarkModel::Cylinder(CylinderModel::grounded(c.x, c.y, *h, *r, label.clone()));
        if let Some(prop) = Proposal3D::evaluate(model, cam_from_ground, det, &b, intr) {
            if passes_gate(&prop) {
                out.push(prop);
            }
        }
    }
    if !any_ground {
        return Err(ProposalError::NoGroundIntersection);
    }
    sort_by_rank(&mut out);
    Ok(out)
}

fn sort_by_rank(v: &mut [Proposal3D]) {
    v.sort_by(|a, b| b.rank.total_cmp(&a.rank));
}

fn angle_between_lines(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos()
}

/// `1 − mean(min angle to a projected edge) / (π/2)`; 0 when there are no lines.
fn line_alignment(model: &CuboidModel, cam_from_ground: &Pose, intr: &CameraIntrinsics, lines: &[&LineObs]) -> f64 {
    let corners = model.corners().map(|c| cam_from_ground.apply(&c));
    let edges: Vec<Vector2<f64>> = CuboidModel::EDGES
        .iter()
        .filter(|(i, j)| corners[*i].z > NEAR_PLANE && corners[*j].z > NEAR_PLANE)
        .map(|(i, j)| intr.project_unchecked(&corners[*j]) - intr.project_unchecked(&corners[*i]))
        .filter(|e| e.norm() > 1e-9)
        .collect();
    if lines.is_empty() || edges.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for l in lines {
        let d = l.direction();
        total += edges
            .iter()
            .map(|e| angle_between_lines(&d, e))
            .fold(f64::INFINITY, f64::min);
    }
    1.0 - total / lines.len() as f64 / std::f64::consts::FRAC_PI_2
}

/// Places a grounded cuboid of fixed yaw so that its projected box has the
/// detection's bottom row and horizontal centre.
fn fit_cuboid(
    template: &CuboidModel,
    start: Vector2<f64>,
    b: &BBox2D,
    cam_from_ground: &Pose,
    intr: &CameraIntrinsics,
) -> Option<CuboidModel> {
    let target = Vector2::new(0.5 * (b.x_min + b.x_max), b.y_max);
    let eval = |xy: &Vector2<f64>| -> Option<Vector2<f64>> {
        let mut m = template.clone();
        m.center.x = xy.x;
        m.center.y = xy.y;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut bottom = f64::NEG_INFINITY;
        for c in m.corners() {
            let p = cam_from_ground.apply(&c);
            if p.z <= NEAR_PLANE {
                return None;
            }
            let px = intr.project_unchecked(&p);
            lo = lo.min(px.x);
            hi = hi.max(px.x);
            bottom = bottom.max(px.y);
        }
        Some(Vector2::new(0.5 * (lo + hi), bottom) - target)
    };
    let mut xy = start;
    let mut f = eval(&xy)?;
    for _ in 0..50 {
        if f.norm() < 1e-10 {
            break;
        }
        let h = 1e-6;
        let fx = eval(&(xy + Vector2::new(h, 0.0)))?;
        let fy = eval(&(xy + Vector2::new(0.0, h)))?;
        let j = Matrix2::from_columns(&[(fx - f) / h, (fy - f) / h]);
        let step = j.try_inverse()? * f;
        // backtrack so the residual never grows
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let cand = xy - alpha * step;
            if let Some(fc) = eval(&cand) {
                if fc.norm() < f.norm() {
                    xy = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let mut m = template.clone();
    m.center.x = xy.x;
    m.center.y = xy.y;
    Some(m)
}

/// Cuboid proposals for detection `det` from `yaw_samples` yaw hypotheses over `[0, π)`.
pub fn cuboid_proposals(
    frame: &Frame,
    det: usize,
    cam_from_ground: &Pose,
    intr: &CameraIntrinsics,
    db: &ObjectDatabase,
    yaw_samples: usize,
) -> Result<Vec<Proposal3D>, ProposalError> {
    let b = detection_box(frame, det)?;
    let label = &frame.detections[det].label;
    let Some(ShapeSpec::Cuboid { dims }) = db.spec(label).map(|s| &s.shape) else {
        return Err(ProposalError::WrongShape(label.clone(), "cuboid"));
    };
    let dims = Vector3::from(*dims);
    let bottom_center = Vector2::new(b.center().x, b.y_max);
    let g =
        backproject_ground(intr, cam_from_ground, &bottom_center).map_err(|_| ProposalError::NoGroundIntersection)?;
    let foot = camera_foot(cam_from_ground);
    let mut away = g - foot;
    away.z = 0.0;
    let away = if away.norm() > 1e-9 {
        away.normalize()
    } else {
        Vector3::x()
    };
    let lines: Vec<&LineObs> = frame.lines.iter().filter(|l| l.detection == det).collect();
    let n = yaw_samples.max(1);
    let mut out = Vec::new();
    for k in 0..n {
        let yaw = std::f64::consts::PI * k as f64 / n as f64;
        let template = CuboidModel::grounded(0.0, 0.0, dims, yaw, label.clone());
        // the near face touches the bottom row; start half a footprint further away
        let start = g + away * 0.25 * (dims.x + dims.y);
        let Some(model) = fit_cuboid(&template, start.xy(), &b, cam_from_ground, intr) else {
            continue;
        };
        let align = line_alignment(&model, cam_from_ground, intr, &lines);
        if let Some(mut prop) = Proposal3D::evaluate(LandmarkModel::Cuboid(model), cam_from_ground, det, &b, intr) {
            if passes_gate(&prop) {
                prop.rank = prop.iou_with_bbox + align;
                out.push(prop);
            }
        }
    }
    sort_by_rank(&mut out);
    out.truncate(MAX_HYPOTHESES);
    Ok(out)
}

/// Proposals for any database class; empty for classes without a 3D entry.
pub fn proposals_for_detection(
    frame: &Frame,
    det: usize,
    cam_from_ground: &Pose,
    intr: &CameraIntrinsics,
    db: &ObjectDatabase,
    yaw_samples: usize,
) -> Vec<Proposal3D> {
    let label = &frame.detections[det].label;
    let result = match db.spec(label).map(|s| &s.shape) {
        Some(ShapeSpec::Cylinder { .. }) => cylinder_proposals(frame, det, cam_from_ground, intr, db),
        Some(ShapeSpec::Cuboid { .. }) => cuboid_proposals(frame, det, cam_from_ground, intr, db, yaw_samples),
        None => Ok(Vec::new()),
    };
    result.unwrap_or_default()
}

/// Result of a robust plane fit.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneFit {
    pub plane: GroundPlane,
    pub inliers: Vec<usize>,
}

impl PlaneFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.len()
    }
}

fn plane_through(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<GroundPlane> {
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len < 1e-12 {
        return None;
    }
    let n = n / len;
    Some(GroundPlane {
        normal: n,
        offset: n.dot(a),
    })
}

fn least_squares_plane(points: &[Vector3<f64>], idx: &[usize]) -> Option<GroundPlane> {
    let k = idx.len() as f64;
    let mean = idx.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / k;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = points[i] - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // the middle eigenvalue vanishes when all points are collinear
    if eig.eigenvalues[order[1]] <= 1e-12 * eig.eigenvalues[order[2]].max(1e-300) {
        return None;
    }
    let n = eig.eigenvectors.column(order[0]).into_owned().normalize();
    Some(GroundPlane {
        normal: n,
        offset: n.dot(&mean),
    })
}

/// Fits the ground plane to camera-frame points with RANSAC and a
/// least-squares refinement; the normal points toward the camera.
pub fn ground_plane_estimate(points: &[Vector3<f64>]) -> Result<PlaneFit, ProposalError> {
    if points.len() < 3 {
        return Err(ProposalError::DegenerateInput("fewer than 3 points"));
    }
    let all: Vec<usize> = (0..points.len()).collect();
    if least_squares_plane(points, &all).is_none() {
        return Err(ProposalError::DegenerateInput("points are collinear"));
    }
    let inliers_of = |plane: &GroundPlane| -> Vec<usize> {
        (0..points.len())
            .filter(|&i| plane.signed_distance(&points[i]).abs() < RANSAC_THRESHOLD)
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(RANSAC_SEED);
    let mut best: Option<Vec<usize>> = None;
    for _ in 0..RANSAC_ITERATIONS {
        let s = rand::seq::index::sample(&mut rng, points.len(), 3);
        let Some(plane) = plane_through(&points[s.index(0)], &points[s.index(1)], &points[s.index(2)]) else {
            continue;
        };
        let inl = inliers_of(&plane);
        if best.as_ref().is_none_or(|b| inl.len() > b.len()) {
            best = Some(inl);
        }
    }
    let best = best.ok_or(ProposalError::DegenerateInput("no non-degenerate sample"))?;
    let mut plane =
        least_squares_plane(points, &best).ok_or(ProposalError::DegenerateInput("inliers are collinear"))?;
    let mut inliers = inliers_of(&plane);
    if inliers.len() >= 3 && inliers != best {
        if let Some(p) = least_squares_plane(points, &inliers) {
            plane = p;
            inliers = inliers_of(&plane);
        }
    }
    Ok(PlaneFit {
        plane: plane.oriented_toward(&Vector3::zeros()),
        inliers,
    })
}
