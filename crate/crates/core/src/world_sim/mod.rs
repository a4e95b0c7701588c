//! Deterministic stand-in for the camera front-end: a world of grounded
//! objects and feature points, a scripted trajectory, and noisy per-frame
//! detections, feature tracks, line segments, ground points and odometry.

pub mod noise;
pub mod tum;

use nalgebra::{Matrix3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classes::ObjectDatabase;
use crate::geometry::{
    backproject_ground, project_model_bbox, BBox2D, CameraIntrinsics, CuboidModel, CylinderModel, GroundPlane,
    LandmarkModel, Pose,
};
use crate::par;
use noise::{stream, Channel};

/// Depth range in which the simulated detector fires.
pub const MIN_DETECT_DEPTH: f64 = 0.3;
pub const MAX_DETECT_DEPTH: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown object class `{0}`")]
    UnknownClass(String),
    #[error("trajectory script needs at least 2 poses, got {0}")]
    ScriptTooShort(usize),
    #[error("invalid noise configuration: {0}")]
    InvalidNoise(&'static str),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Std-dev of each bbox coordinate, pixels.
    pub bbox_sigma: f64,
    /// Std-dev of feature pixels and line endpoints, pixels.
    pub pixel_sigma: f64,
    /// Per-step odometry rotation noise, radians per axis.
    pub odom_rot_sigma: f64,
    /// Per-step odometry translation noise, meters per axis.
    pub odom_trans_sigma: f64,
    pub detect_prob: f64,
    pub seed: u64,
    /// Std-dev of simulated ground-point depth samples, meters.
    pub ground_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            bbox_sigma: 2.0,
            pixel_sigma: 1.0,
            odom_rot_sigma: 0.005,
            odom_trans_sigma: 0.01,
            detect_prob: 0.95,
            seed: 0,
            ground_sigma: 0.005,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless(seed: u64) -> Self {
        Self {
            bbox_sigma: 0.0,
            pixel_sigma: 0.0,
            odom_rot_sigma: 0.0,
            odom_trans_sigma: 0.0,
            detect_prob: 1.0,
            seed,
            ground_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let sigmas = [
            self.bbox_sigma,
            self.pixel_sigma,
            self.odom_rot_sigma,
            self.odom_trans_sigma,
            self.ground_sigma,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(SimError::InvalidNoise("sigmas must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.detect_prob) {
            return Err(SimError::InvalidNoise("detect_prob must be in [0, 1]"));
        }
        Ok(())
    }
}

/// A static, grounded object with its ground-truth model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: usize,
    pub model: LandmarkModel,
}

/// A moving object (e.g. a person) with no stable 3D ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicObject {
    pub label: String,
    pub height: f64,
    pub radius: f64,
    /// Closed polyline walked at constant speed.
    pub path: Vec<[f64; 2]>,
    /// Frames needed to walk the whole path once.
    pub period_frames: usize,
}

impl DynamicObject {
    pub fn position_at(&self, t: usize) -> Vector2<f64> {
        let n = self.path.len();
        if n == 0 {
            return Vector2::zeros();
        }
        if n == 1 || self.period_frames == 0 {
            return Vector2::from(self.path[0]);
        }
        let seg_len = |i: usize| (Vector2::from(self.path[(i + 1) % n]) - Vector2::from(self.path[i])).norm();
        let total: f64 = (0..n).map(seg_len).sum();
        let mut s = total * (t % self.period_frames) as f64 / self.period_frames as f64;
        for i in 0..n {
            let l = seg_len(i);
            if s <= l || i == n - 1 {
                let a = Vector2::from(self.path[i]);
                let b = Vector2::from(self.path[(i + 1) % n]);
                return if l > 0.0 { a + (b - a) * (s / l).min(1.0) } else { a };
            }
            s -= l;
        }
        unreachable!()
    }

    pub fn model_at(&self, t: usize) -> LandmarkModel {
        let p = self.position_at(t);
        LandmarkModel::Cylinder(CylinderModel::grounded(
            p.x,
            p.y,
            self.height,
            self.radius,
            self.label.clone(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub objects: Vec<WorldObject>,
    #[serde(default)]
    pub dynamic: Vec<DynamicObject>,
    pub ground: GroundPlane,
    /// Ground-truth feature points `p_n`, indexed by point id.
    pub feature_points: Vec<Vector3<f64>>,
    /// Object each feature point was sampled on, if any.
    #[serde(default)]
    pub point_owner: Vec<Option<usize>>,
}

impl World {
    pub fn validate(&self) -> Result<(), String> {
        for o in &self.objects {
            let expect = 0.5 * o.model.height();
            if (o.model.center().z - expect).abs() > 1e-9 {
                return Err(format!("object {} is not grounded", o.id));
            }
        }
        if !self.point_owner.is_empty() && self.point_owner.len() != self.feature_points.len() {
            return Err("point_owner length differs from feature_points".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox2D,
    pub label: String,
    /// Classification confidence `α ∈ (0, 1]`.
    pub score: f64,
    /// Ground-truth object id, for evaluation only. `None` for dynamic objects.
    #[serde(default)]
    pub truth: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureObs {
    pub point: usize,
    pub pixel: Vector2<f64>,
}

/// A 2D line segment found inside a detection box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineObs {
    pub detection: usize,
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
}

impl LineObs {
    pub fn direction(&self) -> Vector2<f64> {
        self.b - self.a
    }

    pub fn length(&self) -> f64 {
        self.direction().norm()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub detections: Vec<Detection>,
    pub features: Vec<FeatureObs>,
    pub lines: Vec<LineObs>,
    /// Ground-surface points in the camera frame (depth-mask stand-in).
    pub ground_points: Vec<Vector3<f64>>,
    /// Noisy increment `x_{t-1}⁻¹ x_t`; identity for the first frame.
    pub odom: Pose,
}

impl Frame {
    /// Feature observations falling inside detection `det`.
    pub fn features_in(&self, det: usize) -> impl Iterator<Item = &FeatureObs> {
        let b = self.detections[det].bbox;
        self.features.iter().filter(move |f| b.contains(&f.pixel))
    }
}

/// Frames plus the ground truth that generated them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub frames: Vec<Frame>,
    /// Camera-in-world poses.
    pub ground_truth: Vec<Pose>,
}

const GROUND_POINTS_PER_FRAME: usize = 60;
const GROUND_MAX_RANGE: f64 = 6.0;

fn object_visible(model: &LandmarkModel, cam_from_world: &Pose, intr: &CameraIntrinsics) -> bool {
    let c = cam_from_world.apply(model.center());
    if !(MIN_DETECT_DEPTH..=MAX_DETECT_DEPTH).contains(&c.z) {
        return false;
    }
    intr.contains(&intr.project_unchecked(&c))
}

fn perturb_box(b: &BBox2D, sigma: f64, rng: &mut noise::NoiseStream, intr: &CameraIntrinsics) -> BBox2D {
    let mut a = b.as_array();
    for v in a.iter_mut() {
        *v += rng.gauss(sigma);
    }
    let (mut x0, mut x1) = (a[0].min(a[2]), a[0].max(a[2]));
    let (mut y0, mut y1) = (a[1].min(a[3]), a[1].max(a[3]));
    x0 = x0.clamp(0.0, intr.width);
    x1 = x1.clamp(0.0, intr.width);
    y0 = y0.clamp(0.0, intr.height);
    y1 = y1.clamp(0.0, intr.height);
    if x1 - x0 < 1.0 {
        x1 = (x0 + 1.0).min(intr.width);
        x0 = x1 - 1.0;
    }
    if y1 - y0 < 1.0 {
        y1 = (y0 + 1.0).min(intr.height);
        y0 = y1 - 1.0;
    }
    BBox2D {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    }
}

/// Synthetic line segments for an object, in world coordinates.
///
/// Cylinders give the central leg (ground contact up to seat height) and a
/// base chord across the bottom circle; cuboids give their 8 horizontal edges.
fn object_segments(model: &LandmarkModel, cam_center_world: &Vector3<f64>) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    match model {
        LandmarkModel::Cylinder(c) => {
            let base = Vector3::new(c.center.x, c.center.y, c.center.z - 0.5 * c.height);
            let seat = base + Vector3::new(0.0, 0.0, 0.45 * c.height);
            let mut view = base - cam_center_world;
            view.z = 0.0;
            let side = if view.norm() > 1e-9 {
                Vector3::new(-view.y, view.x, 0.0).normalize() * c.radius
            } else {
                Vector3::new(c.radius, 0.0, 0.0)
            };
            vec![(base, seat), (base - side, base + side)]
        }
        LandmarkModel::Cuboid(c) => {
            let k = c.corners();
            CuboidModel::EDGES[..8].iter().map(|&(i, j)| (k[i], k[j])).collect()
        }
    }
}

/// Simulates the observations of one frame.
///
/// `world_from_cam` is the ground-truth camera pose. The odometry field is left
/// at identity; [`simulate_trajectory`] fills it in.
pub fn simulate_frame(
    world: &World,
    world_from_cam: &Pose,
    intr: &CameraIntrinsics,
    noise: &NoiseConfig,
    t: usize,
) -> Frame {
    let cam_from_world = world_from_cam.inverse();
    let cam_center = *world_from_cam.translation();
    let seed = noise.seed;
    let tf = t as u64;
    let mut detections = Vec::new();
    let mut lines = Vec::new();

    let statics = world.objects.iter().map(|o| (o.model.clone(), Some(o.id), o.id as u64));
    let dynamics = world
        .dynamic
        .iter()
        .enumerate()
        .map(|(k, d)| (d.model_at(t), None, 1_000_000 + k as u64));
    for (model, truth, entity) in statics.chain(dynamics) {
        if !object_visible(&model, &cam_from_world, intr) {
            continue;
        }
        let Ok(proj) = project_model_bbox(&model, &cam_from_world, intr) else {
            continue;
        };
        if stream(seed, tf, entity, Channel::DetectionDrop).uniform() >= noise.detect_prob {
            continue;
        }
        let mut rng = stream(seed, tf, entity, Channel::Detection);
        let bbox = if noise.bbox_sigma == 0.0 {
            proj.bbox
        } else {
            perturb_box(&proj.bbox, noise.bbox_sigma, &mut rng, intr)
        };
        let jitter = stream(seed, tf, entity, Channel::Score).uniform();
        let score = (0.55 + 0.45 * proj.visible_fraction() - 0.1 * jitter).clamp(0.05, 1.0);
        let det_index = detections.len();
        detections.push(Detection {
            bbox,
            label: model.label().to_string(),
            score,
            truth,
        });
        if truth.is_none() {
            continue;
        }
        let mut lrng = stream(seed, tf, entity, Channel::Line);
        for (a, b) in object_segments(&model, &cam_center) {
            let (ca, cb) = (cam_from_world.apply(&a), cam_from_world.apply(&b));
            let (Ok(pa), Ok(pb)) = (intr.project(&ca), intr.project(&cb)) else {
                continue;
            };
            let pa = pa + Vector2::new(lrng.gauss(noise.pixel_sigma), lrng.gauss(noise.pixel_sigma));
            let pb = pb + Vector2::new(lrng.gauss(noise.pixel_sigma), lrng.gauss(noise.pixel_sigma));
            lines.push(LineObs {
                detection: det_index,
                a: pa,
                b: pb,
            });
        }
    }

    let mut features = Vec::new();
    for (id, p) in world.feature_points.iter().enumerate() {
        let c = cam_from_world.apply(p);
        if !(MIN_DETECT_DEPTH..=MAX_DETECT_DEPTH).contains(&c.z) {
            continue;
        }
        let px = intr.project_unchecked(&c);
        if !intr.contains(&px) {
            continue;
        }
        let mut rng = stream(seed, tf, id as u64, Channel::Feature);
        let noisy = px + Vector2::new(rng.gauss(noise.pixel_sigma), rng.gauss(noise.pixel_sigma));
        features.push(FeatureObs {
            point: id,
            pixel: noisy,
        });
    }

    let ground_points = simulate_ground_points(world, &cam_from_world, intr, noise, t);

    Frame {
        index: t,
        detections,
        features,
        lines,
        ground_points,
        odom: Pose::identity(),
    }
}

fn simulate_ground_points(
    world: &World,
    cam_from_world: &Pose,
    intr: &CameraIntrinsics,
    noise: &NoiseConfig,
    t: usize,
) -> Vec<Vector3<f64>> {
    // ground frame = world frame shifted onto the plane
    let plane = world.ground;
    let mut rng = stream(noise.seed, t as u64, 0, Channel::Ground);
    let mut out = Vec::with_capacity(GROUND_POINTS_PER_FRAME);
    let ground_from_world = plane_frame(&plane);
    let cam_from_ground = cam_from_world.compose(&ground_from_world.inverse());
    let mut attempts = 0;
    while out.len() < GROUND_POINTS_PER_FRAME && attempts < 20 * GROUND_POINTS_PER_FRAME {
        attempts += 1;
        let px = Vector2::new(rng.uniform_in(0.0, intr.width), rng.uniform_in(0.0, intr.height));
        let Ok(g) = backproject_ground(intr, &cam_from_ground, &px) else {
            continue;
        };
        let c = cam_from_ground.apply(&g);
        if c.z > GROUND_MAX_RANGE {
            continue;
        }
        let scale = 1.0 + rng.gauss(noise.ground_sigma) / c.z.max(1e-6);
        out.push(c * scale);
    }
    out
}

/// Pose mapping world points into a frame whose `z = 0` is `plane`.
fn plane_frame(plane: &GroundPlane) -> Pose {
    let n = plane.normal;
    if (n - Vector3::z()).norm() < 1e-12 {
        return Pose::from_translation(Vector3::new(0.0, 0.0, -plane.offset));
    }
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let ex = (helper - n * n.dot(&helper)).normalize();
    let ey = n.cross(&ex);
    let r = Matrix3::from_rows(&[ex.transpose(), ey.transpose(), n.transpose()]);
    Pose::new(r, Vector3::new(0.0, 0.0, -plane.offset)).expect("orthonormal by construction")
}

/// Simulates every frame of a scripted trajectory and the noisy odometry between them.
pub fn simulate_trajectory(
    world: &World,
    script: &[Pose],
    intr: &CameraIntrinsics,
    noise: &NoiseConfig,
) -> Result<SimOutput, SimError> {
    if script.len() < 2 {
        return Err(SimError::ScriptTooShort(script.len()));
    }
    noise.validate()?;
    let frames = par::map_range(script.len(), |t| {
        let mut frame = simulate_frame(world, &script[t], intr, noise, t);
        if t > 0 {
            frame.odom = noisy_increment(&script[t - 1], &script[t], noise, t);
        }
        frame
    });
    Ok(SimOutput {
        frames,
        ground_truth: script.to_vec(),
    })
}

fn noisy_increment(prev: &Pose, cur: &Pose, noise: &NoiseConfig, t: usize) -> Pose {
    let rel = prev.between(cur);
    if noise.odom_rot_sigma == 0.0 && noise.odom_trans_sigma == 0.0 {
        return rel;
    }
    let mut rng = stream(noise.seed, t as u64, 0, Channel::Odometry);
    let mut xi = Vector6::zeros();
    for k in 0..3 {
        xi[k] = rng.gauss(noise.odom_trans_sigma);
    }
    for k in 3..6 {
        xi[k] = rng.gauss(noise.odom_rot_sigma);
    }
    rel.retract(&xi)
}

/// Chains odometry increments from a starting pose (dead reckoning).
pub fn integrate_odometry(start: &Pose, frames: &[Frame]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(frames.len());
    let mut cur = *start;
    for (i, f) in frames.iter().enumerate() {
        if i > 0 {
            cur = cur.compose(&f.odom);
        }
        out.push(cur);
    }
    out
}

// ---------------------------------------------------------------------------
// Configuration: world layout and trajectory scripts.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPlacement {
    pub label: String,
    /// Ground position `(x, y)`, meters.
    pub position: [f64; 2],
    #[serde(default)]
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSource {
    /// Explicit world points.
    Explicit { points: Vec<[f64; 3]> },
    /// Points scattered on the walls of an axis-aligned room plus on object surfaces.
    Room {
        /// `[x_min, y_min, x_max, y_max]`
        bounds: [f64; 4],
        wall_height: f64,
        wall_points: usize,
        points_per_object: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub objects: Vec<ObjectPlacement>,
    #[serde(default)]
    pub dynamic: Vec<DynamicObject>,
    pub features: FeatureSource,
}

impl WorldConfig {
    pub fn build(&self, db: &ObjectDatabase) -> Result<World, SimError> {
        let mut objects = Vec::new();
        for (id, o) in self.objects.iter().enumerate() {
            let model = db
                .grounded_model(&o.label, o.position[0], o.position[1], o.yaw)
                .ok_or_else(|| SimError::UnknownClass(o.label.clone()))?;
            objects.push(WorldObject { id, model });
        }
        let (feature_points, point_owner) = match &self.features {
            FeatureSource::Explicit { points } => (
                points.iter().map(|p| Vector3::from(*p)).collect(),
                vec![None; points.len()],
            ),
            FeatureSource::Room {
                bounds,
                wall_height,
                wall_points,
                points_per_object,
                seed,
            } => room_points(&objects, bounds, *wall_height, *wall_points, *points_per_object, *seed),
        };
        Ok(World {
            objects,
            dynamic: self.dynamic.clone(),
            ground: GroundPlane::horizontal(),
            feature_points,
            point_owner,
        })
    }
}

fn room_points(
    objects: &[WorldObject],
    bounds: &[f64; 4],
    wall_height: f64,
    wall_points: usize,
    per_object: usize,
    seed: u64,
) -> (Vec<Vector3<f64>>, Vec<Option<usize>>) {
    let [x0, y0, x1, y1] = *bounds;
    let perimeter = 2.0 * ((x1 - x0) + (y1 - y0));
    let mut rng = stream(seed, 0, 0, Channel::WorldLayout);
    let mut pts = Vec::new();
    let mut owner = Vec::new();
    for _ in 0..wall_points {
        let mut s = rng.uniform() * perimeter;
        let z = rng.uniform_in(0.05, wall_height);
        let p = if s < x1 - x0 {
            Vector3::new(x0 + s, y0, z)
        } else {
            s -= x1 - x0;
            if s < y1 - y0 {
                Vector3::new(x1, y0 + s, z)
            } else {
                s -= y1 - y0;
                if s < x1 - x0 {
                    Vector3::new(x1 - s, y1, z)
                } else {
                    s -= x1 - x0;
                    Vector3::new(x0, y1 - s, z)
                }
            }
        };
        pts.push(p);
        owner.push(None);
    }
    for o in objects {
        let mut orng = stream(seed, 1, o.id as u64, Channel::WorldLayout);
        for _ in 0..per_object {
            let p = match &o.model {
                LandmarkModel::Cylinder(c) => {
                    // seat and back texture, kept well inside the volume
                    let a = orng.uniform_in(0.0, std::f64::consts::TAU);
                    let r = c.radius * orng.uniform_in(0.0, 0.5);
                    let z = orng.uniform_in(0.45, 0.85) * c.height;
                    Vector3::new(c.center.x + r * a.cos(), c.center.y + r * a.sin(), z)
                }
                LandmarkModel::Cuboid(c) => {
                    let local = Vector3::new(
                        orng.uniform_in(-0.3, 0.3) * c.dims.x,
                        orng.uniform_in(-0.3, 0.3) * c.dims.y,
                        orng.uniform_in(0.2, 0.8) * c.dims.z,
                    );
                    let r = crate::geometry::rot_z(c.yaw);
                    let mut p = r * local + c.center;
                    p.z = local.z;
                    p
                }
            };
            pts.push(p);
            owner.push(Some(o.id));
        }
    }
    (pts, owner)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facing {
    /// Look at the circle centre.
    Inward,
    /// Look along the direction of travel.
    Forward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryScript {
    /// Explicit camera-in-world poses.
    Poses { poses: Vec<Pose> },
    /// Closed circular loop; the last pose coincides with the first.
    Circle {
        center: [f64; 2],
        radius: f64,
        frames: usize,
        camera_height: f64,
        /// Downward pitch, radians.
        pitch: f64,
        facing: Facing,
        #[serde(default)]
        start_angle: f64,
    },
}

/// Camera-in-world pose at `position` looking along horizontal `forward`,
/// pitched down by `pitch` (camera axes: x right, y down, z forward).
pub fn camera_looking(position: Vector3<f64>, forward: Vector2<f64>, pitch: f64) -> Pose {
    let f = Vector3::new(forward.x, forward.y, 0.0).normalize();
    let (s, c) = pitch.sin_cos();
    let z = f * c - Vector3::z() * s;
    let x = f.cross(&Vector3::z()).normalize();
    let y = z.cross(&x);
    Pose::new(Matrix3::from_columns(&[x, y, z]), position).expect("orthonormal by construction")
}

impl TrajectoryScript {
    pub fn poses(&self) -> Vec<Pose> {
        match self {
            TrajectoryScript::Poses { poses } => poses.clone(),
            TrajectoryScript::Circle {
                center,
                radius,
                frames,
                camera_height,
                pitch,
                facing,
                start_angle,
            } => {
                let n = *frames;
                (0..n)
                    .map(|i| {
                        let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                        // the last pose lands exactly on the first
                        let a = if i + 1 == n && n > 1 {
                            *start_angle
                        } else {
                            start_angle + std::f64::consts::TAU * frac
                        };
                        let radial = Vector2::new(a.cos(), a.sin());
                        let pos = Vector3::new(
                            center[0] + radius * radial.x,
                            center[1] + radius * radial.y,
                            *camera_height,
                        );
                        let forward = match facing {
                            Facing::Inward => -radial,
                            Facing::Forward => Vector2::new(-radial.y, radial.x),
                        };
                        camera_looking(pos, forward, *pitch)
                    })
                    .collect()
            }
        }
    }
}
