//! Alternation between discrete association and continuous optimization.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{optimize, Factor, FactorGraph, OptimizeError, OptimizeReport, SolverConfig};
use crate::association::{
    assign_or_create, feature_point_association, AssociationConfig, AssociationResult, LandmarkRegistry, Priors,
};
use crate::geometry::{BBox2D, CameraIntrinsics, GroundPlane, Pose};
use crate::proposals::Proposal3D;

/// A selected proposal waiting for association.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub frame: usize,
    pub detection: usize,
    /// Observed detection box.
    pub observed: BBox2D,
    pub proposal: Proposal3D,
    pub priors: Priors,
}

impl Measurement {
    /// The proposal in the world frame given the camera pose of its frame.
    pub fn world_model(&self, world_from_cam: &Pose) -> crate::geometry::LandmarkModel {
        self.proposal
            .model_in(&world_from_cam.compose(&self.proposal.cam_from_ground))
    }
}

/// Observations of one feature point variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointTrack {
    /// Initial world position.
    pub position: Vector3<f64>,
    /// `(frame, pixel, detection containing the pixel)`.
    pub observations: Vec<(usize, Vector2<f64>, Option<usize>)>,
}

pub struct DescentInput<'a> {
    /// Odometry increments; entry `t` links frame `t − 1` to `t` (entry 0 unused).
    pub odometry: &'a [Pose],
    pub measurements: &'a [Measurement],
    pub tracks: &'a [PointTrack],
    /// Ground plane measured in each camera frame, when available.
    pub ground_refs: &'a [Option<GroundPlane>],
    pub intrinsics: CameraIntrinsics,
    pub ground: GroundPlane,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescentConfig {
    pub rounds: usize,
    pub solver: SolverConfig,
    pub association: AssociationConfig,
    /// Odometry standard deviations `[translation m, rotation rad]`.
    pub odom_sigma: [f64; 2],
    pub pixel_sigma: f64,
    pub bbox_sigma: f64,
    /// Standard deviation of the point-in-volume residual, meters.
    pub point_landmark_sigma: f64,
    /// Standard deviation of the per-frame ground residual.
    pub ground_sigma: f64,
    /// Standard deviation of landmark height above the ground, meters.
    pub landmark_ground_sigma: f64,
    /// When false only odometry, reprojection and ground factors are used.
    pub use_landmarks: bool,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            solver: SolverConfig::default(),
            association: AssociationConfig::default(),
            odom_sigma: [0.01, 0.005],
            pixel_sigma: 1.0,
            bbox_sigma: 2.0,
            point_landmark_sigma: 0.05,
            ground_sigma: 0.01,
            landmark_ground_sigma: 0.01,
            use_landmarks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentOutput {
    pub trajectory: Vec<Pose>,
    pub points: Vec<Vector3<f64>>,
    pub registry: LandmarkRegistry,
    /// Landmark id of every measurement (`None` when unused).
    pub associations: Vec<Option<usize>>,
    /// Landmark id each point track is bound to.
    pub point_bindings: Vec<Option<usize>>,
    pub reports: Vec<OptimizeReport>,
    /// Association rounds performed.
    pub rounds: usize,
}

const SIGMA_FLOOR: f64 = 1e-4;

fn info(sigma: f64) -> f64 {
    1.0 / sigma.max(SIGMA_FLOOR).powi(2)
}

/// Associates every measurement against the registry with the trajectory held fixed.
fn associate(
    input: &DescentInput,
    trajectory: &[Pose],
    registry: &mut LandmarkRegistry,
    cfg: &DescentConfig,
) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let carried = registry.len();
    let mut counts = vec![0usize; carried];
    let mut assoc = vec![None; input.measurements.len()];
    let mut order: Vec<usize> = (0..input.measurements.len()).collect();
    order.sort_by_key(|&k| (input.measurements[k].frame, input.measurements[k].detection));
    let mut k = 0;
    while k < order.len() {
        let frame = input.measurements[order[k]].frame;
        let mut claimed = vec![false; registry.len()];
        while k < order.len() && input.measurements[order[k]].frame == frame {
            let m = &input.measurements[order[k]];
            let world = m.world_model(&trajectory[m.frame]);
            claimed.resize(registry.len(), false);
            let id = match assign_or_create(&world, &registry.landmarks, &m.priors, &cfg.association, &claimed) {
                AssociationResult::Existing { landmark, .. } => {
                    let idx = registry.index_of(landmark).expect("returned id exists");
                    if idx < carried {
                        counts[idx] += 1;
                    } else {
                        // landmarks born in this pass are refined as observations arrive
                        registry.observe(landmark, &world);
                    }
                    claimed[idx] = true;
                    landmark
                }
                AssociationResult::NewLandmark => {
                    let id = registry.create(world, m.frame, m.proposal.score);
                    claimed.push(true);
                    id
                }
            };
            assoc[order[k]] = Some(id);
            k += 1;
        }
    }
    for (idx, c) in counts.iter().enumerate() {
        registry.landmarks[idx].observations = *c;
    }
    // landmarks that lost every measurement
    registry.retain(|l| l.observations > 0);

    let by_detection: std::collections::BTreeMap<(usize, usize), usize> = input
        .measurements
        .iter()
        .zip(&assoc)
        .filter_map(|(m, a)| a.map(|id| ((m.frame, m.detection), id)))
        .collect();
    let bindings = input
        .tracks
        .iter()
        .map(|tr| {
            let id = tr
                .observations
                .iter()
                .find_map(|(t, _, d)| d.and_then(|d| by_detection.get(&(*t, d)).copied()))?;
            feature_point_association(&tr.position, registry.get(id), cfg.association.point_margin)
        })
        .collect();
    (assoc, bindings)
}

fn build_graph(
    input: &DescentInput,
    trajectory: &[Pose],
    points: &[Vector3<f64>],
    registry: &LandmarkRegistry,
    assoc: &[Option<usize>],
    bindings: &[Option<usize>],
    cfg: &DescentConfig,
) -> FactorGraph {
    let mut g = FactorGraph::new(input.intrinsics, input.ground);
    g.poses = trajectory.to_vec();
    g.fixed = (0..trajectory.len()).map(|i| i == 0).collect();
    g.points = points.to_vec();
    let (ti, ri) = (info(cfg.odom_sigma[0]), info(cfg.odom_sigma[1]));
    for t in 1..trajectory.len() {
        g.factors.push(Factor::Odometry {
            from: t - 1,
            to: t,
            measured: input.odometry[t],
            info: [ti, ti, ti, ri, ri, ri],
        });
    }
    let pi = info(cfg.pixel_sigma);
    for (n, tr) in input.tracks.iter().enumerate() {
        for (t, px, _) in &tr.observations {
            g.factors.push(Factor::Reprojection {
                point: n,
                pose: *t,
                pixel: *px,
                info: pi,
            });
        }
    }
    let gi = info(cfg.ground_sigma);
    for (t, r) in input.ground_refs.iter().enumerate() {
        if let Some(reference) = r {
            g.factors.push(Factor::GroundPose {
                pose: t,
                reference: *reference,
                info: gi,
            });
        }
    }
    if cfg.use_landmarks {
        g.landmarks = registry.landmarks.iter().map(|l| l.model.clone()).collect();
        let bi = info(cfg.bbox_sigma);
        for (m, a) in input.measurements.iter().zip(assoc) {
            let Some(idx) = a.and_then(|id| registry.index_of(id)) else {
                continue;
            };
            g.factors.push(Factor::Bbox {
                landmark: idx,
                pose: m.frame,
                observed: m.observed,
                info: (m.proposal.score * bi).max(1e-9),
            });
        }
        let li = info(cfg.point_landmark_sigma);
        for (n, b) in bindings.iter().enumerate() {
            if let Some(idx) = b.and_then(|id| registry.index_of(id)) {
                g.factors.push(Factor::PointLandmark {
                    point: n,
                    landmark: idx,
                    info: li,
                });
            }
        }
        let lgi = info(cfg.landmark_ground_sigma);
        for idx in 0..registry.len() {
            g.factors.push(Factor::GroundLandmark {
                landmark: idx,
                info: lgi,
            });
        }
    }
    g
}

/// Alternates association (estimates fixed) and optimization (associations
/// fixed) until the associations repeat or `cfg.rounds` is reached.
pub fn coordinate_descent(
    input: &DescentInput,
    initial: &[Pose],
    registry: LandmarkRegistry,
    cfg: &DescentConfig,
) -> Result<DescentOutput, OptimizeError> {
    let mut out = DescentOutput {
        trajectory: initial.to_vec(),
        points: input.tracks.iter().map(|t| t.position).collect(),
        registry,
        associations: vec![None; input.measurements.len()],
        point_bindings: vec![None; input.tracks.len()],
        reports: Vec::new(),
        rounds: 0,
    };
    let mut previous: Option<(Vec<Option<usize>>, Vec<Option<usize>>)> = None;
    for _ in 0..cfg.rounds {
        let mut registry = out.registry.clone();
        let (assoc, bindings) = if cfg.use_landmarks {
            associate(input, &out.trajectory, &mut registry, cfg)
        } else {
            (vec![None; input.measurements.len()], vec![None; input.tracks.len()])
        };
        let current = (assoc, bindings);
        if previous.as_ref() == Some(&current) {
            break;
        }
        out.rounds += 1;
        let mut g = build_graph(
            input,
            &out.trajectory,
            &out.points,
            &registry,
            &current.0,
            &current.1,
            cfg,
        );
        let rep = optimize(&mut g, &cfg.solver)?;
        out.trajectory = g.poses;
        out.points = g.points;
        if cfg.use_landmarks {
            for (l, m) in registry.landmarks.iter_mut().zip(g.landmarks) {
                l.model = m;
            }
        }
        out.registry = registry;
        out.associations = current.0.clone();
        out.point_bindings = current.1.clone();
        out.reports.push(rep);
        previous = Some(current);
    }
    Ok(out)
}
