//! Scenario runner, trajectory metrics and exports.

mod ate;
mod map;
mod tracks;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ate::{align_rigid, ate_rmse, AteError};
pub use map::{export_landmark_map, landmark_map, landmark_record, read_landmark_map, LandmarkMap, LandmarkRecord};
pub use tracks::{build_tracks, triangulate, MIN_OBSERVATIONS, MIN_PARALLAX, SEGMENT_FRAMES};

use crate::association::{AssociationConfig, LandmarkRegistry, Priors};
use crate::classes::ObjectDatabase;
use crate::crf::{beta, build_window, encode_sequence, select, WindowInput};
use crate::geometry::{cam_from_ground_with_heading, CameraIntrinsics, GroundPlane, Pose};
use crate::graph_opt::{
    coordinate_descent, plane_in_camera, DescentConfig, DescentInput, Measurement, OptimizeError, SolverConfig,
};
use crate::par;
use crate::proposals::{ground_plane_estimate, proposals_for_detection, Proposal3D};
use crate::world_sim::tum::{write_tum, TumError};
use crate::world_sim::{
    integrate_odometry, simulate_trajectory, NoiseConfig, SimError, TrajectoryScript, World, WorldConfig,
};

/// Version stamped into configs, reports and maps.
pub const SCHEMA_VERSION: u32 = 1;

/// A configuration problem, located by its JSON path (e.g. `world.objects[2].label`).
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("config error at {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Ate(#[from] AteError),
    #[error(transparent)]
    Tum(#[from] TumError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("map: {0}")]
    Map(String),
}

fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640.0, 480.0).expect("valid default intrinsics")
}
fn default_window() -> usize {
    5
}
fn default_rounds() -> usize {
    10
}
fn default_yaw_samples() -> usize {
    12
}
fn default_true() -> bool {
    true
}
fn default_rate() -> f64 {
    30.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    /// Object classes; the built-in chair/sofa/door set when absent.
    #[serde(default)]
    pub database: Option<ObjectDatabase>,
    #[serde(default = "default_camera")]
    pub camera: CameraIntrinsics,
    pub world: WorldConfig,
    pub trajectory: TrajectoryScript,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Frames per CRF window.
    #[serde(default = "default_window")]
    pub crf_window: usize,
    #[serde(default)]
    pub association: AssociationConfig,
    /// Coordinate descent rounds.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Yaw hypotheses per half turn for cuboid proposals.
    #[serde(default = "default_yaw_samples")]
    pub yaw_samples: usize,
    /// When false the run is odometry-only dead reckoning.
    #[serde(default = "default_true")]
    pub use_landmarks: bool,
    /// Frames per second, for TUM timestamps.
    #[serde(default = "default_rate")]
    pub frame_rate: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    /// Parses and validates a JSON config.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::at(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_json(&text)?)
    }

    pub fn database(&self) -> ObjectDatabase {
        self.database.clone().unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::at(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        let db = self.database();
        for (i, o) in self.world.objects.iter().enumerate() {
            if db.spec(&o.label).is_none() {
                return Err(ConfigError::at(
                    format!("world.objects[{i}].label"),
                    format!("unknown object class `{}`", o.label),
                ));
            }
            if !o.position.iter().chain([&o.yaw]).all(|v| v.is_finite()) {
                return Err(ConfigError::at(format!("world.objects[{i}]"), "non-finite placement"));
            }
        }
        for (i, d) in self.world.dynamic.iter().enumerate() {
            if d.path.is_empty() || d.period_frames == 0 || !(d.height > 0.0) || !(d.radius > 0.0) {
                return Err(ConfigError::at(
                    format!("world.dynamic[{i}]"),
                    "needs a path, a period and positive size",
                ));
            }
        }
        self.camera
            .validate()
            .map_err(|e| ConfigError::at("camera", e.to_string()))?;
        self.noise
            .validate()
            .map_err(|e| ConfigError::at("noise", e.to_string()))?;
        if self.trajectory.poses().len() < 2 {
            return Err(ConfigError::at("trajectory", "needs at least 2 poses"));
        }
        let s = &self.solver;
        let solver_ok = [
            s.initial_damping,
            s.damping_up,
            s.damping_down,
            s.tolerance,
            s.huber_delta,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if !solver_ok || s.max_iterations == 0 || s.damping_up <= 1.0 || s.damping_down <= 1.0 {
            return Err(ConfigError::at(
                "solver",
                "all values must be positive and damping factors > 1",
            ));
        }
        if self.crf_window == 0 {
            return Err(ConfigError::at("crf_window", "must be at least 1"));
        }
        let a = &self.association;
        if !(a.sigma > 0.0) || !(a.tau > 0.0 && a.tau <= 1.0) || !(a.point_margin >= 0.0) {
            return Err(ConfigError::at(
                "association",
                "need sigma > 0, 0 < tau <= 1, point_margin >= 0",
            ));
        }
        if self.yaw_samples == 0 {
            return Err(ConfigError::at("yaw_samples", "must be at least 1"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(ConfigError::at("frame_rate", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Full,
    OdometryOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkError {
    pub id: usize,
    pub label: String,
    /// Ground-truth object the landmark stands for (majority of its measurements).
    pub truth: Option<usize>,
    /// Centroid distance to that object, meters.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationMetrics {
    /// Pairs of measurements on one landmark that share a ground-truth object.
    pub precision: f64,
    /// Pairs of measurements of one object that ended on one landmark.
    pub recall: f64,
    pub measurements: usize,
    pub landmarks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub mode: RunMode,
    pub frames: usize,
    pub ate_rmse: f64,
    /// ATE of integrating the odometry alone, for reference.
    pub dead_reckoning_ate_rmse: f64,
    pub landmark_errors: Vec<LandmarkError>,
    pub association: AssociationMetrics,
    pub point_tracks: usize,
    pub bound_points: usize,
    pub descent_rounds: usize,
    pub final_cost: f64,
    /// Wall-clock milliseconds per stage; written to its own file so reports stay reproducible.
    #[serde(skip)]
    pub timing_ms: BTreeMap<String, f64>,
    /// The configuration that produced the run, without its output directory.
    pub config: ScenarioConfig,
}

/// Everything a run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub report: RunReport,
    pub estimated: Vec<Pose>,
    pub ground_truth: Vec<Pose>,
    pub registry: LandmarkRegistry,
}

struct Stopwatch {
    last: Instant,
    laps: BTreeMap<String, f64>,
}

impl Stopwatch {
    fn new() -> Self {
        Self {
            last: Instant::now(),
            laps: BTreeMap::new(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.laps
            .insert(stage.to_string(), (now - self.last).as_secs_f64() * 1e3);
        self.last = now;
    }
}

/// Runs a scenario end to end and, when `output_dir` is set, writes the artifacts there.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, EvalError> {
    cfg.validate()?;
    let out = run_pipeline(cfg)?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(&out, dir, cfg.frame_rate)?;
    }
    Ok(out)
}

/// Writes `trajectory_est.tum`, `trajectory_gt.tum`, `landmarks.json`,
/// `report.json` and `timing.json` into `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path, frame_rate: f64) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    let stamps: Vec<f64> = (0..out.estimated.len()).map(|t| t as f64 / frame_rate).collect();
    write_tum(&dir.join("trajectory_est.tum"), &out.estimated, &stamps)?;
    write_tum(&dir.join("trajectory_gt.tum"), &out.ground_truth, &stamps)?;
    export_landmark_map(&out.registry, &dir.join("landmarks.json"))?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&out.report)? + "\n",
    )?;
    std::fs::write(
        dir.join("timing.json"),
        serde_json::to_string_pretty(&out.report.timing_ms)? + "\n",
    )?;
    Ok(())
}

/// Camera-from-ground transform for a frame: the measured plane when one was
/// fitted, otherwise the plane predicted by the pose estimate. The ground
/// axes follow the world x axis as seen from the estimate.
fn frame_ground(plane: Option<&GroundPlane>, world_from_cam: &Pose, world_ground: &GroundPlane) -> Option<Pose> {
    let predicted = || {
        let (normal, offset) = plane_in_camera(world_from_cam, world_ground);
        GroundPlane { normal, offset }
    };
    let plane = plane.copied().unwrap_or_else(predicted);
    let heading = world_from_cam.rotation().transpose() * nalgebra::Vector3::x();
    cam_from_ground_with_heading(&plane, &heading).ok()
}

fn run_pipeline(cfg: &ScenarioConfig) -> Result<RunOutput, EvalError> {
    let mut clock = Stopwatch::new();
    let db = cfg.database();
    let world = cfg.world.build(&db)?;
    let gt = cfg.trajectory.poses();
    let sim = simulate_trajectory(&world, &gt, &cfg.camera, &cfg.noise)?;
    let dead = integrate_odometry(&gt[0], &sim.frames);
    clock.lap("simulate");
    let dead_ate = ate_rmse(&dead, &gt)?;

    let mut echo = cfg.clone();
    echo.output_dir = None;
    let mut report = RunReport {
        schema_version: SCHEMA_VERSION,
        name: cfg.name.clone(),
        seed: cfg.noise.seed,
        mode: if cfg.use_landmarks {
            RunMode::Full
        } else {
            RunMode::OdometryOnly
        },
        frames: gt.len(),
        ate_rmse: dead_ate,
        dead_reckoning_ate_rmse: dead_ate,
        landmark_errors: Vec::new(),
        association: AssociationMetrics {
            precision: 1.0,
            recall: 1.0,
            measurements: 0,
            landmarks: 0,
        },
        point_tracks: 0,
        bound_points: 0,
        descent_rounds: 0,
        final_cost: 0.0,
        timing_ms: BTreeMap::new(),
        config: echo,
    };
    if !cfg.use_landmarks {
        report.timing_ms = clock.laps;
        return Ok(RunOutput {
            report,
            estimated: dead,
            ground_truth: gt,
            registry: LandmarkRegistry::new(),
        });
    }

    let frames = &sim.frames;
    let planes: Vec<Option<GroundPlane>> = par::map(frames, |f| {
        ground_plane_estimate(&f.ground_points).ok().map(|p| p.plane)
    });
    let proposals: Vec<Vec<Vec<Proposal3D>>> = par::map_range(frames.len(), |t| {
        let Some(cam_from_ground) = frame_ground(planes[t].as_ref(), &dead[t], &world.ground) else {
            return vec![Vec::new(); frames[t].detections.len()];
        };
        (0..frames[t].detections.len())
            .map(|j| proposals_for_detection(&frames[t], j, &cam_from_ground, &cfg.camera, &db, cfg.yaw_samples))
            .collect()
    });
    clock.lap("proposals");

    let starts: Vec<usize> = (0..frames.len()).step_by(cfg.crf_window).collect();
    let choices: Vec<Vec<Vec<Option<usize>>>> = par::map(&starts, |&s| {
        let end = (s + cfg.crf_window).min(frames.len());
        let inputs: Vec<WindowInput> = (s..end)
            .map(|t| WindowInput {
                frame: &frames[t],
                proposals: &proposals[t],
                world_from_cam: dead[t],
            })
            .collect();
        select(&build_window(s, &inputs, &cfg.camera, &db)).choices()
    });
    let sequences: Vec<_> = frames.iter().map(|f| encode_sequence(f, &db)).collect();
    let mut measurements = Vec::new();
    let mut truths = Vec::new();
    for (w, &s) in choices.iter().zip(&starts) {
        for (k, frame_choices) in w.iter().enumerate() {
            let t = s + k;
            let pc = if t == 0 {
                1.0
            } else {
                beta(&sequences[t], &sequences[t - 1])
            };
            for (j, c) in frame_choices.iter().enumerate() {
                let Some(c) = c else { continue };
                let frame = &frames[t];
                measurements.push(Measurement {
                    frame: t,
                    detection: j,
                    observed: frame.detections[j].bbox,
                    proposal: proposals[t][j][*c].clone(),
                    priors: Priors::new(frame.features_in(j).count(), pc),
                });
                truths.push(frame.detections[j].truth);
            }
        }
    }
    clock.lap("crf");

    let tracks = build_tracks(frames, &dead, &cfg.camera);
    clock.lap("tracks");

    let odometry: Vec<Pose> = frames.iter().map(|f| f.odom).collect();
    let input = DescentInput {
        odometry: &odometry,
        measurements: &measurements,
        tracks: &tracks,
        ground_refs: &planes,
        intrinsics: cfg.camera,
        ground: world.ground,
    };
    let dcfg = DescentConfig {
        rounds: cfg.rounds,
        solver: cfg.solver,
        association: cfg.association,
        odom_sigma: [cfg.noise.odom_trans_sigma, cfg.noise.odom_rot_sigma],
        pixel_sigma: cfg.noise.pixel_sigma,
        bbox_sigma: cfg.noise.bbox_sigma,
        ground_sigma: cfg.noise.ground_sigma,
        ..DescentConfig::default()
    };
    let result = coordinate_descent(&input, &dead, LandmarkRegistry::new(), &dcfg)?;
    clock.lap("optimize");

    report.ate_rmse = ate_rmse(&result.trajectory, &gt)?;
    report.landmark_errors = landmark_errors(&result.registry, &result.associations, &truths, &world);
    report.association = association_metrics(&result.associations, &truths, result.registry.len());
    report.point_tracks = tracks.len();
    report.bound_points = result.point_bindings.iter().filter(|b| b.is_some()).count();
    report.descent_rounds = result.rounds;
    report.final_cost = result.reports.last().map_or(0.0, |r| r.final_cost);
    clock.lap("metrics");
    report.timing_ms = clock.laps;
    Ok(RunOutput {
        report,
        estimated: result.trajectory,
        ground_truth: gt,
        registry: result.registry,
    })
}

fn landmark_errors(
    registry: &LandmarkRegistry,
    assoc: &[Option<usize>],
    truths: &[Option<usize>],
    world: &World,
) -> Vec<LandmarkError> {
    registry
        .landmarks
        .iter()
        .map(|l| {
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for (a, t) in assoc.iter().zip(truths) {
                if let (Some(a), Some(t)) = (a, t) {
                    if *a == l.id {
                        *votes.entry(*t).or_default() += 1;
                    }
                }
            }
            let majority = votes
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(t, _)| *t);
            let truth = majority.or_else(|| {
                world
                    .objects
                    .iter()
                    .filter(|o| o.model.label() == l.label())
                    .min_by(|a, b| {
                        let da = (a.model.center() - l.model.center()).norm();
                        let db = (b.model.center() - l.model.center()).norm();
                        da.total_cmp(&db)
                    })
                    .map(|o| o.id)
            });
            let error = truth.map_or(f64::MAX, |t| {
                (world.objects[t].model.center() - l.model.center()).norm()
            });
            LandmarkError {
                id: l.id,
                label: l.label().to_string(),
                truth,
                error,
            }
        })
        .collect()
}

/// Pairwise precision and recall of the measurement partition induced by the
/// landmarks against the one induced by ground truth.
fn association_metrics(assoc: &[Option<usize>], truths: &[Option<usize>], landmarks: usize) -> AssociationMetrics {
    let mut cells: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut by_landmark: BTreeMap<usize, u64> = BTreeMap::new();
    let mut by_truth: BTreeMap<usize, u64> = BTreeMap::new();
    let mut n = 0;
    for (a, t) in assoc.iter().zip(truths) {
        if let (Some(a), Some(t)) = (a, t) {
            *cells.entry((*a, *t)).or_default() += 1;
            *by_landmark.entry(*a).or_default() += 1;
            *by_truth.entry(*t).or_default() += 1;
            n += 1;
        }
    }
    let pairs = |m: &mut dyn Iterator<Item = u64>| m.map(|c| c * c.saturating_sub(1) / 2).sum::<u64>();
    let tp = pairs(&mut cells.values().copied());
    let same_landmark = pairs(&mut by_landmark.values().copied());
    let same_truth = pairs(&mut by_truth.values().copied());
    let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    AssociationMetrics {
        precision: ratio(tp, same_landmark),
        recall: ratio(tp, same_truth),
        measurements: n,
        landmarks,
    }
}
