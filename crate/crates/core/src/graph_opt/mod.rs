//! Factor graph over poses, feature points and object landmarks, solved with
//! Levenberg-Marquardt on a sparse Cholesky factorization.

mod descent;
mod linear;
mod residuals;

pub use descent::{coordinate_descent, DescentConfig, DescentInput, DescentOutput, Measurement, PointTrack};
pub use residuals::*;

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox2D, CameraIntrinsics, GroundPlane, LandmarkModel, Pose};
use crate::par;
use linear::{Layout, NormalEquations, Step, WeightedLinearization};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("normal equations stayed singular up to damping {0:e}")]
    SingularNormalEquations(f64),
    #[error("no pose is fixed; the problem has a free gauge")]
    NoAnchor,
    #[error("factor {factor} references a missing variable")]
    DanglingFactor { factor: usize },
    #[error("factor {factor} has a non-positive or non-finite information weight")]
    BadInformation { factor: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub tolerance: f64,
    /// Huber threshold on whitened reprojection and bbox residual norms, pixels.
    pub huber_delta: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 10.0,
            tolerance: 1e-10,
            huber_delta: 5.0,
        }
    }
}

/// Residual block with its measurement and information weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Factor {
    /// Relative pose `measured ≈ x_from⁻¹ x_to`, diagonal information `[ρ; θ]`.
    Odometry {
        from: usize,
        to: usize,
        measured: Pose,
        info: [f64; 6],
    },
    Reprojection {
        point: usize,
        pose: usize,
        pixel: Vector2<f64>,
        info: f64,
    },
    Bbox {
        landmark: usize,
        pose: usize,
        observed: BBox2D,
        info: f64,
    },
    PointLandmark {
        point: usize,
        landmark: usize,
        info: f64,
    },
    /// Ground plane seen from a pose, `reference` in that camera's frame.
    GroundPose {
        pose: usize,
        reference: GroundPlane,
        info: f64,
    },
    /// Landmark centre at half its height above the ground.
    GroundLandmark {
        landmark: usize,
        info: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FactorKind {
    Odometry,
    Reprojection,
    Bbox,
    PointLandmark,
    Ground,
}

impl Factor {
    pub fn kind(&self) -> FactorKind {
        match self {
            Factor::Odometry { .. } => FactorKind::Odometry,
            Factor::Reprojection { .. } => FactorKind::Reprojection,
            Factor::Bbox { .. } => FactorKind::Bbox,
            Factor::PointLandmark { .. } => FactorKind::PointLandmark,
            Factor::GroundPose { .. } | Factor::GroundLandmark { .. } => FactorKind::Ground,
        }
    }

    fn robust(&self) -> bool {
        matches!(self, Factor::Reprojection { .. } | Factor::Bbox { .. })
    }

    fn info_ok(&self) -> bool {
        let ok = |w: f64| w.is_finite() && w > 0.0;
        match self {
            Factor::Odometry { info, .. } => info.iter().all(|w| ok(*w)),
            Factor::Reprojection { info, .. }
            | Factor::Bbox { info, .. }
            | Factor::PointLandmark { info, .. }
            | Factor::GroundPose { info, .. }
            | Factor::GroundLandmark { info, .. } => ok(*info),
        }
    }
}

/// Per-type robustified cost.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub odometry: f64,
    pub reprojection: f64,
    pub bbox: f64,
    pub point_landmark: f64,
    pub ground: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.odometry + self.reprojection + self.bbox + self.point_landmark + self.ground
    }

    fn add(&mut self, kind: FactorKind, c: f64) {
        match kind {
            FactorKind::Odometry => self.odometry += c,
            FactorKind::Reprojection => self.reprojection += c,
            FactorKind::Bbox => self.bbox += c,
            FactorKind::PointLandmark => self.point_landmark += c,
            FactorKind::Ground => self.ground += c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorGraph {
    /// Camera-in-world poses.
    pub poses: Vec<Pose>,
    /// Poses held constant (at least one is required).
    pub fixed: Vec<bool>,
    pub points: Vec<Vector3<f64>>,
    pub landmarks: Vec<LandmarkModel>,
    pub factors: Vec<Factor>,
    pub intrinsics: CameraIntrinsics,
    /// World ground plane.
    pub ground: GroundPlane,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Var {
    Pose(usize),
    Point(usize),
    Landmark(usize),
}

/// Whitened residual and Jacobian blocks of one factor.
struct Linearized {
    residual: DVector<f64>,
    blocks: Vec<(Var, DMatrix<f64>)>,
}

fn huber(e2: f64, delta: f64) -> (f64, f64) {
    let e = e2.sqrt();
    if e <= delta {
        (e2, 1.0)
    } else {
        (2.0 * delta * e - delta * delta, delta / e)
    }
}

fn to_dmatrix<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::storage::Storage<f64, R, C>>(
    m: &nalgebra::Matrix<f64, R, C, S>,
) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

impl FactorGraph {
    pub fn new(intrinsics: CameraIntrinsics, ground: GroundPlane) -> Self {
        Self {
            poses: Vec::new(),
            fixed: Vec::new(),
            points: Vec::new(),
            landmarks: Vec::new(),
            factors: Vec::new(),
            intrinsics,
            ground,
        }
    }

    pub fn validate(&self) -> Result<(), OptimizeError> {
        let (np, nq, nl) = (self.poses.len(), self.points.len(), self.landmarks.len());
        for (k, f) in self.factors.iter().enumerate() {
            let ok = match f {
                Factor::Odometry { from, to, .. } => *from < np && *to < np,
                Factor::Reprojection { point, pose, .. } => *point < nq && *pose < np,
                Factor::Bbox { landmark, pose, .. } => *landmark < nl && *pose < np,
                Factor::PointLandmark { point, landmark, .. } => *point < nq && *landmark < nl,
                Factor::GroundPose { pose, .. } => *pose < np,
                Factor::GroundLandmark { landmark, .. } => *landmark < nl,
            };
            if !ok {
                return Err(OptimizeError::DanglingFactor { factor: k });
            }
            if !f.info_ok() {
                return Err(OptimizeError::BadInformation { factor: k });
            }
        }
        if np > 0 && !self.fixed.iter().take(np).any(|&b| b) {
            return Err(OptimizeError::NoAnchor);
        }
        Ok(())
    }

    /// Whitened residual and Jacobians; `None` when the factor cannot be evaluated
    /// (e.g. a point behind the camera).
    fn linearize(&self, f: &Factor, jacobians: bool) -> Option<Linearized> {
        let sq = f64::sqrt;
        let intr = &self.intrinsics;
        let out = match f {
            Factor::Odometry {
                from,
                to,
                measured,
                info,
            } => {
                let (r, ji, jj) = odometry_jacobians(&self.poses[*from], &self.poses[*to], measured);
                let w = DMatrix::from_diagonal(&DVector::from_iterator(6, info.iter().map(|v| sq(*v))));
                let residual = DVector::from_iterator(6, (0..6).map(|k| r[k] * sq(info[k])));
                let blocks = if jacobians {
                    vec![
                        (Var::Pose(*from), &w * to_dmatrix(&ji)),
                        (Var::Pose(*to), &w * to_dmatrix(&jj)),
                    ]
                } else {
                    vec![]
                };
                Linearized { residual, blocks }
            }
            Factor::Reprojection {
                point,
                pose,
                pixel,
                info,
            } => {
                let (r, jp, jx) = reprojection_single(&self.points[*point], &self.poses[*pose], pixel, intr).ok()?;
                let s = sq(*info);
                Linearized {
                    residual: DVector::from_column_slice((r * s).as_slice()),
                    blocks: vec![
                        (Var::Point(*point), to_dmatrix(&(jp * s))),
                        (Var::Pose(*pose), to_dmatrix(&(jx * s))),
                    ],
                }
            }
            Factor::Bbox {
                landmark,
                pose,
                observed,
                info,
            } => {
                let (r, jl, jx, _) =
                    bbox_jacobians(&self.landmarks[*landmark], &self.poses[*pose], observed, intr).ok()?;
                let s = sq(*info);
                Linearized {
                    residual: DVector::from_column_slice((r * s).as_slice()),
                    blocks: vec![
                        (Var::Landmark(*landmark), jl * s),
                        (Var::Pose(*pose), to_dmatrix(&(jx * s))),
                    ],
                }
            }
            Factor::PointLandmark { point, landmark, info } => {
                let (r, jp, jl) = point_landmark_jacobians(&self.points[*point], &self.landmarks[*landmark]);
                let s = sq(*info);
                Linearized {
                    residual: DVector::from_column_slice((r * s).as_slice()),
                    blocks: vec![
                        (Var::Point(*point), to_dmatrix(&(jp * s))),
                        (Var::Landmark(*landmark), jl * s),
                    ],
                }
            }
            Factor::GroundPose { pose, reference, info } => {
                let (r, j) = ground_plane_jacobian(&self.poses[*pose], &self.ground, reference);
                let s = sq(*info);
                Linearized {
                    residual: DVector::from_column_slice((r * s).as_slice()),
                    blocks: vec![(Var::Pose(*pose), to_dmatrix(&(j * s)))],
                }
            }
            Factor::GroundLandmark { landmark, info } => {
                let l = &self.landmarks[*landmark];
                let s = sq(*info);
                let mut j = DMatrix::zeros(1, landmark_dof(l));
                j[(0, 2)] = s;
                Linearized {
                    residual: DVector::from_element(1, s * residual_ground_landmark(l)),
                    blocks: vec![(Var::Landmark(*landmark), j)],
                }
            }
        };
        Some(out)
    }

    fn factor_cost(&self, f: &Factor, delta: f64) -> Option<f64> {
        let lin = self.linearize(f, false)?;
        let e2 = lin.residual.norm_squared();
        Some(if f.robust() { huber(e2, delta).0 } else { e2 })
    }

    /// Robustified cost of the given factors; `None` if any cannot be evaluated.
    fn cost_of(&self, active: &[usize], delta: f64) -> Option<CostBreakdown> {
        let costs = par::map(active, |k: &usize| self.factor_cost(&self.factors[*k], delta));
        let mut b = CostBreakdown::default();
        for (&k, c) in active.iter().zip(costs) {
            b.add(self.factors[k].kind(), c?);
        }
        Some(b)
    }

    /// Robustified cost of every evaluable factor.
    pub fn cost(&self, huber_delta: f64) -> CostBreakdown {
        let mut b = CostBreakdown::default();
        for f in &self.factors {
            if let Some(c) = self.factor_cost(f, huber_delta) {
                b.add(f.kind(), c);
            }
        }
        b
    }

    /// Text dump, one factor per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# poses {} points {} landmarks {} factors {}",
            self.poses.len(),
            self.points.len(),
            self.landmarks.len(),
            self.factors.len()
        );
        for f in &self.factors {
            let _ = match f {
                Factor::Odometry {
                    from,
                    to,
                    measured,
                    info,
                } => {
                    let t = measured.translation();
                    let q = measured.quaternion();
                    writeln!(
                        s,
                        "ODOMETRY {from} {to} {} {} {} {} {} {} {} {} {} {} {} {} {}",
                        t.x, t.y, t.z, q.i, q.j, q.k, q.w, info[0], info[1], info[2], info[3], info[4], info[5]
                    )
                }
                Factor::Reprojection {
                    point,
                    pose,
                    pixel,
                    info,
                } => {
                    writeln!(s, "REPROJECTION {point} {pose} {} {} {info}", pixel.x, pixel.y)
                }
                Factor::Bbox {
                    landmark,
                    pose,
                    observed,
                    info,
                } => writeln!(
                    s,
                    "BBOX {landmark} {pose} {} {} {} {} {info}",
                    observed.x_min, observed.y_min, observed.x_max, observed.y_max
                ),
                Factor::PointLandmark { point, landmark, info } => {
                    writeln!(s, "POINT_LANDMARK {point} {landmark} {info}")
                }
                Factor::GroundPose { pose, reference, info } => writeln!(
                    s,
                    "GROUND_POSE {pose} {} {} {} {} {info}",
                    reference.normal.x, reference.normal.y, reference.normal.z, reference.offset
                ),
                Factor::GroundLandmark { landmark, info } => writeln!(s, "GROUND_LANDMARK {landmark} {info}"),
            };
        }
        s
    }
}

/// Outcome of [`optimize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub breakdown: CostBreakdown,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Factors skipped because they could not be evaluated at the start.
    pub skipped_factors: usize,
    pub converged: bool,
}

fn apply_step(g: &mut FactorGraph, layout: &Layout, step: &Step) {
    let dx = &step.reduced;
    for (i, p) in g.poses.iter_mut().enumerate() {
        if let Some(b) = layout.pose[i] {
            let d = nalgebra::Vector6::from_iterator(dx.rows(layout.offset(b), 6).iter().copied());
            *p = p.retract(&d);
        }
    }
    for (p, d) in g.points.iter_mut().zip(&step.points) {
        *p += d;
    }
    for (j, l) in g.landmarks.iter_mut().enumerate() {
        let b = layout.landmark[j];
        *l = retract_landmark(l, dx.rows(layout.offset(b), layout.size(b)).as_slice());
    }
}

/// Normal equations of the robustified problem at the current estimate.
fn normal_equations(g: &FactorGraph, active: &[usize], layout: &Layout, delta: f64) -> NormalEquations {
    let lins: Vec<WeightedLinearization> = par::map(active, |k: &usize| {
        let f = &g.factors[*k];
        g.linearize(f, true).map(|l| {
            let weight = if f.robust() {
                huber(l.residual.norm_squared(), delta).1
            } else {
                1.0
            };
            WeightedLinearization {
                weight,
                residual: l.residual,
                blocks: l.blocks,
            }
        })
    })
    .into_iter()
    .flatten()
    .collect();
    NormalEquations::assemble(layout, g.points.len(), &lins)
}

/// Levenberg-Marquardt. Steps are accepted only if they strictly lower the
/// robustified cost. Factors that cannot be evaluated at the initial estimate
/// are left out for the whole run.
pub fn optimize(graph: &mut FactorGraph, cfg: &SolverConfig) -> Result<OptimizeReport, OptimizeError> {
    graph.validate()?;
    let layout = Layout::new(graph);
    let delta = cfg.huber_delta;
    let active: Vec<usize> = (0..graph.factors.len())
        .filter(|&k| graph.factor_cost(&graph.factors[k], delta).is_some())
        .collect();
    let skipped = graph.factors.len() - active.len();
    let mut breakdown = graph.cost_of(&active, delta).expect("active factors evaluate");
    let mut cost = breakdown.total();
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = cfg.initial_damping;
    let mut iterations = 0;
    let mut converged = cost < 1e-20 || layout.dim == 0;
    const MAX_DAMPING: f64 = 1e16;
    while !converged && iterations < cfg.max_iterations {
        iterations += 1;
        let ne = normal_equations(graph, &active, &layout, delta);
        let mut accepted = false;
        let mut ever_solved = false;
        while lambda <= MAX_DAMPING {
            let Some(step) = ne.solve(&layout, lambda) else {
                lambda *= cfg.damping_up;
                continue;
            };
            ever_solved = true;
            let saved = (graph.poses.clone(), graph.points.clone(), graph.landmarks.clone());
            apply_step(graph, &layout, &step);
            match graph.cost_of(&active, delta) {
                Some(b) if b.total() < cost => {
                    let rel = (cost - b.total()) / cost.max(1e-300);
                    breakdown = b;
                    cost = b.total();
                    history.push(cost);
                    lambda = (lambda / cfg.damping_down).max(1e-12);
                    accepted = true;
                    if rel < cfg.tolerance || cost < 1e-20 {
                        converged = true;
                    }
                    break;
                }
                _ => {
                    (graph.poses, graph.points, graph.landmarks) = saved;
                    lambda *= cfg.damping_up;
                }
            }
        }
        if !accepted {
            if !ever_solved {
                return Err(OptimizeError::SingularNormalEquations(lambda));
            }
            // no descent direction left at any damping: at a minimum
            converged = true;
        }
    }
    Ok(OptimizeReport {
        iterations,
        initial_cost,
        final_cost: cost,
        breakdown,
        cost_history: history,
        skipped_factors: skipped,
        converged,
    })
}
