//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p objslam --test acceptance -- --nocapture` to see the table.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use objslam::association::{association_weights, Landmark, Priors};
use objslam::classes::{ClassCode, ObjectDatabase};
use objslam::crf::{
    select_exhaustive, select_icm, total_energy, CrfFrame, CrfObject, CrfProposal, CrfWindow, INFEASIBLE,
};
use objslam::eval::{run_scenario, ScenarioConfig};
use objslam::geometry::{
    project_model_bbox, BBox2D, CameraIntrinsics, CuboidModel, CylinderModel, GroundPlane, LandmarkModel, Pose,
};
use objslam::graph_opt::{
    bbox_jacobians, ground_plane_jacobian, landmark_dof, odometry_jacobians, point_landmark_jacobians,
    reprojection_jacobians, retract_landmark,
};
use objslam::proposals::cylinder_proposals;
use objslam::world_sim::{camera_looking, simulate_frame, FeatureSource, NoiseConfig, ObjectPlacement, WorldConfig};

const FD_STEP: f64 = 1e-6;
const GRADIENT_TOL: f64 = 1e-5;
const GRADIENT_CONFIGS: usize = 100;
const GRADIENT_BUDGET_S: f64 = 5.0;
const ORACLE_CASES: usize = 100;
const ICM_EXACT_SHARE: f64 = 0.9;
const ROUND_TRIP_TOL: f64 = 1e-6;
const NOISY_TRIALS: usize = 200;
const NOISY_MEDIAN_TOL: f64 = 0.05;
const LOOP_REDUCTION: f64 = 0.5;
const LOOP_BUDGET_S: f64 = 30.0;
const ZERO_NOISE_TOL: f64 = 1e-6;
const SUITE_BUDGET_S: f64 = 60.0;
const REGRESSION_SLACK: f64 = 1.05;

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn line(&mut self, name: &str, ok: bool, detail: String) {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failures.push(name.to_string());
        }
    }
}

fn intr() -> CameraIntrinsics {
    CameraIntrinsics::new(525.0, 525.0, 319.5, 239.5, 640.0, 480.0).unwrap()
}

fn scenario(name: &str) -> ScenarioConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name]
        .iter()
        .collect();
    ScenarioConfig::load(&path).unwrap()
}

// ---------------------------------------------------------------------------
// finite differences

fn rel_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).norm() / numeric.norm().max(analytic.norm()).max(1e-8)
}

/// Central differences of `f` along the `dim` tangent directions.
fn central<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, dim: usize) -> DMatrix<f64> {
    let rows = f(&DVector::zeros(dim)).len();
    let mut j = DMatrix::zeros(rows, dim);
    for k in 0..dim {
        let mut d = DVector::zeros(dim);
        d[k] = FD_STEP;
        let col = (f(&d) - f(&-d)) / (2.0 * FD_STEP);
        j.set_column(k, &col);
    }
    j
}

fn v6(d: &DVector<f64>) -> Vector6<f64> {
    Vector6::from_iterator(d.iter().copied())
}

fn dm<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::storage::Storage<f64, R, C>>(
    m: &nalgebra::Matrix<f64, R, C, S>,
) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
    let mut xi = Vector6::zeros();
    for k in 0..3 {
        xi[k] = rng.random_range(-trans..trans);
        xi[k + 3] = rng.random_range(-rot..rot);
    }
    Pose::exp(&xi)
}

fn random_landmark(rng: &mut ChaCha8Rng, at: Vector2<f64>) -> LandmarkModel {
    if rng.random_bool(0.5) {
        LandmarkModel::Cylinder(CylinderModel::grounded(
            at.x,
            at.y,
            rng.random_range(0.6..1.4),
            rng.random_range(0.2..0.5),
            "chair",
        ))
    } else {
        let dims = Vector3::new(
            rng.random_range(0.4..1.8),
            rng.random_range(0.3..1.0),
            rng.random_range(0.5..1.5),
        );
        LandmarkModel::Cuboid(CuboidModel::grounded(
            at.x,
            at.y,
            dims,
            rng.random_range(-3.0..3.0),
            "sofa",
        ))
    }
}

/// Camera looking roughly at `target` from a few meters away, with the model fully in view.
fn camera_at(rng: &mut ChaCha8Rng, target: &Vector3<f64>) -> Pose {
    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = rng.random_range(2.5..5.0);
    let pos = Vector3::new(
        target.x - r * a.cos(),
        target.y - r * a.sin(),
        rng.random_range(0.8..1.6),
    );
    let look = Vector2::new(a.cos(), a.sin());
    let yaw_jitter = rng.random_range(-0.1..0.1);
    let (s, c) = f64::sin_cos(yaw_jitter);
    camera_looking(
        pos,
        Vector2::new(c * look.x - s * look.y, s * look.x + c * look.y),
        rng.random_range(0.1..0.3),
    )
}

fn gradient_suite(out: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a);
    let k = intr();
    let mut worst = [0.0f64; 5];

    for _ in 0..GRADIENT_CONFIGS {
        let xi = random_pose(&mut rng, 1.0, 3.0);
        let xj = xi.compose(&random_pose(&mut rng, 0.5, 1.0));
        let u = random_pose(&mut rng, 0.5, 1.0);
        let (_, ji, jj) = odometry_jacobians(&xi, &xj, &u);
        let f = |d: &DVector<f64>| {
            DVector::from_column_slice(odometry_jacobians(&xi.retract(&v6(d)), &xj, &u).0.as_slice())
        };
        let g = |d: &DVector<f64>| {
            DVector::from_column_slice(odometry_jacobians(&xi, &xj.retract(&v6(d)), &u).0.as_slice())
        };
        worst[0] = worst[0]
            .max(rel_error(&dm(&ji), &central(f, 6)))
            .max(rel_error(&dm(&jj), &central(g, 6)));
    }

    for _ in 0..GRADIENT_CONFIGS {
        let p = Vector3::new(
            rng.random_range(2.0..5.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.0..2.0),
        );
        let xi = camera_looking(
            Vector3::new(0.0, rng.random_range(-0.3..0.3), 1.0),
            Vector2::new(1.0, rng.random_range(-0.2..0.2)),
            0.1,
        );
        let xj = xi.compose(&random_pose(&mut rng, 0.05, 0.2));
        let (oi, oj) = (Vector2::new(300.0, 200.0), Vector2::new(310.0, 250.0));
        let (_, jp, jxi, jxj) = reprojection_jacobians(&p, &xi, &xj, &oi, &oj, &k).unwrap();
        let r = |p: &Vector3<f64>, a: &Pose, b: &Pose| {
            DVector::from_column_slice(reprojection_jacobians(p, a, b, &oi, &oj, &k).unwrap().0.as_slice())
        };
        let np = central(|d| r(&(p + Vector3::new(d[0], d[1], d[2])), &xi, &xj), 3);
        let ni = central(|d| r(&p, &xi.retract(&v6(d)), &xj), 6);
        let nj = central(|d| r(&p, &xi, &xj.retract(&v6(d))), 6);
        worst[1] = worst[1]
            .max(rel_error(&dm(&jp), &np))
            .max(rel_error(&dm(&jxi), &ni))
            .max(rel_error(&dm(&jxj), &nj));
    }

    let mut done = 0;
    while done < GRADIENT_CONFIGS {
        let at = Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let l = random_landmark(&mut rng, at);
        let x = camera_at(&mut rng, l.center());
        let Ok(proj) = project_model_bbox(&l, &x.inverse(), &k) else {
            continue;
        };
        if proj.clamped {
            continue;
        }
        let obs = BBox2D::new(100.0, 100.0, 300.0, 400.0).unwrap();
        let (_, jl, jx, _) = bbox_jacobians(&l, &x, &obs, &k).unwrap();
        let r = |l: &LandmarkModel, x: &Pose| {
            DVector::from_column_slice(bbox_jacobians(l, x, &obs, &k).unwrap().0.as_slice())
        };
        let nl = central(|d| r(&retract_landmark(&l, d.as_slice()), &x), landmark_dof(&l));
        let nx = central(|d| r(&l, &x.retract(&v6(d))), 6);
        worst[2] = worst[2].max(rel_error(&jl, &nl)).max(rel_error(&dm(&jx), &nx));
        done += 1;
    }

    for _ in 0..GRADIENT_CONFIGS {
        let at = Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let l = random_landmark(&mut rng, at);
        let spread = rng.random_range(0.1..1.5);
        let p = l.center()
            + Vector3::new(
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
            );
        let (_, jp, jl) = point_landmark_jacobians(&p, &l);
        let r = |p: &Vector3<f64>, l: &LandmarkModel| {
            DVector::from_column_slice(point_landmark_jacobians(p, l).0.as_slice())
        };
        let np = central(|d| r(&(p + Vector3::new(d[0], d[1], d[2])), &l), 3);
        let nl = central(|d| r(&p, &retract_landmark(&l, d.as_slice())), landmark_dof(&l));
        worst[3] = worst[3].max(rel_error(&dm(&jp), &np)).max(rel_error(&jl, &nl));
    }

    for _ in 0..GRADIENT_CONFIGS {
        let x = random_pose(&mut rng, 1.0, 3.0);
        let reference = GroundPlane::new(
            Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-1.0..-0.8),
                rng.random_range(-0.2..0.2),
            ),
            rng.random_range(-1.5..-0.5),
        )
        .unwrap();
        let ground = GroundPlane::horizontal();
        let (_, j) = ground_plane_jacobian(&x, &ground, &reference);
        let n = central(
            |d| {
                DVector::from_column_slice(
                    ground_plane_jacobian(&x.retract(&v6(d)), &ground, &reference)
                        .0
                        .as_slice(),
                )
            },
            6,
        );
        worst[4] = worst[4].max(rel_error(&dm(&j), &n));
    }

    let secs = start.elapsed().as_secs_f64();
    let names = ["odometry", "reprojection", "bbox", "point_landmark", "ground_plane"];
    let ok = worst.iter().all(|w| *w < GRADIENT_TOL) && secs < GRADIENT_BUDGET_S;
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    out.line(
        "gradient_suite",
        ok,
        format!("max relative error over {GRADIENT_CONFIGS} configs each: {detail} (tol {GRADIENT_TOL:e}); {secs:.2} s (budget {GRADIENT_BUDGET_S} s)"),
    );
}

// ---------------------------------------------------------------------------
// CRF oracle

fn random_window(rng: &mut ChaCha8Rng) -> CrfWindow {
    let mut frames: Vec<CrfFrame> = Vec::new();
    let n_objects = rng.random_range(1..=3);
    for t in 0..3 {
        let objects: Vec<CrfObject> = (0..n_objects)
            .map(|j| {
                let n_props = rng.random_range(0..=4);
                let base = Vector2::new(80.0 + 150.0 * j as f64, rng.random_range(100.0..250.0));
                let det = BBox2D::new(base.x, base.y, base.x + 60.0, base.y + 90.0).unwrap();
                let proposals = (0..n_props)
                    .map(|_| {
                        let dx = rng.random_range(-25.0..25.0);
                        let dy = rng.random_range(-25.0..25.0);
                        let b = BBox2D::new(base.x + dx, base.y + dy, base.x + dx + 60.0, base.y + dy + 90.0).unwrap();
                        let w = rng.random_range(-10.0..10.0);
                        CrfProposal {
                            bbox: b,
                            centroid_px: b.center(),
                            score: rng.random_range(0.05..1.0),
                            warped_next: Some(BBox2D::new(b.x_min + w, b.y_min, b.x_max + w, b.y_max).unwrap()),
                        }
                    })
                    .collect();
                CrfObject {
                    alpha: rng.random_range(0.3..1.0),
                    code: ClassCode::new(1 + (j as u8 % 2)).unwrap(),
                    det_bbox: det,
                    proposals,
                    prev_match: (t > 0 && rng.random_bool(0.8)).then_some(j),
                }
            })
            .collect();
        let sequence = objects.iter().map(|o| o.code).collect();
        frames.push(CrfFrame {
            objects,
            sequence,
            shared_ratio: rng.random_range(0.0..1.0),
        });
    }
    CrfWindow { start: 0, frames }
}

fn crf_oracle(out: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc7f);
    let (mut exact, mut below, mut infeasible) = (0usize, 0usize, 0usize);
    for _ in 0..ORACLE_CASES {
        let w = random_window(&mut rng);
        let best = total_energy(&w, &select_exhaustive(&w));
        let chosen = select_icm(&w);
        let e = total_energy(&w, &chosen);
        if !chosen.is_feasible() || e >= INFEASIBLE {
            infeasible += 1;
        }
        if e < best - 1e-9 {
            below += 1;
        }
        if (e - best).abs() <= 1e-9 * best.abs().max(1.0) {
            exact += 1;
        }
    }
    let share = exact as f64 / ORACLE_CASES as f64;
    out.line(
        "crf_oracle",
        share >= ICM_EXACT_SHARE && below == 0 && infeasible == 0,
        format!(
            "ICM equals enumeration in {exact}/{ORACLE_CASES} (need {:.0}%), below optimum {below}, constraint violations {infeasible}",
            ICM_EXACT_SHARE * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// association oracle

fn association_oracle(out: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa55);
    let labels = ["chair", "sofa", "door"];
    let (mut agree, mut gate) = (0usize, 0usize);
    for _ in 0..ORACLE_CASES {
        let n = rng.random_range(1..=10);
        let make = |rng: &mut ChaCha8Rng, label: &str| {
            let at = Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            if label == "chair" {
                LandmarkModel::Cylinder(CylinderModel::grounded(at.x, at.y, 1.0, 0.3, label))
            } else {
                LandmarkModel::Cuboid(CuboidModel::grounded(
                    at.x,
                    at.y,
                    Vector3::new(1.0, 0.5, 0.8),
                    0.0,
                    label,
                ))
            }
        };
        let landmarks: Vec<Landmark> = (0..n)
            .map(|id| Landmark {
                id,
                model: {
                    let label = labels[rng.random_range(0..3)];
                    make(&mut rng, label)
                },
                created_frame: 0,
                observations: 1,
                weight: 1.0,
            })
            .collect();
        let label = labels[rng.random_range(0..3)];
        let m = make(&mut rng, label);
        let priors = Priors::new(rng.random_range(0..80), rng.random_range(0.0..1.0));
        let sigma = rng.random_range(0.2..1.5);
        let w = association_weights(&m, &landmarks, &priors, sigma, &[]);

        // brute force: ω · p0 · pc · exp(−d²/2σ²), first maximum wins
        let mut best: Option<(usize, f64)> = None;
        for (k, l) in landmarks.iter().enumerate() {
            let omega = if l.model.label() == m.label() { 1.0 } else { 0.0 };
            let d2 = (l.model.center() - m.center()).norm_squared();
            let v = omega * priors.p0 * priors.pc * (-d2 / (2.0 * sigma * sigma)).exp();
            if omega > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        if w.argmax() == best.map(|(k, _)| k) {
            agree += 1;
        }
        if let Some(k) = w.argmax() {
            if landmarks[k].model.label() != m.label() {
                gate += 1;
            }
        }
    }
    out.line(
        "association_oracle",
        agree == ORACLE_CASES && gate == 0,
        format!("argmax agrees with brute force in {agree}/{ORACLE_CASES}, label gate violations {gate}"),
    );
}

// ---------------------------------------------------------------------------
// geometry round trip

fn chair_world(x: f64, y: f64) -> objslam::world_sim::World {
    WorldConfig {
        objects: vec![ObjectPlacement {
            label: "chair".into(),
            position: [x, y],
            yaw: 0.0,
        }],
        dynamic: vec![],
        features: FeatureSource::Explicit { points: vec![] },
    }
    .build(&ObjectDatabase::default())
    .unwrap()
}

fn geometry_round_trip(out: &mut Report) {
    let db = ObjectDatabase::default();
    let k = intr();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e0);
    let mut worst_exact = 0.0f64;
    let mut exact_cases = 0;
    for range in [1.5, 2.0, 2.5, 3.0, 3.5, 4.0] {
        for lateral in [-0.4, 0.0, 0.3] {
            let world = chair_world(range, lateral);
            let cam = camera_looking(Vector3::new(0.0, 0.0, 1.0), Vector2::new(1.0, 0.0), 0.3);
            let frame = simulate_frame(&world, &cam, &k, &NoiseConfig::noiseless(0), 0);
            let props = cylinder_proposals(&frame, 0, &cam.inverse(), &k, &db).unwrap_or_default();
            let err = props.first().map_or(f64::INFINITY, |p| {
                (p.model.center() - world.objects[0].model.center()).norm()
            });
            worst_exact = worst_exact.max(err);
            exact_cases += 1;
        }
    }
    let mut errors = Vec::with_capacity(NOISY_TRIALS);
    for trial in 0..NOISY_TRIALS {
        let world = chair_world(rng.random_range(1.5..4.0), rng.random_range(-0.5..0.5));
        let cam = camera_looking(Vector3::new(0.0, 0.0, 1.0), Vector2::new(1.0, 0.0), 0.3);
        let noise = NoiseConfig {
            bbox_sigma: 2.0,
            pixel_sigma: 2.0,
            detect_prob: 1.0,
            seed: trial as u64,
            ..NoiseConfig::noiseless(0)
        };
        let frame = simulate_frame(&world, &cam, &k, &noise, 0);
        let err = cylinder_proposals(&frame, 0, &cam.inverse(), &k, &db)
            .ok()
            .and_then(|p| {
                p.first()
                    .map(|p| (p.model.center() - world.objects[0].model.center()).norm())
            })
            .unwrap_or(f64::INFINITY);
        errors.push(err);
    }
    errors.sort_by(f64::total_cmp);
    let median = 0.5 * (errors[NOISY_TRIALS / 2 - 1] + errors[NOISY_TRIALS / 2]);
    out.line(
        "geometry_round_trip",
        worst_exact < ROUND_TRIP_TOL && median < NOISY_MEDIAN_TOL,
        format!(
            "noiseless worst error {worst_exact:.1e} m over {exact_cases} placements at range <= 4 m (tol {ROUND_TRIP_TOL:e}); \
             2 px noise median {:.1} cm over {NOISY_TRIALS} trials (tol {:.0} cm)",
            median * 100.0,
            NOISY_MEDIAN_TOL * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// end-to-end

fn loop_scenario(out: &mut Report) {
    let cfg = scenario("loop.json");
    let start = Instant::now();
    let full = run_scenario(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let odo = run_scenario(&ScenarioConfig {
        use_landmarks: false,
        ..cfg.clone()
    })
    .unwrap();
    let (a, b) = (full.report.ate_rmse, odo.report.ate_rmse);
    out.line(
        "loop_scenario",
        a <= (1.0 - LOOP_REDUCTION) * b && secs < LOOP_BUDGET_S,
        format!(
            "ATE full {a:.4} m vs odometry-only {b:.4} m ({:.0}% lower, need {:.0}%); full run {secs:.1} s (budget {LOOP_BUDGET_S} s)",
            100.0 * (1.0 - a / b),
            LOOP_REDUCTION * 100.0
        ),
    );
    out.line(
        "landmark_regression_guard",
        a < b && a <= REGRESSION_SLACK * b,
        format!(
            "full-mode ATE strictly below odometry-only and within {:.0}% of it on the packaged loop",
            (REGRESSION_SLACK - 1.0) * 100.0
        ),
    );
}

fn zero_noise(out: &mut Report) {
    let run = run_scenario(&scenario("zero_noise.json")).unwrap();
    let worst = run.report.landmark_errors.iter().map(|l| l.error).fold(0.0, f64::max);
    let n = run.report.landmark_errors.len();
    out.line(
        "zero_noise",
        run.report.ate_rmse < ZERO_NOISE_TOL && worst < ZERO_NOISE_TOL && n > 0,
        format!(
            "ATE {:.1e} m, worst landmark centroid error {worst:.1e} m over {n} landmarks (tol {ZERO_NOISE_TOL:e})",
            run.report.ate_rmse
        ),
    );
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

fn determinism(out: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = scenario("loop.json");
    cfg.rounds = 2;
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        cfg.output_dir = Some(d.clone());
        run_scenario(&cfg).unwrap();
    }
    let files = [
        "trajectory_est.tum",
        "trajectory_gt.tum",
        "landmarks.json",
        "report.json",
    ];
    let same = files.iter().filter(|f| read(&dirs[0], f) == read(&dirs[1], f)).count();
    out.line(
        "determinism",
        same == files.len(),
        format!(
            "{same}/{} artifacts byte-identical across two runs with one seed",
            files.len()
        ),
    );
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let mut out = Report { failures: Vec::new() };
    println!(
        "FAIL published_dataset_rmse: the real-dataset RMSE values (e.g. lab792 0.054 m) need the recorded sequences, a trained \
         detector and the robot; not reproducible here, covered by the property criteria below"
    );
    gradient_suite(&mut out);
    crf_oracle(&mut out);
    association_oracle(&mut out);
    geometry_round_trip(&mut out);
    loop_scenario(&mut out);
    zero_noise(&mut out);
    determinism(&mut out);
    let secs = start.elapsed().as_secs_f64();
    out.line(
        "suite_runtime",
        secs < SUITE_BUDGET_S,
        format!("acceptance target ran in {secs:.1} s (budget {SUITE_BUDGET_S} s for the full suite)"),
    );
    assert!(out.failures.is_empty(), "failed criteria: {:?}", out.failures);
}
