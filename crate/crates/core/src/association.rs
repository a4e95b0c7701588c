//! Measurement-to-landmark association.
//!
//! A measurement is a selected proposal expressed in the world frame. Its
//! weight for landmark `j` is
//! `ω · p0 · pc · exp(−d²/(2σ²))`, with `ω` the label gate, `p0` a tracking
//! prior, `pc` a semantic prior and `d` the centroid distance.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, LandmarkModel};
use crate::graph_opt::truncation_residual;

/// Feature count at which the tracking prior saturates.
pub const FEATURE_CAP: f64 = 50.0;
/// Floor of the semantic prior.
pub const SEMANTIC_FLOOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationConfig {
    /// Distance kernel width, meters.
    pub sigma: f64,
    /// Creation threshold on the largest unnormalized weight.
    pub tau: f64,
    /// Slack allowed when binding feature points to a landmark volume, meters.
    pub point_margin: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            tau: 0.2,
            point_margin: 0.15,
        }
    }
}

/// Per-frame priors `p0` (tracking) and `pc` (semantic).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub p0: f64,
    pub pc: f64,
}

impl Priors {
    /// `p0 = min(n / 50, 1)` from the tracked features in the box;
    /// `pc = max(β, 0.05)` from the semantic match with the previous frame.
    pub fn new(tracked_features: usize, beta: f64) -> Self {
        Self {
            p0: (tracked_features as f64 / FEATURE_CAP).min(1.0),
            pc: beta.max(SEMANTIC_FLOOR),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: usize,
    /// Current world-frame estimate.
    pub model: LandmarkModel,
    pub created_frame: usize,
    pub observations: usize,
    /// Confidence proxy used to weight the landmark's factors.
    pub weight: f64,
}

impl Landmark {
    pub fn label(&self) -> &str {
        self.model.label()
    }
}

/// Weights over the landmarks that pass the label gate.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationWeights {
    /// Landmark indices (into the slice given) with a matching label.
    pub candidates: Vec<usize>,
    /// Normalized weights, parallel to `candidates`.
    pub weights: Vec<f64>,
    /// Largest unnormalized weight; 0 when no candidate.
    pub max_unnormalized: f64,
}

impl AssociationWeights {
    /// Index (into the landmark slice) of the largest weight; lowest index on ties.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&c, &w) in self.candidates.iter().zip(&self.weights) {
            if best.is_none_or(|(_, bw)| w > bw) {
                best = Some((c, w));
            }
        }
        best.map(|(c, _)| c)
    }
}

/// Log of the unnormalized weight, or `None` when the label gate is closed.
fn log_weight(measurement: &LandmarkModel, landmark: &LandmarkModel, priors: &Priors, sigma: f64) -> Option<f64> {
    if measurement.label() != landmark.label() {
        return None;
    }
    let d2 = (measurement.center() - landmark.center()).norm_squared();
    Some(priors.p0.ln() + priors.pc.ln() - d2 / (2.0 * sigma * sigma))
}

/// Association weights of a world-frame measurement against every landmark.
///
/// `exclude` marks landmarks that are unavailable (e.g. already claimed in
/// the same frame); pass an empty slice to consider all.
pub fn association_weights(
    measurement: &LandmarkModel,
    landmarks: &[Landmark],
    priors: &Priors,
    sigma: f64,
    exclude: &[bool],
) -> AssociationWeights {
    let mut candidates = Vec::new();
    let mut logs = Vec::new();
    for (k, l) in landmarks.iter().enumerate() {
        if exclude.get(k).copied().unwrap_or(false) {
            continue;
        }
        if let Some(lw) = log_weight(measurement, &l.model, priors, sigma) {
            candidates.push(k);
            logs.push(lw);
        }
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights = if top == f64::NEG_INFINITY {
        // every candidate has a zero prior: spread evenly
        vec![1.0 / logs.len() as f64; logs.len()]
    } else {
        let e: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let sum: f64 = e.iter().sum();
        e.into_iter().map(|x| x / sum).collect()
    };
    AssociationWeights {
        candidates,
        weights,
        max_unnormalized: if top.is_finite() { top.exp() } else { 0.0 },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AssociationResult {
    Existing {
        landmark: usize,
        weights: AssociationWeights,
    },
    NewLandmark,
}

/// Associates to the argmax landmark (returned as its `id`) when the largest
/// unnormalized weight reaches `τ`; otherwise asks for a new landmark.
pub fn assign_or_create(
    measurement: &LandmarkModel,
    landmarks: &[Landmark],
    priors: &Priors,
    cfg: &AssociationConfig,
    exclude: &[bool],
) -> AssociationResult {
    let w = association_weights(measurement, landmarks, priors, cfg.sigma, exclude);
    match w.argmax() {
        Some(k) if w.max_unnormalized >= cfg.tau => AssociationResult::Existing {
            landmark: landmarks[k].id,
            weights: w,
        },
        _ => AssociationResult::NewLandmark,
    }
}

/// Binds a feature point to the landmark its detection was associated with,
/// when the point lies inside that landmark's volume up to `margin`.
pub fn feature_point_association(point: &Vector3<f64>, landmark: Option<&Landmark>, margin: f64) -> Option<usize> {
    let l = landmark?;
    (truncation_residual(point, &l.model).norm() <= margin).then_some(l.id)
}

/// Landmarks created so far. Single writer: one mapping session owns it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRegistry {
    pub landmarks: Vec<Landmark>,
    next_id: usize,
}

impl LandmarkRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.landmarks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.landmarks.is_empty()
    }

    pub fn create(&mut self, model: LandmarkModel, frame: usize, weight: f64) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        self.landmarks.push(Landmark {
            id,
            model,
            created_frame: frame,
            observations: 1,
            weight,
        });
        id
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.landmarks.iter().position(|l| l.id == id)
    }

    pub fn get(&self, id: usize) -> Option<&Landmark> {
        self.index_of(id).map(|k| &self.landmarks[k])
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut Landmark> {
        self.index_of(id).map(move |k| &mut self.landmarks[k])
    }

    /// Records an observation, moving the estimate toward `measurement` by a running mean.
    pub fn observe(&mut self, id: usize, measurement: &LandmarkModel) {
        let Some(l) = self.get_mut(id) else { return };
        l.observations += 1;
        let a = 1.0 / l.observations as f64;
        let c = *l.model.center() + (measurement.center() - l.model.center()) * a;
        *l.model.center_mut() = c;
        if let (LandmarkModel::Cuboid(lc), LandmarkModel::Cuboid(mc)) = (&mut l.model, measurement) {
            // yaw is defined modulo π for a box; average on the doubled angle
            let d = wrap_angle(2.0 * (mc.yaw - lc.yaw)) / 2.0;
            lc.yaw = wrap_angle(lc.yaw + a * d);
        }
    }

    /// Drops landmarks for which `keep` is false.
    pub fn retain(&mut self, keep: impl FnMut(&Landmark) -> bool) {
        self.landmarks.retain(keep);
    }

    /// Rebuilds a registry from landmarks (ids must be unique).
    pub fn from_landmarks(landmarks: Vec<Landmark>) -> Self {
        let next_id = landmarks.iter().map(|l| l.id + 1).max().unwrap_or(0);
        Self { landmarks, next_id }
    }

    /// Id the next created landmark will get.
    pub fn next_id(&self) -> usize {
        self.next_id
    }

    /// Like [`Self::from_landmarks`] but keeps an explicit id counter (never below the ids in use).
    pub fn with_next_id(landmarks: Vec<Landmark>, next_id: usize) -> Self {
        let mut r = Self::from_landmarks(landmarks);
        r.next_id = r.next_id.max(next_id);
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CuboidModel, CylinderModel};
    use proptest::prelude::*;

    fn chair(x: f64, y: f64) -> LandmarkModel {
        LandmarkModel::Cylinder(CylinderModel::grounded(x, y, 1.0, 0.3, "chair"))
    }

    fn sofa(x: f64, y: f64) -> LandmarkModel {
        LandmarkModel::Cuboid(CuboidModel::grounded(x, y, Vector3::new(1.8, 0.9, 0.8), 0.0, "sofa"))
    }

    fn registry(models: Vec<LandmarkModel>) -> LandmarkRegistry {
        let mut r = LandmarkRegistry::new();
        for m in models {
            r.create(m, 0, 1.0);
        }
        r
    }

    const FULL: Priors = Priors { p0: 1.0, pc: 1.0 };

    #[test]
    fn single_match_at_zero_distance() {
        let r = registry(vec![chair(1.0, 2.0)]);
        let w = association_weights(&chair(1.0, 2.0), &r.landmarks, &FULL, 0.5, &[]);
        assert_eq!(w.weights, vec![1.0]);
        assert_eq!(w.max_unnormalized, 1.0);
    }

    #[test]
    fn label_mismatch_closes_gate() {
        let r = registry(vec![sofa(1.0, 2.0), sofa(0.0, 0.0)]);
        let w = association_weights(&chair(1.0, 2.0), &r.landmarks, &FULL, 0.5, &[]);
        assert!(w.weights.is_empty());
        assert_eq!(w.max_unnormalized, 0.0);
        assert_eq!(
            assign_or_create(
                &chair(1.0, 2.0),
                &r.landmarks,
                &FULL,
                &AssociationConfig::default(),
                &[]
            ),
            AssociationResult::NewLandmark
        );
    }

    #[test]
    fn equidistant_split_evenly() {
        let r = registry(vec![chair(1.0, 0.0), chair(-1.0, 0.0)]);
        let w = association_weights(&chair(0.0, 0.0), &r.landmarks, &FULL, 0.5, &[]);
        assert_eq!(w.weights, vec![0.5, 0.5]);
        assert_eq!(w.argmax(), Some(0));
    }

    #[test]
    fn assign_and_create_thresholds() {
        let cfg = AssociationConfig::default();
        let r = registry(vec![chair(0.0, 0.0)]);
        // d chosen so the kernel is 0.9
        let d = (-2.0 * 0.25 * 0.9f64.ln()).sqrt();
        match assign_or_create(&chair(d, 0.0), &r.landmarks, &FULL, &cfg, &[]) {
            AssociationResult::Existing { landmark, weights } => {
                assert_eq!(landmark, 0);
                assert!((weights.max_unnormalized - 0.9).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            assign_or_create(&chair(0.0, 0.0), &[], &FULL, &cfg, &[]),
            AssociationResult::NewLandmark
        );
        // priors 0.5 × 0.2 with zero distance give 0.1 < τ
        let weak = Priors { p0: 0.5, pc: 0.2 };
        assert_eq!(
            assign_or_create(&chair(0.0, 0.0), &r.landmarks, &weak, &cfg, &[]),
            AssociationResult::NewLandmark
        );
    }

    #[test]
    fn priors_from_counts() {
        let p = Priors::new(25, 0.0);
        assert_eq!(p.p0, 0.5);
        assert_eq!(p.pc, SEMANTIC_FLOOR);
        assert_eq!(Priors::new(500, 0.7).p0, 1.0);
    }

    #[test]
    fn excluded_landmarks_skipped() {
        let r = registry(vec![chair(0.0, 0.0), chair(0.3, 0.0)]);
        let w = association_weights(&chair(0.0, 0.0), &r.landmarks, &FULL, 0.5, &[true, false]);
        assert_eq!(w.candidates, vec![1]);
    }

    #[test]
    fn feature_point_binding() {
        let r = registry(vec![chair(2.0, 0.0)]);
        let l = &r.landmarks[0];
        assert_eq!(
            feature_point_association(&Vector3::new(2.1, 0.0, 0.5), Some(l), 0.0),
            Some(0)
        );
        assert_eq!(
            feature_point_association(&Vector3::new(3.3, 0.0, 0.5), Some(l), 0.15),
            None
        );
        // a point inside a person box has no associated landmark
        assert_eq!(
            feature_point_association(&Vector3::new(2.0, 0.0, 0.5), None, 0.15),
            None
        );
    }

    #[test]
    fn registry_observe_moves_estimate() {
        let mut r = registry(vec![chair(0.0, 0.0)]);
        r.observe(0, &chair(1.0, 0.0));
        let l = r.get(0).unwrap();
        assert_eq!(l.observations, 2);
        assert!((l.model.center().x - 0.5).abs() < 1e-15);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<LandmarkRegistry>(&json).unwrap(), r);
    }

    proptest! {
        #[test]
        fn weights_form_distribution(
            pts in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, any::<bool>()), 1..10),
            m in (-5.0..5.0f64, -5.0..5.0f64),
            p0 in 0.01..1.0f64,
            pc in 0.05..1.0f64,
        ) {
            let r = registry(pts.iter().map(|&(x, y, s)| if s { sofa(x, y) } else { chair(x, y) }).collect());
            let w = association_weights(&chair(m.0, m.1), &r.landmarks, &Priors { p0, pc }, 0.5, &[]);
            for &c in &w.candidates {
                prop_assert_eq!(r.landmarks[c].label(), "chair");
            }
            if !w.candidates.is_empty() {
                prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
