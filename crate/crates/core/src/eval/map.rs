//! Landmark map export for plotting (a top-view 2.5D semantic map).

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{EvalError, SCHEMA_VERSION};
use crate::association::{Landmark, LandmarkRegistry};
use crate::geometry::{CuboidModel, CylinderModel, LandmarkModel};

/// Vertices of the top-view footprint of a cylinder.
const FOOTPRINT_SAMPLES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub id: usize,
    pub label: String,
    /// `cylinder` or `cuboid`.
    pub shape: String,
    /// Cylinder: `[height, radius]`; cuboid: `[w, l, h]`.
    pub dims: Vec<f64>,
    /// World position of the centre.
    pub position: [f64; 3],
    pub yaw: f64,
    pub observations: usize,
    pub created_frame: usize,
    pub weight: f64,
    /// Footprint polygon on the ground plane.
    pub top_view: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkMap {
    pub schema_version: u32,
    pub next_id: usize,
    pub landmarks: Vec<LandmarkRecord>,
}

fn footprint(model: &LandmarkModel) -> Vec<[f64; 2]> {
    match model {
        LandmarkModel::Cylinder(c) => (0..FOOTPRINT_SAMPLES)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / FOOTPRINT_SAMPLES as f64;
                [c.center.x + c.radius * a.cos(), c.center.y + c.radius * a.sin()]
            })
            .collect(),
        LandmarkModel::Cuboid(c) => c.corners()[..4].iter().map(|p| [p.x, p.y]).collect(),
    }
}

pub fn landmark_record(l: &Landmark) -> LandmarkRecord {
    let dims = match &l.model {
        LandmarkModel::Cylinder(c) => vec![c.height, c.radius],
        LandmarkModel::Cuboid(c) => vec![c.dims.x, c.dims.y, c.dims.z],
    };
    let c = l.model.center();
    LandmarkRecord {
        id: l.id,
        label: l.label().to_string(),
        shape: l.model.shape_name().to_string(),
        dims,
        position: [c.x, c.y, c.z],
        yaw: l.model.yaw(),
        observations: l.observations,
        created_frame: l.created_frame,
        weight: l.weight,
        top_view: footprint(&l.model),
    }
}

impl LandmarkRecord {
    pub fn to_landmark(&self) -> Result<Landmark, EvalError> {
        let bad = |why: &str| EvalError::Map(format!("landmark {}: {why}", self.id));
        let center = Vector3::from(self.position);
        let model = match (self.shape.as_str(), self.dims.as_slice()) {
            ("cylinder", &[height, radius]) => LandmarkModel::Cylinder(CylinderModel {
                center,
                height,
                radius,
                label: self.label.clone(),
            }),
            ("cuboid", &[w, l, h]) => LandmarkModel::Cuboid(CuboidModel {
                center,
                dims: Vector3::new(w, l, h),
                yaw: self.yaw,
                label: self.label.clone(),
            }),
            ("cylinder" | "cuboid", _) => return Err(bad("wrong number of dims")),
            _ => return Err(bad("unknown shape")),
        };
        Ok(Landmark {
            id: self.id,
            model,
            created_frame: self.created_frame,
            observations: self.observations,
            weight: self.weight,
        })
    }
}

pub fn landmark_map(registry: &LandmarkRegistry) -> LandmarkMap {
    LandmarkMap {
        schema_version: SCHEMA_VERSION,
        next_id: registry.next_id(),
        landmarks: registry.landmarks.iter().map(landmark_record).collect(),
    }
}

/// Writes the registry as pretty JSON.
pub fn export_landmark_map(registry: &LandmarkRegistry, path: &Path) -> Result<(), EvalError> {
    let text = serde_json::to_string_pretty(&landmark_map(registry))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Reads a map written by [`export_landmark_map`] back into a registry.
pub fn read_landmark_map(path: &Path) -> Result<LandmarkRegistry, EvalError> {
    let map: LandmarkMap = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if map.schema_version != SCHEMA_VERSION {
        return Err(EvalError::Map(format!(
            "unsupported schema_version {}",
            map.schema_version
        )));
    }
    let landmarks = map
        .landmarks
        .iter()
        .map(LandmarkRecord::to_landmark)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LandmarkRegistry::with_next_id(landmarks, map.next_id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_registry_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.json");
        export_landmark_map(&LandmarkRegistry::new(), &p).unwrap();
        let map: LandmarkMap = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert!(map.landmarks.is_empty());
        assert_eq!(read_landmark_map(&p).unwrap(), LandmarkRegistry::new());
    }

    #[test]
    fn chair_record_and_round_trip() {
        let mut reg = LandmarkRegistry::new();
        reg.create(
            LandmarkModel::Cylinder(CylinderModel::grounded(1.0 / 3.0, -2.7, 1.0, 0.3, "chair")),
            4,
            0.83,
        );
        reg.create(
            LandmarkModel::Cuboid(CuboidModel::grounded(
                2.0,
                0.1,
                Vector3::new(1.8, 0.9, 0.8),
                0.7,
                "sofa",
            )),
            9,
            0.6,
        );
        reg.retain(|l| l.id == 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.json");
        export_landmark_map(&reg, &p).unwrap();
        let map: LandmarkMap = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(map.landmarks.len(), 1);
        assert_eq!(map.landmarks[0].shape, "cylinder");
        assert_eq!(map.landmarks[0].top_view.len(), FOOTPRINT_SAMPLES);
        let back = read_landmark_map(&p).unwrap();
        assert_eq!(back, reg);
        assert_eq!(back.next_id(), 2);
    }
}
