//! Object database: class label → shape and size, plus the fixed 6-bit class
//! codes used for semantic sequences.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CuboidModel, CylinderModel, LandmarkModel};

/// 6-bit class code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassCode(u8);

impl ClassCode {
    pub const BITS: usize = 6;

    pub fn new(code: u8) -> Option<Self> {
        (code < 64).then_some(Self(code))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Fixed-width binary form, e.g. `000001`.
    pub fn bits(self) -> String {
        format!("{:06b}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum ShapeSpec {
    /// `dims = [height, radius]`
    Cylinder { dims: [f64; 2] },
    /// `dims = [w, l, h]`
    Cuboid { dims: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    #[serde(flatten)]
    pub shape: ShapeSpec,
    /// Explicit 6-bit code; assigned automatically when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<u8>,
}

#[derive(Debug, Error)]
pub enum DatabaseError {
    #[error("reading object database: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing object database: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("class `{label}`: {reason}")]
    Invalid { label: String, reason: String },
}

/// Known object classes with their predefined 3D size.
///
/// Labels that are not in the database (e.g. `person`) still get a class code
/// so they take part in semantic sequences, but produce no 3D proposals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, ObjectSpec>", into = "BTreeMap<String, ObjectSpec>")]
pub struct ObjectDatabase {
    specs: BTreeMap<String, ObjectSpec>,
    codes: BTreeMap<String, ClassCode>,
}

/// Codes reserved for the common indoor classes.
const BUILTIN_CODES: [(&str, u8); 4] = [("chair", 1), ("sofa", 2), ("door", 3), ("person", 4)];

impl TryFrom<BTreeMap<String, ObjectSpec>> for ObjectDatabase {
    type Error = DatabaseError;

    fn try_from(specs: BTreeMap<String, ObjectSpec>) -> Result<Self, Self::Error> {
        for (label, spec) in &specs {
            let dims: &[f64] = match &spec.shape {
                ShapeSpec::Cylinder { dims } => dims,
                ShapeSpec::Cuboid { dims } => dims,
            };
            if dims.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
                return Err(DatabaseError::Invalid {
                    label: label.clone(),
                    reason: "dimensions must be positive".into(),
                });
            }
            if spec.code.is_some_and(|c| c >= 64) {
                return Err(DatabaseError::Invalid {
                    label: label.clone(),
                    reason: "class code must fit in 6 bits".into(),
                });
            }
        }
        let mut db = ObjectDatabase {
            specs,
            codes: BTreeMap::new(),
        };
        for (label, code) in BUILTIN_CODES {
            db.codes.insert(label.to_string(), ClassCode(code));
        }
        let explicit: Vec<(String, u8)> = db
            .specs
            .iter()
            .filter_map(|(l, s)| s.code.map(|c| (l.clone(), c)))
            .collect();
        for (label, code) in explicit {
            db.codes.insert(label, ClassCode(code));
        }
        let missing: Vec<String> = db
            .specs
            .keys()
            .filter(|l| !db.codes.contains_key(*l))
            .cloned()
            .collect();
        for label in missing {
            db.register(&label);
        }
        Ok(db)
    }
}

impl From<ObjectDatabase> for BTreeMap<String, ObjectSpec> {
    fn from(db: ObjectDatabase) -> Self {
        db.specs
    }
}

impl Default for ObjectDatabase {
    /// Swivel chair, sofa and door.
    fn default() -> Self {
        let mut specs = BTreeMap::new();
        specs.insert(
            "chair".to_string(),
            ObjectSpec {
                shape: ShapeSpec::Cylinder { dims: [1.0, 0.3] },
                code: None,
            },
        );
        specs.insert(
            "sofa".to_string(),
            ObjectSpec {
                shape: ShapeSpec::Cuboid { dims: [1.8, 0.9, 0.8] },
                code: None,
            },
        );
        specs.insert(
            "door".to_string(),
            ObjectSpec {
                shape: ShapeSpec::Cuboid { dims: [0.9, 0.1, 2.0] },
                code: None,
            },
        );
        ObjectDatabase::try_from(specs).expect("builtin database is valid")
    }
}

impl ObjectDatabase {
    pub fn load(path: &Path) -> Result<Self, DatabaseError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn spec(&self, label: &str) -> Option<&ObjectSpec> {
        self.specs.get(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.specs.keys().map(String::as_str)
    }

    /// Class code of a label, assigning the lowest free code on first use.
    pub fn code(&self, label: &str) -> Option<ClassCode> {
        self.codes.get(label).copied()
    }

    pub fn register(&mut self, label: &str) -> ClassCode {
        if let Some(c) = self.codes.get(label) {
            return *c;
        }
        let used: std::collections::BTreeSet<u8> = self.codes.values().map(|c| c.0).collect();
        let free = (1..64u8).find(|c| !used.contains(c)).expect("class codes exhausted");
        self.codes.insert(label.to_string(), ClassCode(free));
        ClassCode(free)
    }

    /// A grounded model of class `label` at ground position `(x, y)`.
    pub fn grounded_model(&self, label: &str, x: f64, y: f64, yaw: f64) -> Option<LandmarkModel> {
        Some(match &self.spec(label)?.shape {
            ShapeSpec::Cylinder { dims } => {
                LandmarkModel::Cylinder(CylinderModel::grounded(x, y, dims[0], dims[1], label))
            }
            ShapeSpec::Cuboid { dims } => {
                LandmarkModel::Cuboid(CuboidModel::grounded(x, y, Vector3::from(*dims), yaw, label))
            }
        })
    }
}
