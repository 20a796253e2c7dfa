//! Effectors: typed sparse constraints on joints, their validation, centering
//! and the per-row network input encoding.

use std::collections::HashSet;
use std::fmt;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{rotation6d_to_matrix, Vec3};
use crate::skeleton::SkeletonSpec;

/// Effector kind. The discriminants are the type ids seen by the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EffectorType {
    #[serde(rename = "position")]
    Position = 0,
    #[serde(rename = "rotation")]
    Rotation = 1,
    #[serde(rename = "lookat")]
    LookAt = 2,
}

impl EffectorType {
    pub const ALL: [EffectorType; 3] = [EffectorType::Position, EffectorType::Rotation, EffectorType::LookAt];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for EffectorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EffectorType::Position => "position",
            EffectorType::Rotation => "rotation",
            EffectorType::LookAt => "lookat",
        })
    }
}

/// One constraint. `data` layout by type:
/// position `[x, y, z, 0, 0, 0]`, rotation `[col1, col2]` of the global
/// rotation, look-at `[target, local direction]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Effector {
    pub joint: usize,
    pub kind: EffectorType,
    pub data: [f64; 6],
    /// Λ in `[0, 1]`; larger is looser.
    pub tolerance: f64,
}

impl Effector {
    pub fn position(joint: usize, p: Vec3, tolerance: f64) -> Self {
        Self {
            joint,
            kind: EffectorType::Position,
            data: [p.x, p.y, p.z, 0.0, 0.0, 0.0],
            tolerance,
        }
    }

    pub fn point(&self) -> Vec3 {
        Vec3::new(self.data[0], self.data[1], self.data[2])
    }

    pub fn direction(&self) -> Vec3 {
        Vec3::new(self.data[3], self.data[4], self.data[5])
    }

    fn check(&self, joint_count: usize, path: &str) -> Result<()> {
        let bad = |field: &str, message: String| Error::InvalidEffector {
            path: format!("{path}.{field}"),
            message,
        };
        if self.joint >= joint_count {
            return Err(bad("joint", format!("joint {} out of range [0, {joint_count})", self.joint)));
        }
        if !(0.0..=1.0).contains(&self.tolerance) {
            return Err(bad("tolerance", format!("{} is outside [0, 1]", self.tolerance)));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(bad("data", "non-finite value".into()));
        }
        match self.kind {
            EffectorType::Position => {
                if self.data[3..].iter().any(|&v| v != 0.0) {
                    return Err(bad("data", "position effectors must have zeros in slots 4..6".into()));
                }
            }
            EffectorType::Rotation => {
                rotation6d_to_matrix(&self.data).map_err(|e| bad("data", e.to_string()))?;
            }
            EffectorType::LookAt => {
                let n = self.direction().norm();
                if (n - 1.0).abs() > 1e-4 {
                    return Err(bad("data", format!("look-at direction has norm {n}, expected 1")));
                }
            }
        }
        Ok(())
    }
}

/// Validated, non-empty list of effectors without duplicate `(joint, type)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectorSet {
    effectors: Vec<Effector>,
}

impl EffectorSet {
    pub fn new(effectors: Vec<Effector>, joint_count: usize) -> Result<Self> {
        if effectors.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut seen = HashSet::new();
        for (i, e) in effectors.iter().enumerate() {
            let path = format!("effectors[{i}]");
            e.check(joint_count, &path)?;
            if !seen.insert((e.joint, e.kind)) {
                return Err(Error::InvalidEffector {
                    path,
                    message: format!("duplicate ({}, {}) effector", e.joint, e.kind),
                });
            }
        }
        Ok(Self { effectors })
    }

    pub fn effectors(&self) -> &[Effector] {
        &self.effectors
    }

    pub fn len(&self) -> usize {
        self.effectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.effectors.is_empty()
    }

    pub fn into_inner(self) -> Vec<Effector> {
        self.effectors
    }

    /// Adds `delta` to every position-like coordinate (position data and
    /// look-at targets).
    pub fn translated(&self, delta: &Vec3) -> Self {
        let effectors = self
            .effectors
            .iter()
            .map(|e| {
                let mut e = *e;
                if e.kind != EffectorType::Rotation {
                    for k in 0..3 {
                        e.data[k] += delta[k];
                    }
                }
                e
            })
            .collect();
        Self { effectors }
    }
}

/// Effectors re-expressed relative to the centroid of the positional effectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredEffectorSet {
    pub effectors: Vec<Effector>,
    pub centroid: Vec3,
}

impl CenteredEffectorSet {
    /// Adds the centroid back.
    pub fn uncentered(&self) -> Vec<Effector> {
        EffectorSet {
            effectors: self.effectors.clone(),
        }
        .translated(&self.centroid)
        .effectors
    }
}

/// Subtracts the positional centroid (origin when there are no positional
/// effectors) from position data and look-at targets.
pub fn center_effectors(set: &EffectorSet) -> CenteredEffectorSet {
    let mut sum = Vec3::zeros();
    let mut count = 0usize;
    for e in set.effectors() {
        if e.kind == EffectorType::Position {
            sum += e.point();
            count += 1;
        }
    }
    let centroid = if count == 0 { Vec3::zeros() } else { sum / count as f64 };
    CenteredEffectorSet {
        effectors: set.translated(&-centroid).effectors,
        centroid,
    }
}

/// Width of one encoder input row for embedding width `d_e`.
pub fn encoded_width(embedding_dim: usize) -> usize {
    7 + 2 * embedding_dim
}

/// Rows `[data(6), Λ, joint_embedding[joint], type_embedding[type]]`, one per
/// effector in set order.
pub fn encode_effector_inputs(
    set: &CenteredEffectorSet,
    joint_embedding: ArrayView2<f64>,
    type_embedding: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let d_e = joint_embedding.ncols();
    if type_embedding.ncols() != d_e || type_embedding.nrows() != 3 {
        return Err(shape_err(format!(
            "type embedding is {:?}, expected [3, {d_e}]",
            type_embedding.shape()
        )));
    }
    let mut out = Array2::zeros((set.effectors.len(), encoded_width(d_e)));
    for (i, e) in set.effectors.iter().enumerate() {
        if e.joint >= joint_embedding.nrows() {
            return Err(shape_err(format!(
                "joint {} outside embedding table of {} rows",
                e.joint,
                joint_embedding.nrows()
            )));
        }
        let mut row = out.row_mut(i);
        for k in 0..6 {
            row[k] = e.data[k];
        }
        row[6] = e.tolerance;
        row.slice_mut(s![7..7 + d_e]).assign(&joint_embedding.row(e.joint));
        row.slice_mut(s![7 + d_e..]).assign(&type_embedding.row(e.kind.index()));
    }
    Ok(out)
}

/// Joint reference in interchange documents: index or joint name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum JointRef {
    Index(usize),
    Name(String),
}

/// Interchange form of one effector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectorRecord {
    pub joint: JointRef,
    #[serde(rename = "type")]
    pub kind: EffectorType,
    pub data: [f64; 6],
    pub tolerance: f64,
}

impl EffectorRecord {
    /// Record naming the joint by its skeleton name.
    pub fn from_effector(e: &Effector, skeleton: &SkeletonSpec) -> Self {
        Self {
            joint: JointRef::Name(skeleton.joints[e.joint].name.clone()),
            kind: e.kind,
            data: e.data,
            tolerance: e.tolerance,
        }
    }
}

/// Resolves interchange records against a skeleton into a validated set.
/// Errors name the offending field, e.g. `effectors[2].joint`.
pub fn resolve_records(records: &[EffectorRecord], skeleton: &SkeletonSpec) -> Result<EffectorSet> {
    let mut effectors = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let joint = match &r.joint {
            JointRef::Index(j) => *j,
            JointRef::Name(name) => skeleton.index_of(name).ok_or_else(|| Error::InvalidEffector {
                path: format!("effectors[{i}].joint"),
                message: format!("unknown joint {name:?}"),
            })?,
        };
        effectors.push(Effector {
            joint,
            kind: r.kind,
            data: r.data,
            tolerance: r.tolerance,
        });
    }
    EffectorSet::new(effectors, skeleton.joint_count())
}
