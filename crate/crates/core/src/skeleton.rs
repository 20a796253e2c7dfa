//! Skeleton description: joint tree, bone offsets, mirror map and zones.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Body region a joint belongs to. The four limb zones drive benchmark
/// generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Zone {
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
    Hips,
    Head,
}

impl Zone {
    pub const LIMBS: [Zone; 4] = [Zone::LeftArm, Zone::RightArm, Zone::LeftLeg, Zone::RightLeg];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// Parent index; `None` only for the root at index 0.
    pub parent: Option<usize>,
    /// Displacement from the parent when this joint's local rotation is identity.
    pub offset: [f64; 3],
    /// Name of the mirrored joint (itself for joints on the symmetry plane).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mirror: Option<String>,
    pub zone: Zone,
}

/// Named joints used by the 5-point benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Landmarks {
    pub chest: String,
    pub left_hand: String,
    pub right_hand: String,
    pub left_foot: String,
    pub right_foot: String,
}

impl Default for Landmarks {
    fn default() -> Self {
        Self {
            chest: "Chest".into(),
            left_hand: "HandLeft".into(),
            right_hand: "HandRight".into(),
            left_foot: "FootLeft".into(),
            right_foot: "FootRight".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub name: String,
    pub joints: Vec<Joint>,
    #[serde(default)]
    pub landmarks: Landmarks,
    #[serde(skip)]
    by_name: HashMap<String, usize>,
}

impl SkeletonSpec {
    /// Builds and validates a skeleton. Joint order defines joint indices.
    pub fn new(name: impl Into<String>, joints: Vec<Joint>, landmarks: Landmarks) -> Result<Self> {
        let mut spec = Self {
            name: name.into(),
            joints,
            landmarks,
            by_name: HashMap::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&mut self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::Skeleton("skeleton has no joints".into()));
        }
        self.by_name.clear();
        for (i, j) in self.joints.iter().enumerate() {
            if self.by_name.insert(j.name.clone(), i).is_some() {
                return Err(Error::Skeleton(format!("duplicate joint name {:?}", j.name)));
            }
            match (i, j.parent) {
                (0, None) => {}
                (0, Some(_)) => return Err(Error::Skeleton("joint 0 must be the root".into())),
                (_, None) => {
                    return Err(Error::Skeleton(format!("joint {:?} has no parent; only index 0 may be root", j.name)))
                }
                (_, Some(p)) if p >= i => {
                    return Err(Error::Skeleton(format!(
                        "joint {:?} (index {i}) has parent {p}; parents must precede children",
                        j.name
                    )))
                }
                _ => {}
            }
            if j.offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::Skeleton(format!("joint {:?} has a non-finite offset", j.name)));
            }
        }
        for j in &self.joints {
            let Some(m) = &j.mirror else { continue };
            let Some(&mi) = self.by_name.get(m) else {
                return Err(Error::Skeleton(format!("joint {:?} mirrors unknown joint {m:?}", j.name)));
            };
            if self.joints[mi].mirror.as_deref() != Some(j.name.as_str()) {
                return Err(Error::Skeleton(format!("mirror map is not an involution at {:?}", j.name)));
            }
        }
        for zone in Zone::LIMBS {
            if !self.joints.iter().any(|j| j.zone == zone) {
                return Err(Error::Skeleton(format!("zone {zone:?} has no joints")));
            }
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.joints[joint].parent
    }

    pub fn offset(&self, joint: usize) -> Vec3 {
        Vec3::from(self.joints[joint].offset)
    }

    /// Mirror index per joint; fails if any joint lacks a mirror entry.
    pub fn mirror_indices(&self) -> Result<Vec<usize>> {
        self.joints
            .iter()
            .map(|j| {
                let m = j
                    .mirror
                    .as_deref()
                    .ok_or_else(|| Error::Skeleton(format!("joint {:?} has no mirror entry", j.name)))?;
                self.index_of(m)
                    .ok_or_else(|| Error::Skeleton(format!("unknown mirror joint {m:?}")))
            })
            .collect()
    }

    pub fn joints_in_zone(&self, zone: Zone) -> Vec<usize> {
        (0..self.joints.len()).filter(|&i| self.joints[i].zone == zone).collect()
    }

    /// Joint indices of the 5-point benchmark, in landmark order
    /// (chest, left hand, right hand, left foot, right foot).
    pub fn landmark_indices(&self) -> Result<[usize; 5]> {
        let l = &self.landmarks;
        let mut out = [0; 5];
        for (slot, name) in out
            .iter_mut()
            .zip([&l.chest, &l.left_hand, &l.right_hand, &l.left_foot, &l.right_foot])
        {
            *slot = self
                .index_of(name)
                .ok_or_else(|| Error::Skeleton(format!("landmark joint {name:?} not found")))?;
        }
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut spec: SkeletonSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("skeleton serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Built-in skeletons by name: `humanoid64` and `minimal5`.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "humanoid64" | "humanoid" => Some(Self::humanoid()),
            "minimal5" | "minimal" => Some(Self::minimal()),
            _ => None,
        }
    }

    /// Five-joint star: a root with one joint per limb zone. Handy for tests
    /// and gradient checks.
    pub fn minimal() -> Self {
        let j = |name: &str, parent: Option<usize>, offset: [f64; 3], mirror: &str, zone| Joint {
            name: name.into(),
            parent,
            offset,
            mirror: Some(mirror.into()),
            zone,
        };
        let joints = vec![
            j("Hips", None, [0.0, 0.0, 0.0], "Hips", Zone::Hips),
            j("ArmLeft", Some(0), [0.3, 0.4, 0.0], "ArmRight", Zone::LeftArm),
            j("ArmRight", Some(0), [-0.3, 0.4, 0.0], "ArmLeft", Zone::RightArm),
            j("LegLeft", Some(0), [0.1, -0.5, 0.0], "LegRight", Zone::LeftLeg),
            j("LegRight", Some(0), [-0.1, -0.5, 0.0], "LegLeft", Zone::RightLeg),
        ];
        let landmarks = Landmarks {
            chest: "Hips".into(),
            left_hand: "ArmLeft".into(),
            right_hand: "ArmRight".into(),
            left_foot: "LegLeft".into(),
            right_foot: "LegRight".into(),
        };
        Self::new("minimal5", joints, landmarks).expect("minimal skeleton is valid")
    }

    /// 64-joint humanoid with fingers and toes, Y up, character facing +Z,
    /// left side on +X. Offsets in meters.
    pub fn humanoid() -> Self {
        let mut joints: Vec<Joint> = Vec::with_capacity(64);
        let mut push = |name: String, parent: Option<usize>, offset: [f64; 3], mirror: String, zone| {
            joints.push(Joint {
                name,
                parent,
                offset,
                mirror: Some(mirror),
                zone,
            });
            joints.len() - 1
        };
        let center = |s: &str| (s.to_string(), s.to_string());
        let (n, m) = center("Hips");
        let hips = push(n, None, [0.0, 0.0, 0.0], m, Zone::Hips);
        let (n, m) = center("Spine0");
        let spine0 = push(n, Some(hips), [0.0, 0.0, 0.0], m, Zone::Hips);
        let (n, m) = center("Spine1");
        let spine1 = push(n, Some(spine0), [0.0, 0.10, 0.01], m, Zone::Hips);
        let (n, m) = center("Chest");
        let chest = push(n, Some(spine1), [0.0, 0.13, 0.0], m, Zone::Hips);
        let (n, m) = center("Neck");
        let neck = push(n, Some(chest), [0.0, 0.22, -0.01], m, Zone::Head);
        let (n, m) = center("Head");
        push(n, Some(neck), [0.0, 0.10, 0.02], m, Zone::Head);

        let sides = [("Left", "Right", 1.0), ("Right", "Left", -1.0)];
        let mut clavicles = [0usize; 2];
        for (k, (side, other, sx)) in sides.iter().enumerate() {
            clavicles[k] = push(
                format!("Clavicle{side}"),
                Some(chest),
                [0.04 * sx, 0.17, 0.0],
                format!("Clavicle{other}"),
                if k == 0 { Zone::LeftArm } else { Zone::RightArm },
            );
        }
        let fingers: [(&str, [f64; 3], [f64; 3]); 5] = [
            ("Index", [0.09, 0.0, 0.03], [0.040, 0.025, 0.020]),
            ("Middle", [0.095, 0.0, 0.01], [0.045, 0.028, 0.022]),
            ("Ring", [0.09, 0.0, -0.01], [0.040, 0.025, 0.020]),
            ("Pinky", [0.08, 0.0, -0.03], [0.030, 0.020, 0.018]),
            ("Thumb", [0.025, -0.01, 0.035], [0.035, 0.030, 0.025]),
        ];
        for (k, (side, other, sx)) in sides.iter().enumerate() {
            let zone = if k == 0 { Zone::LeftArm } else { Zone::RightArm };
            let bicep = push(
                format!("Bicep{side}"),
                Some(clavicles[k]),
                [0.15 * sx, 0.0, 0.0],
                format!("Bicep{other}"),
                zone,
            );
            let forarm = push(
                format!("Forarm{side}"),
                Some(bicep),
                [0.28 * sx, 0.0, 0.0],
                format!("Forarm{other}"),
                zone,
            );
            let hand = push(
                format!("Hand{side}"),
                Some(forarm),
                [0.25 * sx, 0.0, 0.0],
                format!("Hand{other}"),
                zone,
            );
            for (finger, base, segs) in fingers {
                let dir = if finger == "Thumb" { [0.7, 0.0, 0.7] } else { [1.0, 0.0, 0.0] };
                let mut parent = push(
                    format!("{finger}0{side}"),
                    Some(hand),
                    [base[0] * sx, base[1], base[2]],
                    format!("{finger}0{other}"),
                    zone,
                );
                for (s, len) in segs.iter().enumerate() {
                    let suffix = if s == 2 { format!("{finger}2{side}End") } else { format!("{finger}{}{side}", s + 1) };
                    let mirror = if s == 2 { format!("{finger}2{other}End") } else { format!("{finger}{}{other}", s + 1) };
                    parent = push(
                        suffix,
                        Some(parent),
                        [dir[0] * len * sx, dir[1] * len, dir[2] * len],
                        mirror,
                        zone,
                    );
                }
            }
        }
        for (k, (side, other, sx)) in sides.iter().enumerate() {
            let zone = if k == 0 { Zone::LeftLeg } else { Zone::RightLeg };
            let thigh = push(
                format!("Thigh{side}"),
                Some(hips),
                [0.09 * sx, -0.06, 0.0],
                format!("Thigh{other}"),
                zone,
            );
            let calf = push(
                format!("Calf{side}"),
                Some(thigh),
                [0.0, -0.42, 0.0],
                format!("Calf{other}"),
                zone,
            );
            let foot = push(
                format!("Foot{side}"),
                Some(calf),
                [0.0, -0.40, -0.02],
                format!("Foot{other}"),
                zone,
            );
            let toe = push(
                format!("Toe{side}"),
                Some(foot),
                [0.0, -0.06, 0.12],
                format!("Toe{other}"),
                zone,
            );
            push(
                format!("Toe{side}End"),
                Some(toe),
                [0.0, 0.0, 0.06],
                format!("Toe{other}End"),
                zone,
            );
        }
        Self::new("humanoid64", joints, Landmarks::default()).expect("humanoid skeleton is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn humanoid_has_64_joints_and_valid_mirror() {
        let s = SkeletonSpec::humanoid();
        assert_eq!(s.joint_count(), 64);
        let m = s.mirror_indices().unwrap();
        for (i, &mi) in m.iter().enumerate() {
            assert_eq!(m[mi], i);
            let (a, b) = (s.offset(i), s.offset(mi));
            assert!((a.x + b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12 && (a.z - b.z).abs() < 1e-12);
        }
        assert_eq!(s.index_of("Chest"), Some(3));
        assert!(s.landmark_indices().is_ok());
        for z in Zone::LIMBS {
            assert!(!s.joints_in_zone(z).is_empty());
        }
    }

    #[test]
    fn json_round_trip() {
        let s = SkeletonSpec::humanoid();
        let back = SkeletonSpec::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        assert!(back.to_json().contains("\"zone\": \"left-arm\""));
    }

    #[test]
    fn rejects_bad_topology() {
        let mut joints = SkeletonSpec::minimal().joints;
        joints[2].parent = Some(3);
        assert!(matches!(
            SkeletonSpec::new("bad", joints, Landmarks::default()),
            Err(Error::Skeleton(_))
        ));
    }

    #[test]
    fn rejects_non_involutive_mirror() {
        let mut joints = SkeletonSpec::minimal().joints;
        joints[1].mirror = Some("LegLeft".into());
        assert!(SkeletonSpec::new("bad", joints, Landmarks::default()).is_err());
    }

    #[test]
    fn rejects_missing_limb_zone() {
        let mut joints = SkeletonSpec::minimal().joints;
        joints[4].zone = Zone::Head;
        assert!(SkeletonSpec::new("bad", joints, Landmarks::default()).is_err());
    }

    #[test]
    fn missing_mirror_entry_is_reported() {
        let mut joints = SkeletonSpec::minimal().joints;
        joints[0].mirror = None;
        let s = SkeletonSpec::new("nomirror", joints, Landmarks::default()).unwrap();
        assert!(matches!(s.mirror_indices(), Err(Error::Skeleton(_))));
    }
}
