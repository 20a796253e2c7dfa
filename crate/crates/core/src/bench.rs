//! Frozen evaluation benchmarks, the three test metrics and the
//! effector-count sweep.
//!
//! A benchmark file is JSON: a header (format tag, seed, effector count,
//! skeleton name, dataset hash) and one item per test frame holding the frame
//! index and its effectors in interchange form with noise already applied.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::data::PoseDataset;
use crate::effector::{resolve_records, Effector, EffectorRecord, EffectorSet, EffectorType, JointRef};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::kinematics::Pose;
use crate::losses::{geodesic_distance_exact, l2_vec3};
use crate::model::Model;
use crate::noise::{make_effector, NoiseConfig};
use crate::skeleton::{SkeletonSpec, Zone};

pub const FORMAT: &str = "protores-benchmark/1";
/// Effector counts of the random benchmark files.
pub const RANDOM_COUNTS: std::ops::RangeInclusive<usize> = 6..=12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    /// Index of the ground-truth frame in the dataset the file was built from.
    pub frame: usize,
    pub effectors: Vec<EffectorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkFile {
    pub format: String,
    pub name: String,
    pub seed: Option<u64>,
    pub effector_count: usize,
    pub skeleton: String,
    pub dataset_hash: String,
    pub items: Vec<BenchmarkItem>,
}

impl BenchmarkFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("bad benchmark file: {e}")))?;
        if file.format != FORMAT {
            return Err(Error::Format(format!("unsupported benchmark format {:?}", file.format)));
        }
        if let Some(bad) = file.items.iter().position(|i| i.effectors.len() != file.effector_count) {
            return Err(Error::Format(format!("item {bad} does not have {} effectors", file.effector_count)));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn record(e: &Effector) -> EffectorRecord {
    EffectorRecord {
        joint: JointRef::Index(e.joint),
        kind: e.kind,
        data: e.data,
        tolerance: e.tolerance,
    }
}

fn file_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One file per effector count in 6..=12. Each item starts with one
/// positional effector per limb zone; the rest are drawn from every joint and
/// type without repeating a `(joint, type)` pair. Tolerances and noise are
/// drawn here and frozen into the file.
pub fn generate_random_benchmark(test: &PoseDataset, seed: u64, noise: &NoiseConfig) -> Result<Vec<BenchmarkFile>> {
    let skel = &test.skeleton;
    let zones: Vec<Vec<usize>> = Zone::LIMBS.iter().map(|z| skel.joints_in_zone(*z)).collect();
    if let Some(k) = zones.iter().position(|z| z.is_empty()) {
        return Err(Error::Skeleton(format!("no joints in zone {:?}", Zone::LIMBS[k])));
    }
    let j = skel.joint_count();
    let hash = test.content_hash();
    let globals: Vec<_> = test.frames.iter().map(|f| f.global_transforms(skel)).collect::<Result<_>>()?;
    RANDOM_COUNTS
        .map(|n| {
            if n > 3 * j {
                return Err(Error::Config(format!("{n} effectors exceed the {} slots of the skeleton", 3 * j)));
            }
            let mut rng = file_rng(seed, n as u64);
            let mut items = Vec::with_capacity(test.len());
            for (frame, g) in globals.iter().enumerate() {
                let mut slots: Vec<(usize, EffectorType)> = zones
                    .iter()
                    .map(|z| (z[rng.random_range(0..z.len())], EffectorType::Position))
                    .collect();
                let free: Vec<(usize, EffectorType)> = (0..j)
                    .flat_map(|joint| EffectorType::ALL.map(|t| (joint, t)))
                    .filter(|s| !slots.contains(s))
                    .collect();
                slots.extend(index::sample(&mut rng, free.len(), n - 4).into_iter().map(|k| free[k]));
                let mut effectors = Vec::with_capacity(n);
                for (joint, kind) in slots {
                    let tolerance: f64 = rng.random();
                    let (e, _) = make_effector(joint, kind, tolerance, g, noise, &mut rng)?;
                    effectors.push(record(&e));
                }
                items.push(BenchmarkItem { frame, effectors });
            }
            Ok(BenchmarkFile {
                format: FORMAT.into(),
                name: format!("random-{n:02}"),
                seed: Some(seed),
                effector_count: n,
                skeleton: skel.name.clone(),
                dataset_hash: hash.clone(),
                items,
            })
        })
        .collect()
}

/// Tolerance assigned to 5-point effectors.
pub const FIVE_POINT_TOLERANCE: f64 = 0.0;

/// Exact positions of the skeleton's five landmark joints, no noise.
pub fn generate_5point_benchmark(test: &PoseDataset) -> Result<BenchmarkFile> {
    let skel = &test.skeleton;
    let landmarks = skel.landmark_indices()?;
    let items = test
        .frames
        .iter()
        .enumerate()
        .map(|(frame, f)| {
            let g = f.global_transforms(skel)?;
            let effectors = landmarks
                .iter()
                .map(|&k| record(&Effector::position(k, g.positions[k], FIVE_POINT_TOLERANCE)))
                .collect();
            Ok(BenchmarkItem { frame, effectors })
        })
        .collect::<Result<_>>()?;
    Ok(BenchmarkFile {
        format: FORMAT.into(),
        name: "five-point".into(),
        seed: None,
        effector_count: 5,
        skeleton: skel.name.clone(),
        dataset_hash: test.content_hash(),
        items,
    })
}

/// What a solver returns for one effector set, in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Root position from the draft (GPD) head.
    pub draft_root: Vec3,
    /// Joint positions after forward kinematics.
    pub positions: Vec<Vec3>,
    pub local_rotations: Vec<Mat3>,
}

impl Prediction {
    /// Prediction that reproduces `pose` exactly.
    pub fn from_pose(pose: &Pose, skeleton: &SkeletonSpec) -> Result<Self> {
        let g = pose.global_transforms(skeleton)?;
        Ok(Self {
            draft_root: g.positions[0],
            positions: g.positions,
            local_rotations: pose.local_matrices(),
        })
    }
}

/// Anything that can answer an effector set. The ground-truth pose is passed
/// so reference solvers can be written against it; learned solvers ignore it.
pub trait PoseSolver: Sync {
    fn solve(&self, skeleton: &SkeletonSpec, effectors: &EffectorSet, truth: &Pose) -> Result<Prediction>;
}

impl PoseSolver for Model {
    fn solve(&self, skeleton: &SkeletonSpec, effectors: &EffectorSet, _truth: &Pose) -> Result<Prediction> {
        if self.config.joint_count != skeleton.joint_count() {
            return Err(shape_err(format!(
                "model expects {} joints, skeleton {:?} has {}",
                self.config.joint_count,
                skeleton.name,
                skeleton.joint_count()
            )));
        }
        let out = self.forward(skeleton, effectors)?;
        Ok(Prediction {
            draft_root: out.draft_positions[0],
            positions: out.global.positions,
            local_rotations: out.local_rotations,
        })
    }
}

/// Returns the ground truth; its metrics measure only the metric code.
pub struct OracleSolver;

impl PoseSolver for OracleSolver {
    fn solve(&self, skeleton: &SkeletonSpec, _effectors: &EffectorSet, truth: &Pose) -> Result<Prediction> {
        Prediction::from_pose(truth, skeleton)
    }
}

/// Ignores its input and always answers the same pose.
pub struct ConstantSolver(pub Pose);

impl PoseSolver for ConstantSolver {
    fn solve(&self, skeleton: &SkeletonSpec, _effectors: &EffectorSet, _truth: &Pose) -> Result<Prediction> {
        Prediction::from_pose(&self.0, skeleton)
    }
}

/// The three test metrics for one item or averaged over many.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Squared error of the draft root position.
    pub gpd_l2: f64,
    /// Sum over joints of squared position error after FK.
    pub ikd_l2: f64,
    /// Sum over joints of the geodesic error of local rotations.
    pub loc_geo: f64,
}

impl Metrics {
    pub fn compute(pred: &Prediction, truth: &Pose, skeleton: &SkeletonSpec) -> Result<Self> {
        let j = skeleton.joint_count();
        if pred.positions.len() != j || pred.local_rotations.len() != j || truth.joint_count() != j {
            return Err(shape_err("prediction and ground truth disagree on joint count"));
        }
        let g = truth.global_transforms(skeleton)?;
        let locals = truth.local_matrices();
        Ok(Self {
            gpd_l2: l2_vec3(&g.positions[0], &pred.draft_root),
            ikd_l2: g.positions.iter().zip(&pred.positions).map(|(a, b)| l2_vec3(a, b)).sum(),
            loc_geo: locals
                .iter()
                .zip(&pred.local_rotations)
                .map(|(a, b)| geodesic_distance_exact(a, b))
                .sum(),
        })
    }

    fn mean(items: &[Metrics]) -> Self {
        let n = items.len().max(1) as f64;
        let mut m = Metrics::default();
        for x in items {
            m.gpd_l2 += x.gpd_l2;
            m.ikd_l2 += x.ikd_l2;
            m.loc_geo += x.loc_geo;
        }
        Metrics {
            gpd_l2: m.gpd_l2 / n,
            ikd_l2: m.ikd_l2 / n,
            loc_geo: m.loc_geo / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMetrics {
    pub name: String,
    pub effector_count: usize,
    pub items: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub items: usize,
    /// Mean over every item of every file.
    #[serde(flatten)]
    pub aggregate: Metrics,
    pub files: Vec<FileMetrics>,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>3} {:>6} {:>14} {:>14} {:>14}\n",
            "file", "N", "items", "L_gpd-L2^det", "L_ikd-L2^det", "L_loc-geo^det"
        );
        let mut row = |name: &str, n: String, items: usize, m: &Metrics| {
            let _ = writeln!(
                s,
                "{name:<12} {n:>3} {items:>6} {:>14.6e} {:>14.6e} {:>14.6e}",
                m.gpd_l2, m.ikd_l2, m.loc_geo
            );
        };
        for f in &self.files {
            row(&f.name, f.effector_count.to_string(), f.items, &f.metrics);
        }
        row("all", "-".into(), self.items, &self.aggregate);
        s
    }
}

fn item_metrics(solver: &dyn PoseSolver, file: &BenchmarkFile, data: &PoseDataset) -> Result<Vec<Metrics>> {
    let skel = &data.skeleton;
    file.items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let truth = data
                .frames
                .get(item.frame)
                .ok_or_else(|| Error::Data(format!("{}: item {i} references frame {} of {}", file.name, item.frame, data.len())))?;
            let set = resolve_records(&item.effectors, skel)?;
            let pred = solver.solve(skel, &set, truth)?;
            Metrics::compute(&pred, truth, skel)
        })
        .collect()
}

/// Evaluates `solver` on benchmark files built from `data`.
pub fn evaluate(solver: &dyn PoseSolver, files: &[BenchmarkFile], data: &PoseDataset) -> Result<MetricsReport> {
    let hash = data.content_hash();
    let mut all = Vec::new();
    let mut per_file = Vec::with_capacity(files.len());
    for file in files {
        if file.dataset_hash != hash {
            return Err(Error::Data(format!("{} was generated from a different dataset", file.name)));
        }
        if file.skeleton != data.skeleton.name {
            return Err(shape_err(format!("{} targets skeleton {:?}", file.name, file.skeleton)));
        }
        let m = item_metrics(solver, file, data)?;
        per_file.push(FileMetrics {
            name: file.name.clone(),
            effector_count: file.effector_count,
            items: m.len(),
            metrics: Metrics::mean(&m),
        });
        all.extend(m);
    }
    Ok(MetricsReport {
        items: all.len(),
        aggregate: Metrics::mean(&all),
        files: per_file,
    })
}

pub fn evaluate_model(model: &Model, files: &[BenchmarkFile], data: &PoseDataset) -> Result<MetricsReport> {
    evaluate(model, files, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EffectorMix {
    PositionOnly,
    RotationOnly,
    /// Each chosen joint gets a uniformly random type.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub effectors: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// For each fraction, constrains `round(fraction · J)` randomly chosen joints
/// (at least one) with exact effectors of the requested types and evaluates
/// on every frame.
pub fn effector_sweep(solver: &dyn PoseSolver, data: &PoseDataset, mix: EffectorMix, fractions: &[f64], seed: u64) -> Result<Vec<SweepRow>> {
    let skel = &data.skeleton;
    let j = skel.joint_count();
    let noise = NoiseConfig::default();
    fractions
        .iter()
        .enumerate()
        .map(|(f_idx, &fraction)| {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Config(format!("sweep fraction {fraction} outside (0, 1]")));
            }
            let count = ((fraction * j as f64).round() as usize).clamp(1, j);
            let mut rng = file_rng(seed, f_idx as u64);
            let mut items = Vec::with_capacity(data.len());
            for (frame, pose) in data.frames.iter().enumerate() {
                let g = pose.global_transforms(skel)?;
                let mut effectors = Vec::with_capacity(count);
                for joint in index::sample(&mut rng, j, count) {
                    let kind = match mix {
                        EffectorMix::PositionOnly => EffectorType::Position,
                        EffectorMix::RotationOnly => EffectorType::Rotation,
                        EffectorMix::Mixed => EffectorType::ALL[rng.random_range(0..3)],
                    };
                    effectors.push(record(&make_effector(joint, kind, 0.0, &g, &noise, &mut rng)?.0));
                }
                items.push(BenchmarkItem { frame, effectors });
            }
            let file = BenchmarkFile {
                format: FORMAT.into(),
                name: format!("sweep-{fraction}"),
                seed: Some(seed),
                effector_count: count,
                skeleton: skel.name.clone(),
                dataset_hash: String::new(),
                items,
            };
            let m = item_metrics(solver, &file, data)?;
            Ok(SweepRow {
                fraction,
                effectors: count,
                metrics: Metrics::mean(&m),
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{:>8} {:>5} {:>14} {:>14} {:>14}\n", "fraction", "N", "L_gpd-L2^det", "L_ikd-L2^det", "L_loc-geo^det");
    for r in rows {
        let _ = writeln!(
            s,
            "{:>8.3} {:>5} {:>14.6e} {:>14.6e} {:>14.6e}",
            r.fraction, r.effectors, r.metrics.gpd_l2, r.metrics.ikd_l2, r.metrics.loc_geo
        );
    }
    s
}
