//! Pose datasets: the `PRSD` binary format, CSV import, clip-level splits,
//! frame subsampling and per-joint statistics.
//!
//! `PRSD` layout, little-endian: magic, u32 version, u32 joint count, u64
//! frame count, then per frame the root position (3 × f32) and one unit
//! quaternion per joint as (x, y, z, w) f32. Clip boundaries live in an
//! optional JSON sidecar next to the file (`<file>.clips.json`).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::{euler_to_matrix, matrix_to_quaternion, Mat3, Quat, Vec3};
use crate::kinematics::{forward_kinematics, Pose};
use crate::skeleton::SkeletonSpec;

pub const MAGIC: &[u8; 4] = b"PRSD";
pub const VERSION: u32 = 1;
const HEADER_BYTES: usize = 20;

/// Loader tolerance on quaternion norms.
pub const UNIT_TOLERANCE: f64 = 1e-3;

/// A contiguous run of frames from one source clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clip {
    pub id: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseDataset {
    pub skeleton: SkeletonSpec,
    pub frames: Vec<Pose>,
    /// `None` means every frame is its own clip.
    pub clips: Option<Vec<Clip>>,
}

impl PoseDataset {
    pub fn new(skeleton: SkeletonSpec, frames: Vec<Pose>, clips: Option<Vec<Clip>>) -> Result<Self> {
        for (i, f) in frames.iter().enumerate() {
            f.validate(&skeleton, UNIT_TOLERANCE)
                .map_err(|e| Error::Data(format!("frame {i}: {e}")))?;
        }
        if let Some(clips) = &clips {
            let mut next = 0;
            for c in clips {
                if c.start != next || c.len == 0 {
                    return Err(Error::Data(format!("clip {:?} does not continue the partition at frame {next}", c.id)));
                }
                next += c.len;
            }
            if next != frames.len() {
                return Err(Error::Data(format!("clips cover {next} of {} frames", frames.len())));
            }
        }
        Ok(Self { skeleton, frames, clips })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Clip boundaries, synthesizing one clip per frame when absent.
    pub fn clip_list(&self) -> Vec<Clip> {
        match &self.clips {
            Some(c) => c.clone(),
            None => (0..self.frames.len())
                .map(|i| Clip { id: format!("frame{i}"), start: i, len: 1 })
                .collect(),
        }
    }

    /// SHA-256 of the serialized frames, used to tie benchmark files to data.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex(&Sha256::digest(encode_frames(&self.frames)))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".clips.json");
    PathBuf::from(name)
}

fn encode_frames(frames: &[Pose]) -> Vec<u8> {
    let j = frames.first().map_or(0, |f| f.joint_count());
    let mut out = Vec::with_capacity(frames.len() * (12 + 16 * j));
    for f in frames {
        for v in f.root_position.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for q in &f.rotations {
            for v in [q.i, q.j, q.k, q.w] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn encode_dataset(dataset: &PoseDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.skeleton.joint_count() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.frames.len() as u64).to_le_bytes());
    out.extend_from_slice(&encode_frames(&dataset.frames));
    out
}

pub fn decode_dataset(bytes: &[u8], skeleton: &SkeletonSpec, clips: Option<Vec<Clip>>) -> Result<PoseDataset> {
    if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a pose dataset (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let j = u32_at(8) as usize;
    if j != skeleton.joint_count() {
        return Err(Error::Format(format!(
            "dataset has {j} joints, skeleton {:?} has {}",
            skeleton.name,
            skeleton.joint_count()
        )));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let stride = 12 + 16 * j;
    if bytes.len() != HEADER_BYTES + count * stride {
        return Err(Error::Format(format!(
            "dataset is {} bytes, header implies {}",
            bytes.len(),
            HEADER_BYTES + count * stride
        )));
    }
    let floats: Vec<f64> = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let frames = floats
        .chunks_exact(3 + 4 * j)
        .map(|f| Pose {
            root_position: Vec3::new(f[0], f[1], f[2]),
            rotations: f[3..].chunks_exact(4).map(|q| Quat::new(q[3], q[0], q[1], q[2])).collect(),
        })
        .collect();
    PoseDataset::new(skeleton.clone(), frames, clips)
}

pub fn save_dataset(dataset: &PoseDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, &encode_dataset(dataset))?;
    let sidecar = sidecar_path(path);
    match &dataset.clips {
        Some(clips) => write_atomic(&sidecar, &serde_json::to_vec_pretty(clips)?)?,
        None if sidecar.exists() => fs::remove_file(sidecar)?,
        None => {}
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>, skeleton: &SkeletonSpec) -> Result<PoseDataset> {
    let path = path.as_ref();
    let sidecar = sidecar_path(path);
    let clips = if sidecar.exists() {
        Some(serde_json::from_slice(&fs::read(&sidecar)?).map_err(|e| Error::Format(format!("bad clip index: {e}")))?)
    } else {
        None
    };
    decode_dataset(&fs::read(path)?, skeleton, clips)
}

/// How per-joint rotations are laid out in a CSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationColumns {
    /// `<joint>_qx, <joint>_qy, <joint>_qz, <joint>_qw`
    Quaternion,
    /// `<joint>_rz, <joint>_ry, <joint>_rx` in radians, composed Z·Y·X.
    EulerRadians,
    /// As `EulerRadians`, in degrees.
    EulerDegrees,
}

/// CSV column spec. The root position comes from `root_x, root_y, root_z`.
/// If `<joint>_px, _py, _pz` columns exist for every joint they are treated as
/// global positions and checked against forward kinematics. An optional clip
/// column groups consecutive rows into clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSpec {
    pub rotations: RotationColumns,
    pub clip_column: Option<String>,
    /// Largest tolerated distance between FK and stored global positions.
    pub fk_tolerance: f64,
}

impl Default for CsvSpec {
    fn default() -> Self {
        Self {
            rotations: RotationColumns::Quaternion,
            clip_column: Some("clip".into()),
            fk_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportReport {
    pub rows: usize,
    /// Worst FK-versus-source position gap, when the source has positions.
    pub max_fk_deviation: Option<f64>,
}

pub fn import_csv(path: impl AsRef<Path>, skeleton: &SkeletonSpec, spec: &CsvSpec) -> Result<(PoseDataset, ImportReport)> {
    let text = fs::read_to_string(path)?;
    import_csv_str(&text, skeleton, spec)
}

pub fn import_csv_str(text: &str, skeleton: &SkeletonSpec, spec: &CsvSpec) -> Result<(PoseDataset, ImportReport)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Format(format!("csv header: {e}")))?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: String| -> Result<(usize, String)> {
        index
            .get(name.as_str())
            .map(|&i| (i, name.clone()))
            .ok_or_else(|| Error::Format(format!("missing column {name:?}")))
    };
    let root: Vec<_> = ["root_x", "root_y", "root_z"].iter().map(|c| col(c.to_string())).collect::<Result<_>>()?;
    let suffixes: &[&str] = match spec.rotations {
        RotationColumns::Quaternion => &["qx", "qy", "qz", "qw"],
        _ => &["rz", "ry", "rx"],
    };
    let mut rot_cols = Vec::new();
    for joint in &skeleton.joints {
        for s in suffixes {
            rot_cols.push(col(format!("{}_{s}", joint.name))?);
        }
    }
    let pos_names: Vec<String> = skeleton
        .joints
        .iter()
        .flat_map(|j| ["px", "py", "pz"].map(|s| format!("{}_{s}", j.name)))
        .collect();
    let pos_cols: Option<Vec<_>> = if pos_names.iter().all(|n| index.contains_key(n.as_str())) {
        Some(pos_names.into_iter().map(col).collect::<Result<_>>()?)
    } else {
        None
    };
    let clip_col = match &spec.clip_column {
        Some(c) => index.get(c.as_str()).copied(),
        None => None,
    };

    let j = skeleton.joint_count();
    let mut frames = Vec::new();
    let mut clips: Vec<Clip> = Vec::new();
    let mut worst: Option<(f64, usize, usize)> = None;
    for (r, record) in reader.records().enumerate() {
        // row numbers count the header as row 1
        let row = r + 2;
        let record = record.map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        let num = |(i, name): &(usize, String)| -> Result<f64> {
            let field = record.get(*i).unwrap_or("");
            field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Format(format!("row {row}, column {name:?}: cannot parse {field:?} as a number")))
        };
        let root_position = Vec3::new(num(&root[0])?, num(&root[1])?, num(&root[2])?);
        let values: Vec<f64> = rot_cols.iter().map(num).collect::<Result<_>>()?;
        let rotations: Vec<Quat> = match spec.rotations {
            RotationColumns::Quaternion => values.chunks_exact(4).map(|q| Quat::new(q[3], q[0], q[1], q[2])).collect(),
            RotationColumns::EulerRadians | RotationColumns::EulerDegrees => {
                let scale = if spec.rotations == RotationColumns::EulerDegrees {
                    std::f64::consts::PI / 180.0
                } else {
                    1.0
                };
                values
                    .chunks_exact(3)
                    .map(|a| matrix_to_quaternion(&euler_to_matrix(&[a[0] * scale, a[1] * scale, a[2] * scale])))
                    .collect()
            }
        };
        let pose = Pose { root_position, rotations };
        pose.validate(skeleton, UNIT_TOLERANCE)
            .map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        if let Some(pos_cols) = &pos_cols {
            let globals = pose.global_transforms(skeleton)?;
            for k in 0..j {
                let p = Vec3::new(num(&pos_cols[3 * k])?, num(&pos_cols[3 * k + 1])?, num(&pos_cols[3 * k + 2])?);
                let d = (p - globals.positions[k]).norm();
                if worst.is_none_or(|w| d > w.0) {
                    worst = Some((d, row, k));
                }
            }
        }
        if let Some(c) = clip_col {
            let id = record.get(c).unwrap_or("").to_string();
            match clips.last_mut() {
                Some(last) if last.id == id => last.len += 1,
                _ => clips.push(Clip { id, start: frames.len(), len: 1 }),
            }
        }
        frames.push(pose);
    }
    if let Some((d, row, k)) = worst {
        if d > spec.fk_tolerance {
            return Err(Error::Data(format!(
                "forward kinematics disagrees with stored positions by {d:e} (worst joint {:?} at row {row}); tolerance {:e}",
                skeleton.joints[k].name, spec.fk_tolerance
            )));
        }
    }
    let report = ImportReport {
        rows: frames.len(),
        max_fk_deviation: worst.map(|w| w.0),
    };
    let clips = clip_col.map(|_| clips);
    Ok((PoseDataset::new(skeleton.clone(), frames, clips)?, report))
}

/// Writes the CSV layout that [`import_csv`] reads, with quaternion columns
/// and global positions.
pub fn export_csv(dataset: &PoseDataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["clip".to_string(), "root_x".into(), "root_y".into(), "root_z".into()];
    for j in &dataset.skeleton.joints {
        header.extend(["qx", "qy", "qz", "qw"].map(|s| format!("{}_{s}", j.name)));
    }
    for j in &dataset.skeleton.joints {
        header.extend(["px", "py", "pz"].map(|s| format!("{}_{s}", j.name)));
    }
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for clip in dataset.clip_list() {
        for f in &dataset.frames[clip.start..clip.start + clip.len] {
            let mut rec = vec![clip.id.clone()];
            rec.extend(f.root_position.iter().map(|v| v.to_string()));
            for q in &f.rotations {
                rec.extend([q.i, q.j, q.k, q.w].map(|v| v.to_string()));
            }
            for p in &f.global_transforms(&dataset.skeleton)?.positions {
                rec.extend(p.iter().map(|v| v.to_string()));
            }
            w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
}

fn gather(dataset: &PoseDataset, clips: &[Clip]) -> PoseDataset {
    let mut frames = Vec::new();
    let mut out = Vec::with_capacity(clips.len());
    for c in clips {
        out.push(Clip { id: c.id.clone(), start: frames.len(), len: c.len });
        frames.extend_from_slice(&dataset.frames[c.start..c.start + c.len]);
    }
    PoseDataset {
        skeleton: dataset.skeleton.clone(),
        frames,
        clips: dataset.clips.as_ref().map(|_| out),
    }
}

/// Shuffles clips with `seed` and deals them into train/valid/test by
/// proportion. Clip counts are rounded; the test split takes the remainder.
/// Each split keeps its clips in source order.
pub fn split_by_clip(dataset: &PoseDataset, proportions: [f64; 3], seed: u64) -> Result<(PoseDataset, PoseDataset, PoseDataset)> {
    let sum: f64 = proportions.iter().sum();
    if proportions.iter().any(|p| !(*p >= 0.0)) || !(sum > 0.0) {
        return Err(Error::Config(format!("invalid split proportions {proportions:?}")));
    }
    let clips = dataset.clip_list();
    let n = clips.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((proportions[0] / sum) * n as f64).round() as usize;
    let n_valid = (((proportions[1] / sum) * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let pick = |range: std::ops::Range<usize>| {
        let mut ids: Vec<usize> = order[range].to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| clips[i].clone()).collect::<Vec<_>>()
    };
    Ok((
        gather(dataset, &pick(0..n_train)),
        gather(dataset, &pick(n_train..n_train + n_valid)),
        gather(dataset, &pick(n_train + n_valid..n)),
    ))
}

/// Keeps `round(fraction · frames)` frames (at least one), sampled uniformly
/// without replacement, in their original order. Clip boundaries are dropped.
pub fn subsample_frames(dataset: &PoseDataset, fraction: f64, seed: u64) -> Result<PoseDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subsample fraction {fraction} outside (0, 1]")));
    }
    let n = dataset.frames.len();
    let k = ((fraction * n as f64).round() as usize).clamp(n.min(1), n);
    let mut idx = rand::seq::index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
    idx.sort_unstable();
    Ok(PoseDataset {
        skeleton: dataset.skeleton.clone(),
        frames: idx.into_iter().map(|i| dataset.frames[i].clone()).collect(),
        clips: None,
    })
}

/// Population standard deviations per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub joints: Vec<String>,
    /// Std of global position minus hips position, per axis.
    pub position_std: Vec<[f64; 3]>,
    /// Std of local quaternion components (x, y, z, w).
    pub quaternion_std: Vec<[f64; 4]>,
}

fn population_std<const N: usize>(rows: &[[f64; N]]) -> [f64; N] {
    let n = rows.len() as f64;
    let mut mean = [0.0; N];
    for r in rows {
        for k in 0..N {
            mean[k] += r[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; N];
    for r in rows {
        for k in 0..N {
            var[k] += (r[k] - mean[k]).powi(2);
        }
    }
    var.map(|v| (v / n).sqrt())
}

pub fn dataset_stats(dataset: &PoseDataset) -> Result<DatasetStats> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot compute statistics of an empty dataset".into()));
    }
    let skel = &dataset.skeleton;
    let j = skel.joint_count();
    let mut pos: Vec<Vec<[f64; 3]>> = vec![Vec::with_capacity(dataset.len()); j];
    let mut quat: Vec<Vec<[f64; 4]>> = vec![Vec::with_capacity(dataset.len()); j];
    for f in &dataset.frames {
        let g = f.global_transforms(skel)?;
        let hips = g.positions[0];
        for k in 0..j {
            let p = g.positions[k] - hips;
            pos[k].push([p.x, p.y, p.z]);
            let q = f.rotations[k];
            quat[k].push([q.i, q.j, q.k, q.w]);
        }
    }
    Ok(DatasetStats {
        joints: skel.joints.iter().map(|x| x.name.clone()).collect(),
        position_std: pos.iter().map(|r| population_std(r)).collect(),
        quaternion_std: quat.iter().map(|r| population_std(r)).collect(),
    })
}

impl DatasetStats {
    /// Text table with one row per joint: X Y Z position std, then X Y Z W
    /// quaternion std.
    pub fn to_table(&self) -> String {
        let width = self.joints.iter().map(|n| n.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<width$} {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} {:>8}\n",
            "Joint", "X", "Y", "Z", "qX", "qY", "qZ", "qW"
        );
        for ((name, p), q) in self.joints.iter().zip(&self.position_std).zip(&self.quaternion_std) {
            let _ = writeln!(
                s,
                "{name:<width$} {:>8.4} {:>8.4} {:>8.4} | {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                p[0], p[1], p[2], q[0], q[1], q[2], q[3]
            );
        }
        s
    }
}

/// Random but plausible motion: each clip drifts smoothly from a random
/// start pose. Used for fixtures, demos and the desk-scale experiments.
pub fn synthetic_dataset(skeleton: &SkeletonSpec, clips: usize, frames_per_clip: usize, seed: u64) -> Result<PoseDataset> {
    let j = skeleton.joint_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(clips * frames_per_clip);
    let mut index = Vec::with_capacity(clips);
    // Per-joint amplitude: the root turns freely around Y, limbs move less.
    let amp = |k: usize| if k == 0 { 0.3 } else { 0.6 };
    for c in 0..clips {
        let mut angles: Vec<[f64; 3]> = (0..j)
            .map(|k| {
                let a = amp(k);
                let yaw = if k == 0 { rng.random_range(-std::f64::consts::PI..std::f64::consts::PI) } else { 0.0 };
                [rng.random_range(-a..a), yaw + rng.random_range(-a..a), rng.random_range(-a..a)]
            })
            .collect();
        let mut velocity: Vec<[f64; 3]> = vec![[0.0; 3]; j];
        let mut root = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(0.8..1.1), rng.random_range(-1.0..1.0));
        index.push(Clip { id: format!("clip{c:04}"), start: frames.len(), len: frames_per_clip });
        for _ in 0..frames_per_clip {
            for k in 0..j {
                for a in 0..3 {
                    velocity[k][a] = 0.9 * velocity[k][a] + rng.random_range(-0.02..0.02);
                    let limit = if k == 0 && a == 1 { f64::INFINITY } else { amp(k) * 1.5 };
                    angles[k][a] = (angles[k][a] + velocity[k][a]).clamp(-limit, limit);
                }
            }
            root += Vec3::new(rng.random_range(-0.01..0.01), 0.0, rng.random_range(-0.01..0.01));
            let mats: Vec<Mat3> = angles.iter().map(euler_to_matrix).collect();
            let pose = Pose::from_matrices(root, &mats);
            // store at the file precision so saved and in-memory data agree
            frames.push(to_storage_precision(&pose));
        }
    }
    PoseDataset::new(skeleton.clone(), frames, Some(index))
}

/// Rounds a pose to what a `PRSD` file can hold.
pub fn to_storage_precision(pose: &Pose) -> Pose {
    let r = |v: f64| v as f32 as f64;
    Pose {
        root_position: pose.root_position.map(r),
        rotations: pose.rotations.iter().map(|q| Quat::new(r(q.w), r(q.i), r(q.j), r(q.k))).collect(),
    }
}

/// Joint-wise check that FK of a dataset stays finite; cheap sanity gate used
/// by the CLI before training.
pub fn check_forward_kinematics(dataset: &PoseDataset) -> Result<()> {
    for (i, f) in dataset.frames.iter().enumerate() {
        let g = forward_kinematics(&dataset.skeleton, &f.root_position, &f.local_matrices())?;
        if g.positions.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data(format!("frame {i}: non-finite forward kinematics")));
        }
    }
    Ok(())
}
