#![allow(dead_code)]

use protores::effector::{Effector, EffectorSet, EffectorType};
use protores::geometry::{euler_to_matrix, matrix_to_rotation6d, Vec3};
use protores::model::{EncoderKind, Model, ModelConfig};
use protores::nn::Parameters;
use protores::train::{batch_gradients, BatchItem, GroundTruth};
use protores::{Pose, SkeletonSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(encoder: EncoderKind) -> ModelConfig {
    ModelConfig {
        width: 16,
        encoder_blocks: 1,
        gpd_blocks: 1,
        ikd_blocks: 1,
        layers_per_block: 2,
        embedding_dim: 4,
        dropout: 0.0,
        encoder,
        joint_count: 5,
        embedding_width: 8,
    }
}

pub fn random_pose(j: usize, rng: &mut ChaCha8Rng) -> Pose {
    let rots: Vec<_> = (0..j)
        .map(|_| {
            euler_to_matrix(&[
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
            ])
        })
        .collect();
    Pose::from_matrices(
        Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(0.5..1.5), rng.random_range(-0.5..0.5)),
        &rots,
    )
}

/// Items with one effector of every type plus a second position, against
/// random poses, with uneven weights.
pub fn mixed_items(skel: &SkeletonSpec, count: usize, seed: u64) -> Vec<BatchItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let pose = random_pose(skel.joint_count(), &mut rng);
            let globals = pose.global_transforms(skel).unwrap();
            let jitter = |rng: &mut ChaCha8Rng| Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
            let p1 = globals.positions[1] + jitter(&mut rng);
            let p4 = globals.positions[4] + jitter(&mut rng);
            let rot = euler_to_matrix(&[0.3, -0.2, 0.5]) * globals.rotations[2];
            let dir = Vec3::new(0.3, 0.5, -0.8).normalize();
            let target = globals.positions[3] + Vec3::new(1.0, 0.4, 0.7);
            let effectors = vec![
                Effector::position(1, p1, rng.random()),
                Effector::position(4, p4, rng.random()),
                Effector { joint: 2, kind: EffectorType::Rotation, data: matrix_to_rotation6d(&rot), tolerance: rng.random() },
                Effector {
                    joint: 3,
                    kind: EffectorType::LookAt,
                    data: [target.x, target.y, target.z, dir.x, dir.y, dir.z],
                    tolerance: rng.random(),
                },
            ];
            BatchItem {
                effectors: EffectorSet::new(effectors, skel.joint_count()).unwrap(),
                weights: vec![rng.random_range(1.0..100.0), rng.random_range(1.0..100.0), rng.random_range(1.0..100.0), 1.0],
                truth: GroundTruth { locals: pose.local_matrices(), globals },
            }
        })
        .collect()
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter, with `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(model: &Model, skel: &SkeletonSpec, items: &[BatchItem], step: f64, floor: f64) -> (f64, String) {
    let (_, analytic) = batch_gradients(model, skel, items, 100.0, None).unwrap();
    let base = model.params.flatten();
    let mut names = Vec::new();
    model.params.visit("", &mut |name, _, d| names.extend(std::iter::repeat_n(name.to_string(), d.len())));
    let mut probe = model.clone();
    let mut worst = (0.0, String::new());
    for k in 0..base.len() {
        let mut eval = |delta: f64| {
            let mut v = base.clone();
            v[k] += delta;
            probe.params.assign_flat(&v).unwrap();
            batch_gradients(&probe, skel, items, 100.0, None).unwrap().0.total
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        if rel > worst.0 {
            worst = (rel, format!("{} [{k}]: analytic {a:e}, numeric {numeric:e}", names[k]));
        }
    }
    worst
}
