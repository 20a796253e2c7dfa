//! Pose augmentations: rotation about the vertical axis and left/right mirroring.

use crate::error::Result;
use crate::geometry::{Quat, Vec3};
use crate::kinematics::Pose;
use crate::skeleton::SkeletonSpec;

/// Rotates the whole pose about the global Y axis by `angle` radians.
pub fn rotate_pose_about_y(pose: &Pose, angle: f64) -> Pose {
    let (s, c) = (0.5 * angle).sin_cos();
    let qy = Quat::new(c, 0.0, s, 0.0);
    let mut out = pose.clone();
    let (sa, ca) = angle.sin_cos();
    let p = pose.root_position;
    out.root_position = Vec3::new(ca * p.x + sa * p.z, p.y, -sa * p.x + ca * p.z);
    out.rotations[0] = qy * pose.rotations[0];
    out
}

/// Reflects the pose through the YZ plane: every rotation is conjugated by
/// `diag(−1, 1, 1)` and moved to its mirror joint. Offsets must be mirror
/// symmetric for the reflected pose to reproduce mirrored joint positions.
pub fn mirror_pose(skeleton: &SkeletonSpec, pose: &Pose) -> Result<Pose> {
    let mirror = skeleton.mirror_indices()?;
    let reflect = |q: &Quat| Quat::new(q.w, q.i, -q.j, -q.k);
    let mut root = pose.root_position;
    root.x = -root.x;
    Ok(Pose {
        root_position: root,
        rotations: mirror.iter().map(|&m| reflect(&pose.rotations[m])).collect(),
    })
}

/// Pose equality up to quaternion sign, within `tol` per component.
pub fn poses_close(a: &Pose, b: &Pose, tol: f64) -> bool {
    if a.rotations.len() != b.rotations.len() || (a.root_position - b.root_position).amax() > tol {
        return false;
    }
    a.rotations.iter().zip(&b.rotations).all(|(p, q)| {
        let d1 = (p.coords - q.coords).amax();
        let d2 = (p.coords + q.coords).amax();
        d1.min(d2) <= tol
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{euler_to_matrix, rot_y};
    use crate::kinematics::forward_kinematics;
    use std::f64::consts::PI;

    fn sample_pose(j: usize, seed: u64) -> Pose {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let rots: Vec<_> = (0..j).map(|_| euler_to_matrix(&[next(), next(), next()])).collect();
        Pose::from_matrices(Vec3::new(next(), 1.0 + next(), next()), &rots)
    }

    #[test]
    fn zero_and_full_turn() {
        let pose = sample_pose(64, 3);
        assert_eq!(rotate_pose_about_y(&pose, 0.0), pose);
        assert!(poses_close(&rotate_pose_about_y(&pose, 2.0 * PI), &pose, 1e-6));
    }

    #[test]
    fn rotation_commutes_with_fk() {
        let skel = SkeletonSpec::humanoid();
        for seed in 0..10 {
            let pose = sample_pose(64, seed);
            let angle = 0.7 * seed as f64;
            let g = pose.global_transforms(&skel).unwrap();
            let gr = rotate_pose_about_y(&pose, angle).global_transforms(&skel).unwrap();
            let ry = rot_y(angle);
            for (a, b) in g.positions.iter().zip(&gr.positions) {
                assert!((ry * a - b).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn mirror_is_involution_and_reflects_fk() {
        let skel = SkeletonSpec::humanoid();
        let m = skel.mirror_indices().unwrap();
        for seed in 0..10 {
            let pose = sample_pose(64, seed);
            let twice = mirror_pose(&skel, &mirror_pose(&skel, &pose).unwrap()).unwrap();
            assert!(poses_close(&twice, &pose, 1e-6));
            let g = pose.global_transforms(&skel).unwrap();
            let locals = mirror_pose(&skel, &pose).unwrap().local_matrices();
            let root = Vec3::new(-pose.root_position.x, pose.root_position.y, pose.root_position.z);
            let gm = forward_kinematics(&skel, &root, &locals).unwrap();
            for j in 0..64 {
                let src = g.positions[m[j]];
                let expected = Vec3::new(-src.x, src.y, src.z);
                assert!((gm.positions[j] - expected).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn symmetric_rest_pose_is_fixed() {
        let skel = SkeletonSpec::humanoid();
        let rest = Pose::rest(64);
        assert!(poses_close(&mirror_pose(&skel, &rest).unwrap(), &rest, 1e-6));
    }
}
