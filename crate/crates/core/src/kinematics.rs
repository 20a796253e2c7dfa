//! Poses and forward kinematics over a [`SkeletonSpec`].

use crate::error::{shape_err, Error, Result};
use crate::geometry::{matrix_to_quaternion, quaternion_to_matrix, Mat3, Quat, Vec3};
use crate::skeleton::SkeletonSpec;

/// Root position plus one local rotation per joint, stored as unit
/// quaternions.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub root_position: Vec3,
    pub rotations: Vec<Quat>,
}

impl Pose {
    pub fn rest(joint_count: usize) -> Self {
        Self {
            root_position: Vec3::zeros(),
            rotations: vec![Quat::identity(); joint_count],
        }
    }

    pub fn from_matrices(root_position: Vec3, rotations: &[Mat3]) -> Self {
        Self {
            root_position,
            rotations: rotations.iter().map(matrix_to_quaternion).collect(),
        }
    }

    pub fn joint_count(&self) -> usize {
        self.rotations.len()
    }

    /// Checks the joint count and that every quaternion has unit norm within `tol`.
    pub fn validate(&self, skeleton: &SkeletonSpec, tol: f64) -> Result<()> {
        if self.rotations.len() != skeleton.joint_count() {
            return Err(shape_err(format!(
                "pose has {} rotations, skeleton {:?} has {} joints",
                self.rotations.len(),
                skeleton.name,
                skeleton.joint_count()
            )));
        }
        if self.root_position.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite root position".into()));
        }
        for (j, q) in self.rotations.iter().enumerate() {
            let n = q.norm();
            if !((n - 1.0).abs() <= tol) {
                return Err(Error::Data(format!("joint {j}: quaternion norm {n} is not unit")));
            }
        }
        Ok(())
    }

    pub fn local_matrices(&self) -> Vec<Mat3> {
        self.rotations
            .iter()
            .map(|q| quaternion_to_matrix(q).unwrap_or_else(|_| Mat3::identity()))
            .collect()
    }

    pub fn global_transforms(&self, skeleton: &SkeletonSpec) -> Result<GlobalTransforms> {
        forward_kinematics(skeleton, &self.root_position, &self.local_matrices())
    }
}

/// Per-joint global rotation and position.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTransforms {
    pub rotations: Vec<Mat3>,
    pub positions: Vec<Vec3>,
}

impl GlobalTransforms {
    pub fn joint_count(&self) -> usize {
        self.positions.len()
    }

    pub fn translate(&mut self, delta: &Vec3) {
        for p in &mut self.positions {
            *p += delta;
        }
    }
}

/// Tree recursion `G_j = G_parent · [R_j | o_j]`, with the root placed at
/// `root_position` and rotated by its own local rotation.
pub fn forward_kinematics(skeleton: &SkeletonSpec, root_position: &Vec3, locals: &[Mat3]) -> Result<GlobalTransforms> {
    let n = skeleton.joint_count();
    if locals.len() != n {
        return Err(shape_err(format!("{} local rotations for {n} joints", locals.len())));
    }
    let mut rotations = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    rotations.push(locals[0]);
    positions.push(*root_position);
    for j in 1..n {
        let p = skeleton.joints[j].parent.expect("non-root joints have parents");
        let parent_rot = rotations[p];
        positions.push(positions[p] + parent_rot * skeleton.offset(j));
        rotations.push(parent_rot * locals[j]);
    }
    Ok(GlobalTransforms { rotations, positions })
}

/// Reverse-mode pass through [`forward_kinematics`]. Takes gradients w.r.t.
/// the global rotations and positions and returns gradients w.r.t. the local
/// rotations and the root position.
pub fn forward_kinematics_backward(
    skeleton: &SkeletonSpec,
    locals: &[Mat3],
    globals: &GlobalTransforms,
    d_rotations: &[Mat3],
    d_positions: &[Vec3],
) -> (Vec<Mat3>, Vec3) {
    let n = skeleton.joint_count();
    let mut gr = d_rotations.to_vec();
    let mut gp = d_positions.to_vec();
    let mut d_locals = vec![Mat3::zeros(); n];
    for j in (1..n).rev() {
        let p = skeleton.joints[j].parent.expect("non-root joints have parents");
        let parent_rot = globals.rotations[p];
        d_locals[j] = parent_rot.transpose() * gr[j];
        let carry = gr[j] * locals[j].transpose() + gp[j] * skeleton.offset(j).transpose();
        gr[p] += carry;
        let gpj = gp[j];
        gp[p] += gpj;
    }
    d_locals[0] = gr[0];
    (d_locals, gp[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, euler_to_matrix};
    use crate::skeleton::{Joint, Landmarks, Zone};
    use std::f64::consts::FRAC_PI_2;

    fn chain2(offset: [f64; 3]) -> SkeletonSpec {
        // Four limb joints are required; hang them off the root.
        let mut joints = vec![
            Joint { name: "root".into(), parent: None, offset: [0.0; 3], mirror: None, zone: Zone::Hips },
            Joint { name: "child".into(), parent: Some(0), offset, mirror: None, zone: Zone::LeftArm },
        ];
        for (i, z) in [Zone::RightArm, Zone::LeftLeg, Zone::RightLeg].into_iter().enumerate() {
            joints.push(Joint { name: format!("limb{i}"), parent: Some(0), offset: [0.0, -0.1, 0.0], mirror: None, zone: z });
        }
        SkeletonSpec::new("chain", joints, Landmarks::default()).unwrap()
    }

    #[test]
    fn zero_rotation_chain() {
        let s = chain2([0.0, 1.0, 0.0]);
        let g = forward_kinematics(&s, &Vec3::zeros(), &vec![Mat3::identity(); 5]).unwrap();
        assert!((g.positions[1] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rotated_root_moves_child() {
        let s = chain2([1.0, 0.0, 0.0]);
        let mut locals = vec![Mat3::identity(); 5];
        locals[0] = axis_angle(&Vec3::z(), FRAC_PI_2);
        let g = forward_kinematics(&s, &Vec3::zeros(), &locals).unwrap();
        assert!((g.positions[1] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn joint_count_mismatch() {
        let s = chain2([1.0, 0.0, 0.0]);
        assert!(matches!(
            forward_kinematics(&s, &Vec3::zeros(), &[Mat3::identity()]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let s = SkeletonSpec::minimal();
        let locals: Vec<Mat3> = (0..5)
            .map(|j| euler_to_matrix(&[0.3 * j as f64, -0.2, 0.5 - 0.1 * j as f64]))
            .collect();
        let root = Vec3::new(0.1, 0.9, -0.3);
        let wr: Vec<Mat3> = (0..5).map(|j| euler_to_matrix(&[j as f64, 1.0, -2.0])).collect();
        let wp: Vec<Vec3> = (0..5).map(|j| Vec3::new(1.0, -(j as f64), 0.5)).collect();
        let f = |locals: &[Mat3], root: &Vec3| {
            let g = forward_kinematics(&s, root, locals).unwrap();
            (0..5)
                .map(|j| g.rotations[j].component_mul(&wr[j]).sum() + g.positions[j].dot(&wp[j]))
                .sum::<f64>()
        };
        let g = forward_kinematics(&s, &root, &locals).unwrap();
        let (dl, droot) = forward_kinematics_backward(&s, &locals, &g, &wr, &wp);
        let h = 1e-6;
        for j in 0..5 {
            for r in 0..3 {
                for c in 0..3 {
                    let mut p = locals.clone();
                    let mut m = locals.clone();
                    p[j][(r, c)] += h;
                    m[j][(r, c)] -= h;
                    let fd = (f(&p, &root) - f(&m, &root)) / (2.0 * h);
                    assert!((fd - dl[j][(r, c)]).abs() < 1e-6);
                }
            }
        }
        for k in 0..3 {
            let mut p = root;
            let mut m = root;
            p[k] += h;
            m[k] -= h;
            let fd = (f(&locals, &p) - f(&locals, &m)) / (2.0 * h);
            assert!((fd - droot[k]).abs() < 1e-6);
        }
    }
}
