//! Tolerance-driven noise and loss weights, the three effector noise models,
//! and random effector-slot sampling.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::effector::{Effector, EffectorType};
use crate::error::{Error, Result};
use crate::geometry::{euler_to_matrix, matrix_to_rotation6d, Mat3, Vec3};
use crate::kinematics::GlobalTransforms;

/// Standard deviation of the look-at distance distribution before folding.
pub const LOOKAT_DISTANCE_STD: f64 = 5.0;

/// `σ(Λ) = σ_M · Λ^η`.
pub fn tolerance_to_noise_std(tolerance: f64, sigma_max: f64, eta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tolerance) {
        return Err(Error::Domain(format!("tolerance {tolerance} outside [0, 1]")));
    }
    Ok(sigma_max * tolerance.powf(eta))
}

/// `W = min(W_M, 1/σ)`, equal to `W_M` whenever `σ < 1/W_M` (including `σ = 0`).
pub fn tolerance_to_weight(sigma: f64, max_weight: f64) -> f64 {
    if sigma < 1.0 / max_weight {
        max_weight
    } else {
        max_weight.min(1.0 / sigma)
    }
}

/// Noise parameters shared by training and benchmark generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// σ_M per effector type (position, rotation, look-at).
    pub sigma_max: [f64; 3],
    pub eta: f64,
    pub max_weight: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_max: [0.1; 3],
            eta: 13.0,
            max_weight: 1e3,
        }
    }
}

fn normal3<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Draws `N ~ U[n_min, n_max]` distinct `(joint, type)` pairs uniformly from
/// the `J × 3` grid.
pub fn sample_effector_slots<R: Rng + ?Sized>(
    rng: &mut R,
    joint_count: usize,
    n_range: (usize, usize),
) -> Result<Vec<(usize, EffectorType)>> {
    let (lo, hi) = n_range;
    if lo == 0 || lo > hi || hi > 3 * joint_count {
        return Err(Error::Config(format!(
            "effector count range [{lo}, {hi}] is infeasible for {joint_count} joints"
        )));
    }
    let n = rng.random_range(lo..=hi);
    Ok(index::sample(rng, 3 * joint_count, n)
        .into_iter()
        .map(|k| (k / 3, EffectorType::from_index(k % 3).expect("k % 3 < 3")))
        .collect())
}

/// `[g + σε, 0, 0, 0]` with `ε ~ N(0, I)`.
pub fn corrupt_position_effector<R: Rng + ?Sized>(g: &Vec3, sigma: f64, rng: &mut R) -> [f64; 6] {
    let p = if sigma == 0.0 { *g } else { g + normal3(rng) * sigma };
    [p.x, p.y, p.z, 0.0, 0.0, 0.0]
}

/// 6D form of `Ψ · G13`, where `Ψ` is built from Euler angles `ε ~ N(0, σ²I)`.
pub fn corrupt_rotation_effector<R: Rng + ?Sized>(g13: &Mat3, sigma: f64, rng: &mut R) -> [f64; 6] {
    if sigma == 0.0 {
        return matrix_to_rotation6d(g13);
    }
    let e = normal3(rng) * sigma;
    matrix_to_rotation6d(&(euler_to_matrix(&[e.x, e.y, e.z]) * g13))
}

/// Random local facing direction `d` and a target on the ray from the joint
/// along `G13 · d`, at folded-normal distance, plus `σε` jitter.
pub fn generate_lookat_effector<R: Rng + ?Sized>(g: &Vec3, g13: &Mat3, sigma: f64, rng: &mut R) -> [f64; 6] {
    let d = loop {
        let v = normal3(rng);
        let n = v.norm();
        if n > 1e-12 {
            break v / n;
        }
    };
    let dist = (rng.sample::<f64, _>(StandardNormal) * LOOKAT_DISTANCE_STD).abs();
    let mut t = g + g13 * d * dist;
    if sigma != 0.0 {
        t += normal3(rng) * sigma;
    }
    [t.x, t.y, t.z, d.x, d.y, d.z]
}

/// Builds one effector of the given type against ground-truth globals,
/// returning it with its loss weight `W(Λ)`.
pub fn make_effector<R: Rng + ?Sized>(
    joint: usize,
    kind: EffectorType,
    tolerance: f64,
    globals: &GlobalTransforms,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<(Effector, f64)> {
    let sigma = tolerance_to_noise_std(tolerance, noise.sigma_max[kind.index()], noise.eta)?;
    let weight = tolerance_to_weight(sigma, noise.max_weight);
    let g = &globals.positions[joint];
    let g13 = &globals.rotations[joint];
    let data = match kind {
        EffectorType::Position => corrupt_position_effector(g, sigma, rng),
        EffectorType::Rotation => corrupt_rotation_effector(g13, sigma, rng),
        EffectorType::LookAt => generate_lookat_effector(g, g13, sigma, rng),
    };
    Ok((
        Effector {
            joint,
            kind,
            data,
            tolerance,
        },
        weight,
    ))
}
