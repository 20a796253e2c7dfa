//! One training iteration: batch sampling with augmentation and noisy
//! effectors, the seven-term loss with its output gradients, and Adam.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{mirror_pose, rotate_pose_about_y};
use crate::effector::{center_effectors, EffectorSet, EffectorType};
use crate::error::{Error, Result};
use crate::geometry::Mat3;
use crate::kinematics::{GlobalTransforms, Pose};
use crate::losses::{geodesic_with_grad, lookat_with_grad};
use crate::model::{backward_batch, forward_batch, ForwardOutput, Model, OutputGrad};
use crate::nn::{to_f32_grid, Parameters};
use crate::noise::{make_effector, sample_effector_slots, NoiseConfig};
use crate::skeleton::SkeletonSpec;

/// Norm regularizer inside the training look-at loss.
pub const LOOKAT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Passes over the training split.
    pub epochs: usize,
    /// Hard cap on optimizer steps, overriding `epochs` when set.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// `W_pos`, the base scale of the position losses.
    pub position_weight: f64,
    /// `σ_M` per effector type: position, rotation, look-at.
    pub sigma_max: [f64; 3],
    pub max_weight: f64,
    pub noise_exponent: f64,
    pub min_effectors: usize,
    pub max_effectors: usize,
    pub mirror: bool,
    pub rotate_y: bool,
    pub seed: u64,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40_000,
            max_steps: None,
            batch_size: 2048,
            learning_rate: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            position_weight: 1e2,
            sigma_max: [0.1; 3],
            max_weight: 1e3,
            noise_exponent: 13.0,
            min_effectors: 3,
            max_effectors: 16,
            mirror: true,
            rotate_y: true,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            sigma_max: self.sigma_max,
            eta: self.noise_exponent,
            max_weight: self.max_weight,
        }
    }

    pub fn validate(&self, joint_count: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be a finite non-negative number", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("Adam parameters out of range".into());
        }
        if self.min_effectors == 0 || self.min_effectors > self.max_effectors || self.max_effectors > 3 * joint_count {
            return bad(format!(
                "effector range [{}, {}] infeasible for {joint_count} joints",
                self.min_effectors, self.max_effectors
            ));
        }
        if self.sigma_max.iter().any(|s| *s < 0.0) || self.max_weight <= 0.0 || self.noise_exponent < 0.0 {
            return bad("noise parameters out of range".into());
        }
        if self.log_interval == 0 || self.checkpoint_interval == 0 {
            return bad("intervals must be positive".into());
        }
        Ok(())
    }
}

/// Clean targets for one training item.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub locals: Vec<Mat3>,
    pub globals: GlobalTransforms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub effectors: EffectorSet,
    /// `W(Λ)` per effector, in effector order.
    pub weights: Vec<f64>,
    pub truth: GroundTruth,
}

/// Augments `pose`, samples `count` effector slots and builds noisy effectors
/// with random tolerances.
pub fn prepare_batch_item(
    pose: &Pose,
    skeleton: &SkeletonSpec,
    count: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BatchItem> {
    let mut pose = pose.clone();
    if config.rotate_y {
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        pose = rotate_pose_about_y(&pose, angle);
    }
    if config.mirror && rng.random_bool(0.5) {
        pose = mirror_pose(skeleton, &pose)?;
    }
    let locals = pose.local_matrices();
    let globals = pose.global_transforms(skeleton)?;
    let slots = sample_effector_slots(rng, skeleton.joint_count(), (count, count))?;
    let noise = config.noise();
    let mut effectors = Vec::with_capacity(slots.len());
    let mut weights = Vec::with_capacity(slots.len());
    for (joint, kind) in slots {
        let tolerance = rng.random::<f64>();
        let (e, w) = make_effector(joint, kind, tolerance, &globals, &noise, rng)?;
        effectors.push(e);
        weights.push(w);
    }
    Ok(BatchItem {
        effectors: EffectorSet::new(effectors, skeleton.joint_count())?,
        weights,
        truth: GroundTruth { locals, globals },
    })
}

/// The seven loss terms of one item (or their batch mean) and the total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gpd_l2_rnd: f64,
    pub ikd_l2_rnd: f64,
    pub gpd_l2_det: f64,
    pub ikd_l2_det: f64,
    pub loc_geo_det: f64,
    pub glob_geo_rnd: f64,
    pub lookat_det: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("gpd_l2_rnd", self.gpd_l2_rnd),
            ("ikd_l2_rnd", self.ikd_l2_rnd),
            ("gpd_l2_det", self.gpd_l2_det),
            ("ikd_l2_det", self.ikd_l2_det),
            ("loc_geo_det", self.loc_geo_det),
            ("glob_geo_rnd", self.glob_geo_rnd),
            ("lookat_det", self.lookat_det),
            ("total", self.total),
        ]
    }

    /// `(W_pos/J)·(position terms) + (1/J)·(angular terms)`.
    pub fn combine(&self, position_weight: f64, joint_count: usize) -> f64 {
        let j = joint_count as f64;
        position_weight / j * (self.gpd_l2_rnd + self.ikd_l2_rnd + self.gpd_l2_det + self.ikd_l2_det)
            + (self.lookat_det + self.glob_geo_rnd + self.loc_geo_det) / j
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.terms() {
            if !v.is_finite() {
                return Err(Error::Numerical { term: name.to_string() });
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.gpd_l2_rnd += s * other.gpd_l2_rnd;
        self.ikd_l2_rnd += s * other.ikd_l2_rnd;
        self.gpd_l2_det += s * other.gpd_l2_det;
        self.ikd_l2_det += s * other.ikd_l2_det;
        self.loc_geo_det += s * other.loc_geo_det;
        self.glob_geo_rnd += s * other.glob_geo_rnd;
        self.lookat_det += s * other.lookat_det;
        self.total += s * other.total;
    }
}

/// Loss terms for one item and the gradient of `scale · total` w.r.t. the
/// model outputs.
pub fn compute_losses(
    output: &ForwardOutput,
    item: &BatchItem,
    position_weight: f64,
    scale: f64,
) -> Result<(LossBreakdown, OutputGrad)> {
    let j = item.truth.locals.len();
    let jf = j as f64;
    let truth = &item.truth.globals;
    let mut loss = LossBreakdown::default();
    let mut grad = OutputGrad::zeros(j);
    let pos_scale = scale * position_weight / jf;
    let ang_scale = scale / jf;

    for k in 0..j {
        let dg = output.draft_positions[k] - truth.positions[k];
        loss.gpd_l2_det += dg.norm_squared();
        grad.draft_positions[k] += dg * (2.0 * pos_scale);
        let di = output.global.positions[k] - truth.positions[k];
        loss.ikd_l2_det += di.norm_squared();
        grad.global_positions[k] += di * (2.0 * pos_scale);
        let (theta, d) = geodesic_with_grad(&item.truth.locals[k], &output.local_rotations[k]);
        loss.loc_geo_det += theta;
        grad.local_rotations[k] += d * ang_scale;
    }

    let mut sums = [0.0f64; 3];
    for (e, &w) in item.effectors.effectors().iter().zip(&item.weights) {
        sums[e.kind.index()] += match e.kind {
            EffectorType::LookAt => 1.0,
            _ => w,
        };
    }
    for (e, &w) in item.effectors.effectors().iter().zip(&item.weights) {
        let k = e.joint;
        match e.kind {
            EffectorType::Position => {
                let a = w / sums[0];
                let dg = output.draft_positions[k] - truth.positions[k];
                loss.gpd_l2_rnd += a * dg.norm_squared();
                grad.draft_positions[k] += dg * (2.0 * a * pos_scale);
                let di = output.global.positions[k] - truth.positions[k];
                loss.ikd_l2_rnd += a * di.norm_squared();
                grad.global_positions[k] += di * (2.0 * a * pos_scale);
            }
            EffectorType::Rotation => {
                let a = w / sums[1];
                let (theta, d) = geodesic_with_grad(&truth.rotations[k], &output.global.rotations[k]);
                loss.glob_geo_rnd += a * theta;
                grad.global_rotations[k] += d * (a * ang_scale);
            }
            EffectorType::LookAt => {
                let a = 1.0 / sums[2];
                let (theta, d) = lookat_with_grad(
                    &e.point(),
                    &e.direction(),
                    &output.global.rotations[k],
                    &output.global.positions[k],
                    LOOKAT_EPS,
                );
                loss.lookat_det += a * theta;
                grad.global_rotations[k] += d.d_rotation * (a * ang_scale);
                grad.global_positions[k] += d.d_position * (a * ang_scale);
            }
        }
    }
    loss.total = loss.combine(position_weight, j);
    loss.check_finite()?;
    Ok((loss, grad))
}

/// Adam with bias correction. Parameters are snapped to the f32 grid after
/// every update so checkpoints stay exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(parameter_count: usize, config: &TrainConfig) -> Self {
        Self {
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            t: 0,
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &[f64], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut k = 0;
        let (m, v, eps) = (&mut self.m, &mut self.v, self.eps);
        params.visit_mut("", &mut |_, _, data| {
            for x in data.iter_mut() {
                let g = grads[k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                *x = to_f32_grid(*x - update);
                k += 1;
            }
        });
    }
}

/// Forward pass, mean loss over the batch and parameter gradients of that
/// mean. `rng` enables dropout.
pub fn batch_gradients(
    model: &Model,
    skeleton: &SkeletonSpec,
    items: &[BatchItem],
    position_weight: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let centered: Vec<_> = items.iter().map(|i| center_effectors(&i.effectors)).collect();
    let (outputs, cache) = forward_batch(&model.config, &model.params, skeleton, &centered, rng)?;
    let scale = 1.0 / items.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut grads = Vec::with_capacity(items.len());
    for (out, item) in outputs.iter().zip(items) {
        let (l, g) = compute_losses(out, item, position_weight, scale)?;
        mean.add_scaled(&l, scale);
        grads.push(g);
    }
    mean.check_finite()?;
    let g = backward_batch(&model.config, &model.params, skeleton, &cache, &grads)?;
    let flat = g.flatten();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            term: "gradient".into(),
        });
    }
    Ok((mean, flat))
}

/// One optimizer update on a prepared batch. On a numerical error the
/// parameters are left untouched.
pub fn training_step(
    model: &mut Model,
    adam: &mut Adam,
    skeleton: &SkeletonSpec,
    items: &[BatchItem],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_gradients(model, skeleton, items, config.position_weight, Some(rng))?;
    adam.step(&mut model.params, &grads, config.learning_rate);
    Ok(loss)
}
