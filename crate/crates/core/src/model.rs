//! The full network: effector encoder (prototype-subtract-accumulate,
//! maxpool-concat or the masked fully-connected baseline), the global
//! position decoder, the inverse-kinematics decoder and the final FK pass.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::effector::{center_effectors, encode_effector_inputs, encoded_width, CenteredEffectorSet, EffectorSet};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{rotation6d_backward, rotation6d_to_matrix, rotation6d_to_matrix_regularized, Mat3, Vec3, REGULARIZE_EPS};
use crate::kinematics::{forward_kinematics, forward_kinematics_backward, GlobalTransforms};
use crate::nn::{
    broadcast_segments, segment_max, segment_mean, segment_offsets, to_f32_grid, visit_array2, visit_array2_mut, BlockCache,
    Dropout, FcrCache, FcrStack, Parameters, ResidualBlock,
};
use crate::skeleton::SkeletonSpec;

/// Width of one masked-baseline slot: 6D data plus tolerance.
pub const SLOT_WIDTH: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Psa,
    Mcdc,
    MaskedFcr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub encoder_blocks: usize,
    pub gpd_blocks: usize,
    pub ikd_blocks: usize,
    pub layers_per_block: usize,
    pub embedding_dim: usize,
    pub dropout: f64,
    pub encoder: EncoderKind,
    pub joint_count: usize,
    /// Pose-embedding width `E`.
    pub embedding_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::protores(64)
    }
}

impl ModelConfig {
    /// The published configuration.
    pub fn protores(joint_count: usize) -> Self {
        Self {
            width: 1024,
            encoder_blocks: 3,
            gpd_blocks: 3,
            ikd_blocks: 3,
            layers_per_block: 3,
            embedding_dim: 32,
            dropout: 0.01,
            encoder: EncoderKind::Psa,
            joint_count,
            embedding_width: 1024,
        }
    }

    /// The wide-input baseline with the same decoder split.
    pub fn masked_fcr(joint_count: usize) -> Self {
        Self {
            encoder: EncoderKind::MaskedFcr,
            ..Self::protores(joint_count)
        }
    }

    /// Width of one encoder input row (set encoders) or of the whole input
    /// vector (masked baseline).
    pub fn input_width(&self) -> usize {
        match self.encoder {
            EncoderKind::MaskedFcr => 3 * SLOT_WIDTH * self.joint_count,
            _ => encoded_width(self.embedding_dim),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 {
            return bad("width must be positive");
        }
        if self.layers_per_block == 0 {
            return bad("layers_per_block must be at least 1");
        }
        if self.encoder_blocks == 0 {
            return bad("encoder_blocks must be at least 1");
        }
        if self.joint_count == 0 {
            return bad("joint_count must be positive");
        }
        if self.embedding_width == 0 {
            return bad("embedding_width must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.encoder != EncoderKind::MaskedFcr && self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        let needs_square = match self.encoder {
            EncoderKind::Psa => self.encoder_blocks >= 2,
            EncoderKind::Mcdc => true,
            EncoderKind::MaskedFcr => false,
        };
        if needs_square && self.embedding_width != self.width {
            return Err(Error::Config(format!(
                "embedding_width {} must equal width {} for this encoder",
                self.embedding_width, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderParams {
    /// Permutation-invariant set encoder (prototype or maxpool stacking).
    Set {
        joint_embedding: Array2<f64>,
        type_embedding: Array2<f64>,
        blocks: Vec<ResidualBlock>,
    },
    /// Fixed-slot encoder over `3J` placeholder-masked slots.
    Masked { placeholders: Array2<f64>, stack: FcrStack },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub encoder: EncoderParams,
    pub gpd: FcrStack,
    pub ikd: FcrStack,
}

fn normal_table(rows: usize, cols: usize, variance: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, variance.sqrt()).expect("positive variance");
    Array2::from_shape_simple_fn((rows, cols), || to_f32_grid(dist.sample(rng)))
}

impl ModelParameters {
    fn build(config: &ModelConfig, mut rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let (w, l, e, j) = (config.width, config.layers_per_block, config.embedding_width, config.joint_count);
        let stack = |input: usize, output: usize, blocks: usize, rng: &mut Option<&mut ChaCha8Rng>| match rng {
            Some(r) => FcrStack::init(input, output, blocks, w, l, *r),
            None => FcrStack::zeros(input, output, blocks, w, l),
        };
        let encoder = match config.encoder {
            EncoderKind::MaskedFcr => {
                let s = stack(config.input_width(), e, config.encoder_blocks, &mut rng);
                let placeholders = match rng.as_deref_mut() {
                    Some(r) => normal_table(3 * j, SLOT_WIDTH, 1.0 / SLOT_WIDTH as f64, r),
                    None => Array2::zeros((3 * j, SLOT_WIDTH)),
                };
                EncoderParams::Masked { placeholders, stack: s }
            }
            kind => {
                let d_e = config.embedding_dim;
                let (joint_embedding, type_embedding) = match rng.as_deref_mut() {
                    Some(r) => (normal_table(j, d_e, 1.0 / d_e as f64, r), normal_table(3, d_e, 1.0 / d_e as f64, r)),
                    None => (Array2::zeros((j, d_e)), Array2::zeros((3, d_e))),
                };
                let blocks = (0..config.encoder_blocks)
                    .map(|r| {
                        let (input, proj) = match (kind, r) {
                            (_, 0) => (config.input_width(), (kind == EncoderKind::Psa).then_some(e)),
                            (EncoderKind::Psa, _) => (w, Some(e)),
                            _ => (2 * w, None),
                        };
                        match rng.as_deref_mut() {
                            Some(g) => ResidualBlock::init(input, w, l, proj, g),
                            None => ResidualBlock::zeros(input, w, l, proj),
                        }
                    })
                    .collect();
                EncoderParams::Set {
                    joint_embedding,
                    type_embedding,
                    blocks,
                }
            }
        };
        let gpd = stack(e, 3 * j, config.gpd_blocks, &mut rng);
        let ikd = stack(e + 3 * j, 6 * j, config.ikd_blocks, &mut rng);
        Ok(Self { encoder, gpd, ikd })
    }

    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    /// Random initialization: layers uniform in `±1/√fan_in`, embedding
    /// tables `N(0, 1/d_e)`, masked placeholders `N(0, 1/7)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Some(&mut rng))
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    /// `(name, shape)` for every tensor in visiting order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, shape, _| out.push((name.to_string(), shape.to_vec())));
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// Overwrites all values from a flat buffer in visiting order.
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        let n = self.parameter_count();
        if values.len() != n {
            return Err(shape_err(format!("{} values for {n} parameters", values.len())));
        }
        let mut k = 0;
        self.visit_mut("", &mut |_, _, d| {
            d.copy_from_slice(&values[k..k + d.len()]);
            k += d.len();
        });
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, d| ok &= d.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn scale(&mut self, factor: f64) {
        self.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|v| *v *= factor));
    }

    /// Elementwise `self += other`; layouts must match.
    pub fn add_assign(&mut self, other: &ModelParameters) {
        let flat = other.flatten();
        let mut k = 0;
        self.visit_mut("", &mut |_, _, d| {
            for v in d.iter_mut() {
                *v += flat[k];
                k += 1;
            }
        });
    }
}

impl Parameters for ModelParameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        match &self.encoder {
            EncoderParams::Set {
                joint_embedding,
                type_embedding,
                blocks,
            } => {
                visit_array2(joint_embedding, &p("encoder.joint_embedding"), f);
                visit_array2(type_embedding, &p("encoder.type_embedding"), f);
                for (r, b) in blocks.iter().enumerate() {
                    b.visit(&p(&format!("encoder.block{r}")), f);
                }
            }
            EncoderParams::Masked { placeholders, stack } => {
                visit_array2(placeholders, &p("encoder.placeholders"), f);
                stack.visit(&p("encoder"), f);
            }
        }
        self.gpd.visit(&p("gpd"), f);
        self.ikd.visit(&p("ikd"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        match &mut self.encoder {
            EncoderParams::Set {
                joint_embedding,
                type_embedding,
                blocks,
            } => {
                visit_array2_mut(joint_embedding, &p("encoder.joint_embedding"), f);
                visit_array2_mut(type_embedding, &p("encoder.type_embedding"), f);
                for (r, b) in blocks.iter_mut().enumerate() {
                    b.visit_mut(&p(&format!("encoder.block{r}")), f);
                }
            }
            EncoderParams::Masked { placeholders, stack } => {
                visit_array2_mut(placeholders, &p("encoder.placeholders"), f);
                stack.visit_mut(&p("encoder"), f);
            }
        }
        self.gpd.visit_mut(&p("gpd"), f);
        self.ikd.visit_mut(&p("ikd"), f);
    }
}

/// Prediction for one effector set. Positions are in the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub pose_embedding: Array1<f64>,
    pub centroid: Vec3,
    /// GPD joint positions, centroid re-added.
    pub draft_positions: Vec<Vec3>,
    pub rotations6d: Vec<[f64; 6]>,
    pub local_rotations: Vec<Mat3>,
    pub global: GlobalTransforms,
}

impl ForwardOutput {
    /// Fails if any predicted 6D rotation is degenerate without regularization.
    pub fn check_rotations(&self) -> Result<()> {
        for r6 in &self.rotations6d {
            rotation6d_to_matrix(r6)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum EncoderCache {
    Psa {
        offsets: Vec<usize>,
        slots: Vec<(usize, usize)>,
        blocks: Vec<BlockCache>,
        inputs: Vec<Array2<f64>>,
    },
    Mcdc {
        offsets: Vec<usize>,
        slots: Vec<(usize, usize)>,
        blocks: Vec<BlockCache>,
        argmax: Vec<Array2<usize>>,
    },
    Masked {
        present: Vec<Vec<bool>>,
        stack: FcrCache,
    },
}

/// Everything the backward pass needs from one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder: EncoderCache,
    gpd: FcrCache,
    ikd: FcrCache,
    rotations6d: Array2<f64>,
    locals: Vec<Vec<Mat3>>,
    centered: Vec<GlobalTransforms>,
}

/// Gradients of a scalar loss w.r.t. one item's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub draft_positions: Vec<Vec3>,
    pub local_rotations: Vec<Mat3>,
    pub global_rotations: Vec<Mat3>,
    pub global_positions: Vec<Vec3>,
}

impl OutputGrad {
    pub fn zeros(joint_count: usize) -> Self {
        Self {
            draft_positions: vec![Vec3::zeros(); joint_count],
            local_rotations: vec![Mat3::zeros(); joint_count],
            global_rotations: vec![Mat3::zeros(); joint_count],
            global_positions: vec![Vec3::zeros(); joint_count],
        }
    }
}

/// Prototype-subtract-accumulate encoder over one item: `p_R` for `x_in`.
pub fn encoder_forward_psa(x_in: ArrayView2<f64>, blocks: &[ResidualBlock]) -> Result<Array1<f64>> {
    if x_in.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    let offsets = vec![0, x_in.nrows()];
    let (p, _) = psa_forward(x_in.to_owned(), &offsets, blocks, &mut None)?;
    Ok(p.row(0).to_owned())
}

/// Maxpool-concat encoder over one item.
pub fn encoder_forward_mcdc(x_in: ArrayView2<f64>, blocks: &[ResidualBlock]) -> Result<Array1<f64>> {
    if x_in.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    let offsets = vec![0, x_in.nrows()];
    let (p, _) = mcdc_forward(x_in.to_owned(), &offsets, blocks, &mut None)?;
    Ok(p.row(0).to_owned())
}

type PsaParts = (Vec<BlockCache>, Vec<Array2<f64>>);

fn psa_forward(
    x_in: Array2<f64>,
    offsets: &[usize],
    blocks: &[ResidualBlock],
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Array2<f64>, PsaParts)> {
    let items = offsets.len() - 1;
    let e = blocks[0].projection.as_ref().expect("prototype blocks project").output_dim();
    let mut p = Array2::<f64>::zeros((items, e));
    let mut caches = Vec::with_capacity(blocks.len());
    let mut inputs = Vec::with_capacity(blocks.len().saturating_sub(1));
    let mut x = x_in;
    let mut prev_b: Option<Array2<f64>> = None;
    for (r, block) in blocks.iter().enumerate() {
        if let Some(b) = prev_b.take() {
            // x_r = relu(b_{r−1} − p_{r−1}/(r−1)) in 1-based block numbering.
            let mut xr = b - &(broadcast_segments(p.view(), offsets) / r as f64);
            xr.mapv_inplace(|v| v.max(0.0));
            inputs.push(xr.clone());
            x = xr;
        }
        let (b, f, cache) = block.forward(x, dropout)?;
        p += &segment_mean(f.expect("prototype blocks project").view(), offsets);
        caches.push(cache);
        prev_b = Some(b);
        x = Array2::zeros((0, 0));
    }
    Ok((p, (caches, inputs)))
}

fn concat_pooled(b: &Array2<f64>, offsets: &[usize]) -> (Array2<f64>, Array2<usize>) {
    let (m, arg) = segment_max(b.view(), offsets);
    let x = concatenate(Axis(1), &[b.view(), broadcast_segments(m.view(), offsets).view()]).expect("matching rows");
    (x, arg)
}

fn mcdc_forward(
    x_in: Array2<f64>,
    offsets: &[usize],
    blocks: &[ResidualBlock],
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Array2<f64>, (Vec<BlockCache>, Vec<Array2<usize>>))> {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut argmax = Vec::with_capacity(blocks.len());
    let mut x = x_in;
    for block in blocks {
        let (b, _, cache) = block.forward(x, dropout)?;
        caches.push(cache);
        let (next, arg) = concat_pooled(&b, offsets);
        argmax.push(arg);
        x = next;
    }
    // The last pooling gives the embedding: the second half of the last input.
    let w = blocks.last().expect("at least one block").width();
    let items = offsets.len() - 1;
    let mut emb = Array2::zeros((items, w));
    for i in 0..items {
        emb.row_mut(i).assign(&x.slice(s![offsets[i], w..]));
    }
    Ok((emb, (caches, argmax)))
}

fn segment_sum(x: ArrayView2<f64>, offsets: &[usize]) -> Array2<f64> {
    let mut out = segment_mean(x, offsets);
    for (i, w) in offsets.windows(2).enumerate() {
        out.row_mut(i).mapv_inplace(|v| v * (w[1] - w[0]) as f64);
    }
    out
}

fn scatter_max(d_pooled: ArrayView2<f64>, arg: &Array2<usize>, into: &mut Array2<f64>) {
    for ((i, c), &row) in arg.indexed_iter() {
        into[(row, c)] += d_pooled[(i, c)];
    }
}

fn check_item(config: &ModelConfig, set: &CenteredEffectorSet) -> Result<()> {
    for e in &set.effectors {
        if e.joint >= config.joint_count {
            return Err(shape_err(format!(
                "effector joint {} outside model with {} joints",
                e.joint, config.joint_count
            )));
        }
    }
    if set.effectors.is_empty() && config.encoder != EncoderKind::MaskedFcr {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

fn masked_input(config: &ModelConfig, placeholders: &Array2<f64>, sets: &[CenteredEffectorSet]) -> (Array2<f64>, Vec<Vec<bool>>) {
    let slots = 3 * config.joint_count;
    let mut x = Array2::zeros((sets.len(), slots * SLOT_WIDTH));
    let mut present = vec![vec![false; slots]; sets.len()];
    for (b, set) in sets.iter().enumerate() {
        for e in &set.effectors {
            let s = e.joint * 3 + e.kind.index();
            present[b][s] = true;
            let mut row = x.slice_mut(s![b, s * SLOT_WIDTH..(s + 1) * SLOT_WIDTH]);
            for k in 0..6 {
                row[k] = e.data[k];
            }
            row[6] = e.tolerance;
        }
        for s in 0..slots {
            if !present[b][s] {
                x.slice_mut(s![b, s * SLOT_WIDTH..(s + 1) * SLOT_WIDTH]).assign(&placeholders.row(s));
            }
        }
    }
    (x, present)
}

/// Batched forward pass over centered effector sets. Passing `rng` turns on
/// training mode (dropout); `None` is evaluation mode.
pub fn forward_batch(
    config: &ModelConfig,
    params: &ModelParameters,
    skeleton: &SkeletonSpec,
    sets: &[CenteredEffectorSet],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<ForwardOutput>, ForwardCache)> {
    if skeleton.joint_count() != config.joint_count {
        return Err(shape_err(format!(
            "skeleton has {} joints, model expects {}",
            skeleton.joint_count(),
            config.joint_count
        )));
    }
    if sets.is_empty() {
        return Err(Error::EmptyInput);
    }
    for set in sets {
        check_item(config, set)?;
    }
    let mut dropout = rng.filter(|_| config.dropout > 0.0).map(|rng| Dropout { rate: config.dropout, rng });
    let j = config.joint_count;

    let (embedding, encoder_cache) = match (&params.encoder, config.encoder) {
        (
            EncoderParams::Set {
                joint_embedding,
                type_embedding,
                blocks,
            },
            kind @ (EncoderKind::Psa | EncoderKind::Mcdc),
        ) => {
            let rows: Vec<Array2<f64>> = sets
                .iter()
                .map(|s| encode_effector_inputs(s, joint_embedding.view(), type_embedding.view()))
                .collect::<Result<_>>()?;
            let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
            let x_in = concatenate(Axis(0), &views).map_err(|e| shape_err(e.to_string()))?;
            let offsets = segment_offsets(sets.iter().map(|s| s.effectors.len()));
            let slots = sets
                .iter()
                .flat_map(|s| s.effectors.iter().map(|e| (e.joint, e.kind.index())))
                .collect();
            if kind == EncoderKind::Psa {
                let (p, (blocks, inputs)) = psa_forward(x_in, &offsets, blocks, &mut dropout)?;
                (p, EncoderCache::Psa { offsets, slots, blocks, inputs })
            } else {
                let (p, (blocks, argmax)) = mcdc_forward(x_in, &offsets, blocks, &mut dropout)?;
                (p, EncoderCache::Mcdc { offsets, slots, blocks, argmax })
            }
        }
        (EncoderParams::Masked { placeholders, stack }, EncoderKind::MaskedFcr) => {
            let (x, present) = masked_input(config, placeholders, sets);
            let (p, cache) = stack.forward(x, &mut dropout)?;
            (p, EncoderCache::Masked { present, stack: cache })
        }
        _ => return Err(Error::Config("parameters do not match the configured encoder".into())),
    };

    let (draft, gpd_cache) = params.gpd.forward(embedding.clone(), &mut dropout)?;
    let ikd_in = concatenate(Axis(1), &[embedding.view(), draft.view()]).map_err(|e| shape_err(e.to_string()))?;
    let (r6, ikd_cache) = params.ikd.forward(ikd_in, &mut dropout)?;

    let mut outputs = Vec::with_capacity(sets.len());
    let mut locals_all = Vec::with_capacity(sets.len());
    let mut centered_all = Vec::with_capacity(sets.len());
    for (b, set) in sets.iter().enumerate() {
        let rotations6d: Vec<[f64; 6]> = (0..j)
            .map(|k| std::array::from_fn(|c| r6[(b, 6 * k + c)]))
            .collect();
        let locals: Vec<Mat3> = rotations6d
            .iter()
            .map(|v| rotation6d_to_matrix_regularized(v, REGULARIZE_EPS))
            .collect();
        let root = Vec3::new(draft[(b, 0)], draft[(b, 1)], draft[(b, 2)]);
        let centered = forward_kinematics(skeleton, &root, &locals)?;
        let mut global = centered.clone();
        global.translate(&set.centroid);
        let draft_positions = (0..j)
            .map(|k| Vec3::new(draft[(b, 3 * k)], draft[(b, 3 * k + 1)], draft[(b, 3 * k + 2)]) + set.centroid)
            .collect();
        outputs.push(ForwardOutput {
            pose_embedding: embedding.row(b).to_owned(),
            centroid: set.centroid,
            draft_positions,
            rotations6d,
            local_rotations: locals.clone(),
            global,
        });
        locals_all.push(locals);
        centered_all.push(centered);
    }
    let cache = ForwardCache {
        encoder: encoder_cache,
        gpd: gpd_cache,
        ikd: ikd_cache,
        rotations6d: r6,
        locals: locals_all,
        centered: centered_all,
    };
    Ok((outputs, cache))
}

/// Reverse pass: parameter gradients of a scalar loss whose gradients w.r.t.
/// each item's outputs are `grads`.
pub fn backward_batch(
    config: &ModelConfig,
    params: &ModelParameters,
    skeleton: &SkeletonSpec,
    cache: &ForwardCache,
    grads: &[OutputGrad],
) -> Result<ModelParameters> {
    let j = config.joint_count;
    let items = cache.locals.len();
    if grads.len() != items {
        return Err(shape_err(format!("{} output gradients for {items} items", grads.len())));
    }
    let mut out = ModelParameters::zeros(config)?;
    let mut d_draft = Array2::<f64>::zeros((items, 3 * j));
    let mut d_r6 = Array2::<f64>::zeros((items, 6 * j));
    for (b, g) in grads.iter().enumerate() {
        let (mut d_locals, d_root) = forward_kinematics_backward(
            skeleton,
            &cache.locals[b],
            &cache.centered[b],
            &g.global_rotations,
            &g.global_positions,
        );
        for k in 0..j {
            d_locals[k] += g.local_rotations[k];
            let r6: [f64; 6] = std::array::from_fn(|c| cache.rotations6d[(b, 6 * k + c)]);
            let d = rotation6d_backward(&r6, &d_locals[k], REGULARIZE_EPS);
            for c in 0..6 {
                d_r6[(b, 6 * k + c)] = d[c];
            }
            for c in 0..3 {
                d_draft[(b, 3 * k + c)] = g.draft_positions[k][c];
            }
        }
        for c in 0..3 {
            d_draft[(b, c)] += d_root[c];
        }
    }
    let e = config.embedding_width;
    let d_ikd_in = params
        .ikd
        .backward(&cache.ikd, d_r6.view(), &mut out.ikd, true)
        .expect("requested");
    let mut d_emb = d_ikd_in.slice(s![.., ..e]).to_owned();
    d_draft += &d_ikd_in.slice(s![.., e..]);
    d_emb += &params
        .gpd
        .backward(&cache.gpd, d_draft.view(), &mut out.gpd, true)
        .expect("requested");
    encoder_backward(config, params, &cache.encoder, d_emb, &mut out);
    Ok(out)
}

fn encoder_backward(config: &ModelConfig, params: &ModelParameters, cache: &EncoderCache, d_emb: Array2<f64>, out: &mut ModelParameters) {
    match (&params.encoder, &mut out.encoder, cache) {
        (
            EncoderParams::Set { blocks, .. },
            EncoderParams::Set {
                joint_embedding: gj,
                type_embedding: gt,
                blocks: gb,
            },
            EncoderCache::Psa {
                offsets,
                slots,
                blocks: caches,
                inputs,
            },
        ) => {
            let mut dp = d_emb;
            let mut db: Option<Array2<f64>> = None;
            let mut d_in = None;
            for r in (0..blocks.len()).rev() {
                let mut df = broadcast_segments(dp.view(), offsets);
                for w in offsets.windows(2) {
                    let n = (w[1] - w[0]) as f64;
                    df.slice_mut(s![w[0]..w[1], ..]).mapv_inplace(|v| v / n);
                }
                let dx = blocks[r]
                    .backward(&caches[r], db.as_ref().map(|d| d.view()), Some(df.view()), &mut gb[r], true)
                    .expect("requested");
                if r > 0 {
                    let mut dpre = dx;
                    ndarray::Zip::from(&mut dpre).and(&inputs[r - 1]).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    dp -= &(segment_sum(dpre.view(), offsets) / r as f64);
                    db = Some(dpre);
                } else {
                    d_in = Some(dx);
                }
            }
            scatter_embeddings(config, &d_in.expect("at least one block"), slots, gj, gt);
        }
        (
            EncoderParams::Set { blocks, .. },
            EncoderParams::Set {
                joint_embedding: gj,
                type_embedding: gt,
                blocks: gb,
            },
            EncoderCache::Mcdc {
                offsets,
                slots,
                blocks: caches,
                argmax,
            },
        ) => {
            let w = config.width;
            let rows = *offsets.last().expect("offsets");
            let mut db = Array2::<f64>::zeros((rows, w));
            scatter_max(d_emb.view(), argmax.last().expect("at least one block"), &mut db);
            let mut d_in = None;
            for r in (0..blocks.len()).rev() {
                let dx = blocks[r]
                    .backward(&caches[r], Some(db.view()), None, &mut gb[r], true)
                    .expect("requested");
                if r > 0 {
                    let mut next = dx.slice(s![.., ..w]).to_owned();
                    let pooled = segment_sum(dx.slice(s![.., w..]), offsets);
                    scatter_max(pooled.view(), &argmax[r - 1], &mut next);
                    db = next;
                } else {
                    d_in = Some(dx);
                }
            }
            scatter_embeddings(config, &d_in.expect("at least one block"), slots, gj, gt);
        }
        (
            EncoderParams::Masked { stack, .. },
            EncoderParams::Masked {
                placeholders: gph,
                stack: gs,
            },
            EncoderCache::Masked { present, stack: c },
        ) => {
            let dx = stack.backward(c, d_emb.view(), gs, true).expect("requested");
            for (b, pres) in present.iter().enumerate() {
                for (slot, &p) in pres.iter().enumerate() {
                    if !p {
                        let mut row = gph.row_mut(slot);
                        row += &dx.slice(s![b, slot * SLOT_WIDTH..(slot + 1) * SLOT_WIDTH]);
                    }
                }
            }
        }
        _ => panic!("encoder cache does not match parameters"),
    }
}

fn scatter_embeddings(config: &ModelConfig, d_in: &Array2<f64>, slots: &[(usize, usize)], gj: &mut Array2<f64>, gt: &mut Array2<f64>) {
    let d_e = config.embedding_dim;
    for (row, &(joint, kind)) in slots.iter().enumerate() {
        let mut rj = gj.row_mut(joint);
        rj += &d_in.slice(s![row, 7..7 + d_e]);
        let mut rt = gt.row_mut(kind);
        rt += &d_in.slice(s![row, 7 + d_e..]);
    }
}

/// A configuration with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParameters::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Evaluation-mode prediction for one effector set.
    pub fn forward(&self, skeleton: &SkeletonSpec, set: &EffectorSet) -> Result<ForwardOutput> {
        let mut out = self.forward_many(skeleton, std::slice::from_ref(set))?;
        Ok(out.pop().expect("one item"))
    }

    /// Evaluation-mode prediction for several sets in one batch.
    pub fn forward_many(&self, skeleton: &SkeletonSpec, sets: &[EffectorSet]) -> Result<Vec<ForwardOutput>> {
        let centered: Vec<_> = sets.iter().map(center_effectors).collect();
        Ok(forward_batch(&self.config, &self.params, skeleton, &centered, None)?.0)
    }
}
