//! Dense layers, the two-output residual block and fully-connected residual
//! stacks, each with a cached forward pass and a reverse-mode backward pass.
//!
//! Matrices are row-major `rows × features`; weights are stored `out × in`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{shape_err, Result};

/// Rounds to the nearest `f32`. Parameters are kept f32-representable so a
/// checkpoint written as f32 reloads bit-exactly.
#[inline]
pub fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

/// Visitor over named parameter tensors, in a fixed order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_array2(a: &Array2<f64>, name: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(name, a.shape(), a.as_slice().expect("parameters are contiguous"));
}

pub(crate) fn visit_array2_mut(a: &mut Array2<f64>, name: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
    let shape = a.shape().to_vec();
    f(name, &shape, a.as_slice_mut().expect("parameters are contiguous"));
}

/// Inverted dropout with a dedicated generator.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if self.rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    /// Uniform in `±1/√fan_in` for weights and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut draw = || to_f32_grid(dist.sample(rng));
        let weight = Array2::from_shape_simple_fn((output, input), &mut draw);
        let bias = bias.then(|| Array1::from_shape_simple_fn(output, &mut draw));
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(shape_err(format!(
                "linear layer expects width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx` if asked.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear, need_dx: bool) -> Option<Array2<f64>> {
        grad.weight += &dy.t().dot(&x);
        if let Some(gb) = &mut grad.bias {
            *gb += &dy.sum_axis(Axis(0));
        }
        need_dx.then(|| dy.dot(&self.weight))
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array2(&self.weight, &join(prefix, "weight"), f);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b.shape(), b.as_slice().expect("contiguous"));
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array2_mut(&mut self.weight, &join(prefix, "weight"), f);
        if let Some(b) = &mut self.bias {
            let shape = b.shape().to_vec();
            f(&join(prefix, "bias"), &shape, b.as_slice_mut().expect("contiguous"));
        }
    }
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// `L` hidden layers with ReLU, a residual output `b = relu(L·x + h_L)` and an
/// optional forward output `f = F·h_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub layers: Vec<Linear>,
    pub residual: Linear,
    pub projection: Option<Linear>,
}

/// Values saved by [`ResidualBlock::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    /// `hs[0]` is the block input, `hs[l]` the output of layer `l` after dropout.
    hs: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    out: Array2<f64>,
}

impl ResidualBlock {
    pub fn zeros(input: usize, width: usize, layers: usize, projection: Option<usize>) -> Self {
        Self {
            layers: (0..layers)
                .map(|l| Linear::zeros(if l == 0 { input } else { width }, width, true))
                .collect(),
            residual: Linear::zeros(input, width, false),
            projection: projection.map(|out| Linear::zeros(width, out, false)),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, width: usize, layers: usize, projection: Option<usize>, rng: &mut R) -> Self {
        Self {
            layers: (0..layers)
                .map(|l| Linear::init(if l == 0 { input } else { width }, width, true, rng))
                .collect(),
            residual: Linear::init(input, width, false, rng),
            projection: projection.map(|out| Linear::init(width, out, false, rng)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.residual.input_dim()
    }

    pub fn width(&self) -> usize {
        self.residual.output_dim()
    }

    /// Returns `(b, f, cache)`; `f` is `None` when the block has no projection.
    pub fn forward(
        &self,
        x: Array2<f64>,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<(Array2<f64>, Option<Array2<f64>>, BlockCache)> {
        if x.ncols() != self.input_dim() {
            return Err(shape_err(format!(
                "residual block expects width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut hs = Vec::with_capacity(self.layers.len() + 1);
        let mut masks = Vec::with_capacity(self.layers.len());
        hs.push(x);
        for layer in &self.layers {
            let mut h = layer.forward(hs.last().expect("non-empty").view())?;
            relu_inplace(&mut h);
            let mask = dropout.as_mut().and_then(|d| d.mask(h.nrows(), h.ncols()));
            if let Some(m) = &mask {
                h *= m;
            }
            masks.push(mask);
            hs.push(h);
        }
        let h_last = hs.last().expect("non-empty");
        let mut out = self.residual.forward(hs[0].view())?;
        out += h_last;
        relu_inplace(&mut out);
        let f = match &self.projection {
            Some(p) => Some(p.forward(h_last.view())?),
            None => None,
        };
        Ok((out.clone(), f, BlockCache { hs, masks, out }))
    }

    /// Backward pass given gradients on `b` and/or `f`.
    pub fn backward(
        &self,
        cache: &BlockCache,
        d_out: Option<ArrayView2<f64>>,
        d_proj: Option<ArrayView2<f64>>,
        grad: &mut ResidualBlock,
        need_dx: bool,
    ) -> Option<Array2<f64>> {
        let x = cache.hs[0].view();
        let h_last = cache.hs.last().expect("non-empty").view();
        let mut dh = Array2::<f64>::zeros(h_last.raw_dim());
        let mut dx_res = None;
        if let Some(db) = d_out {
            let mut dz = db.to_owned();
            Zip::from(&mut dz).and(&cache.out).for_each(|g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
            dx_res = self.residual.backward(x, dz.view(), &mut grad.residual, need_dx);
            dh += &dz;
        }
        if let (Some(df), Some(p)) = (d_proj, &self.projection) {
            let gp = grad.projection.as_mut().expect("gradient mirrors parameters");
            dh += &p.backward(h_last, df, gp, true).expect("requested");
        }
        for l in (0..self.layers.len()).rev() {
            if let Some(m) = &cache.masks[l] {
                dh *= m;
            }
            Zip::from(&mut dh).and(&cache.hs[l + 1]).for_each(|g, &h| {
                if h <= 0.0 {
                    *g = 0.0;
                }
            });
            let want = l > 0 || need_dx;
            match self.layers[l].backward(cache.hs[l].view(), dh.view(), &mut grad.layers[l], want) {
                Some(next) => dh = next,
                None => break,
            }
        }
        if !need_dx {
            return None;
        }
        Some(match dx_res {
            Some(r) => dh + r,
            None => dh,
        })
    }
}

impl Parameters for ResidualBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("fc{l}")), f);
        }
        self.residual.visit(&join(prefix, "residual"), f);
        if let Some(p) = &self.projection {
            p.visit(&join(prefix, "forward"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("fc{l}")), f);
        }
        self.residual.visit_mut(&join(prefix, "residual"), f);
        if let Some(p) = &mut self.projection {
            p.visit_mut(&join(prefix, "forward"), f);
        }
    }
}

/// Fully-connected residual stack: `b̃_r = relu(L_r b̃_{r−1} + h_{r,L})`,
/// `f̃_r = f̃_{r−1} + F_r h_{r,L}`. With no blocks it is one biased linear map.
#[derive(Debug, Clone, PartialEq)]
pub enum FcrStack {
    Linear(Linear),
    Blocks(Vec<ResidualBlock>),
}

#[derive(Debug, Clone)]
pub enum FcrCache {
    Linear(Array2<f64>),
    Blocks(Vec<BlockCache>),
}

impl FcrStack {
    pub fn zeros(input: usize, output: usize, blocks: usize, width: usize, layers: usize) -> Self {
        if blocks == 0 {
            return Self::Linear(Linear::zeros(input, output, true));
        }
        Self::Blocks(
            (0..blocks)
                .map(|r| ResidualBlock::zeros(if r == 0 { input } else { width }, width, layers, Some(output)))
                .collect(),
        )
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, blocks: usize, width: usize, layers: usize, rng: &mut R) -> Self {
        if blocks == 0 {
            return Self::Linear(Linear::init(input, output, true, rng));
        }
        Self::Blocks(
            (0..blocks)
                .map(|r| ResidualBlock::init(if r == 0 { input } else { width }, width, layers, Some(output), rng))
                .collect(),
        )
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::Linear(l) => l.input_dim(),
            Self::Blocks(b) => b[0].input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Self::Linear(l) => l.output_dim(),
            Self::Blocks(b) => b[0].projection.as_ref().expect("FCR blocks project").output_dim(),
        }
    }

    pub fn forward(&self, x: Array2<f64>, dropout: &mut Option<Dropout<'_>>) -> Result<(Array2<f64>, FcrCache)> {
        match self {
            Self::Linear(l) => {
                let y = l.forward(x.view())?;
                Ok((y, FcrCache::Linear(x)))
            }
            Self::Blocks(blocks) => {
                let mut acc = Array2::zeros((x.nrows(), self.output_dim()));
                let mut caches = Vec::with_capacity(blocks.len());
                let mut b = x;
                for block in blocks {
                    let (next, f, cache) = block.forward(b, dropout)?;
                    acc += &f.expect("FCR blocks project");
                    caches.push(cache);
                    b = next;
                }
                Ok((acc, FcrCache::Blocks(caches)))
            }
        }
    }

    pub fn backward(&self, cache: &FcrCache, d_out: ArrayView2<f64>, grad: &mut FcrStack, need_dx: bool) -> Option<Array2<f64>> {
        match (self, cache, grad) {
            (Self::Linear(l), FcrCache::Linear(x), Self::Linear(g)) => l.backward(x.view(), d_out, g, need_dx),
            (Self::Blocks(blocks), FcrCache::Blocks(caches), Self::Blocks(grads)) => {
                let mut db: Option<Array2<f64>> = None;
                for r in (0..blocks.len()).rev() {
                    let want = r > 0 || need_dx;
                    db = blocks[r].backward(&caches[r], db.as_ref().map(|d| d.view()), Some(d_out), &mut grads[r], want);
                }
                db
            }
            _ => panic!("FCR cache or gradient does not match the stack layout"),
        }
    }
}

impl Parameters for FcrStack {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        match self {
            Self::Linear(l) => l.visit(&join(prefix, "linear"), f),
            Self::Blocks(blocks) => {
                for (r, b) in blocks.iter().enumerate() {
                    b.visit(&join(prefix, &format!("block{r}")), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        match self {
            Self::Linear(l) => l.visit_mut(&join(prefix, "linear"), f),
            Self::Blocks(blocks) => {
                for (r, b) in blocks.iter_mut().enumerate() {
                    b.visit_mut(&join(prefix, &format!("block{r}")), f);
                }
            }
        }
    }
}

/// Row ranges of consecutive items in a stacked matrix.
pub fn segment_offsets(lengths: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut offsets = vec![0];
    for n in lengths {
        offsets.push(offsets.last().copied().unwrap_or(0) + n);
    }
    offsets
}

/// Mean over rows of each segment.
pub fn segment_mean(x: ArrayView2<f64>, offsets: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((offsets.len() - 1, x.ncols()));
    for (i, w) in offsets.windows(2).enumerate() {
        let rows = x.slice(ndarray::s![w[0]..w[1], ..]);
        out.row_mut(i).assign(&rows.sum_axis(Axis(0)));
        out.row_mut(i).mapv_inplace(|v| v / (w[1] - w[0]) as f64);
    }
    out
}

/// Repeats row `i` of `p` over the rows of segment `i`.
pub fn broadcast_segments(p: ArrayView2<f64>, offsets: &[usize]) -> Array2<f64> {
    let total = *offsets.last().expect("offsets start at 0");
    let mut out = Array2::zeros((total, p.ncols()));
    for (i, w) in offsets.windows(2).enumerate() {
        for r in w[0]..w[1] {
            out.row_mut(r).assign(&p.row(i));
        }
    }
    out
}

/// Column-wise max over each segment, with the winning row per column.
pub fn segment_max(x: ArrayView2<f64>, offsets: &[usize]) -> (Array2<f64>, Array2<usize>) {
    let segs = offsets.len() - 1;
    let mut out = Array2::zeros((segs, x.ncols()));
    let mut arg = Array2::zeros((segs, x.ncols()));
    for (i, w) in offsets.windows(2).enumerate() {
        for c in 0..x.ncols() {
            let mut best = w[0];
            for r in w[0] + 1..w[1] {
                if x[(r, c)] > x[(best, c)] {
                    best = r;
                }
            }
            out[(i, c)] = x[(best, c)];
            arg[(i, c)] = best;
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn zero_block_outputs_zero() {
        let block = ResidualBlock::zeros(4, 4, 2, Some(3));
        let x = array![[1.0, -2.0, 3.0, 0.5], [0.0, 1.0, 1.0, 1.0]];
        let (b, f, _) = block.forward(x, &mut None).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
        let f = f.unwrap();
        assert_eq!(f.shape(), &[2, 3]);
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_block_doubles_nonnegative_input() {
        let mut block = ResidualBlock::zeros(3, 3, 1, None);
        block.layers[0].weight = Array2::eye(3);
        block.residual.weight = Array2::eye(3);
        let x = array![[0.5, 2.0, 0.0]];
        let (b, _, _) = block.forward(x.clone(), &mut None).unwrap();
        assert_eq!(b, &x * 2.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let block = ResidualBlock::zeros(4, 4, 1, None);
        assert!(block.forward(Array2::zeros((1, 3)), &mut None).is_err());
    }

    #[test]
    fn zero_block_stack_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stack = FcrStack::init(4, 2, 0, 8, 2, &mut rng);
        let x = array![[0.1, 0.2, -0.3, 0.4]];
        let (y, _) = stack.forward(x.clone(), &mut None).unwrap();
        let FcrStack::Linear(l) = &stack else { unreachable!() };
        let expected = x.dot(&l.weight.t()) + l.bias.as_ref().unwrap();
        assert_eq!(y, expected);
    }

    #[test]
    fn later_zero_projections_do_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut three = FcrStack::init(5, 4, 3, 6, 2, &mut rng);
        if let FcrStack::Blocks(b) = &mut three {
            for block in b.iter_mut().skip(1) {
                block.projection.as_mut().unwrap().weight.fill(0.0);
            }
        }
        let one = match &three {
            FcrStack::Blocks(b) => FcrStack::Blocks(vec![b[0].clone()]),
            _ => unreachable!(),
        };
        let x = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64 - j as f64) * 0.3);
        assert_eq!(three.forward(x.clone(), &mut None).unwrap().0, one.forward(x, &mut None).unwrap().0);
    }

    #[test]
    fn segment_helpers() {
        let x = array![[1.0, 5.0], [3.0, 1.0], [2.0, 2.0]];
        let off = segment_offsets([2, 1]);
        assert_eq!(off, vec![0, 2, 3]);
        assert_eq!(segment_mean(x.view(), &off), array![[2.0, 3.0], [2.0, 2.0]]);
        let (m, arg) = segment_max(x.view(), &off);
        assert_eq!(m, array![[3.0, 5.0], [2.0, 2.0]]);
        assert_eq!(arg, array![[1, 0], [2, 2]]);
        assert_eq!(broadcast_segments(m.view(), &off).row(1), m.row(0));
    }

    fn scalar_loss(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (y * w).sum()
    }

    #[test]
    fn stack_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let stack = FcrStack::init(3, 2, 2, 5, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let w = Array2::from_shape_fn((4, 2), |(i, j)| ((i + 2 * j) as f64 * 0.71).cos());
        let (_, cache) = stack.forward(x.clone(), &mut None).unwrap();
        let FcrStack::Blocks(b) = &stack else { unreachable!() };
        let mut grad = FcrStack::Blocks(b.iter().map(|blk| ResidualBlock::zeros(blk.input_dim(), 5, 2, Some(2))).collect());
        let dx = stack.backward(&cache, w.view(), &mut grad, true).unwrap();
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[(i, j)] += h;
                m[(i, j)] -= h;
                let fd = (scalar_loss(&stack.forward(p, &mut None).unwrap().0, &w)
                    - scalar_loss(&stack.forward(m, &mut None).unwrap().0, &w))
                    / (2.0 * h);
                assert!((fd - dx[(i, j)]).abs() < 1e-6, "dx[{i},{j}] {fd} vs {}", dx[(i, j)]);
            }
        }
        let mut analytic = Vec::new();
        grad.visit("", &mut |_, _, d| analytic.extend_from_slice(d));
        let mut k = 0;
        let mut probe = stack.clone();
        let count = analytic.len();
        while k < count {
            let eval = |s: &FcrStack| scalar_loss(&s.forward(x.clone(), &mut None).unwrap().0, &w);
            let mut idx = 0;
            let mut bump = |s: &mut FcrStack, delta: f64| {
                idx = 0;
                s.visit_mut("", &mut |_, _, d| {
                    for v in d.iter_mut() {
                        if idx == k {
                            *v += delta;
                        }
                        idx += 1;
                    }
                });
            };
            bump(&mut probe, h);
            let fp = eval(&probe);
            bump(&mut probe, -2.0 * h);
            let fm = eval(&probe);
            bump(&mut probe, h);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-6, "param {k}: {fd} vs {}", analytic[k]);
            k += 1;
        }
    }

    #[test]
    fn dropout_is_seeded_and_scales() {
        let block = {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            ResidualBlock::init(4, 16, 2, Some(2), &mut rng)
        };
        let x = Array2::from_elem((8, 4), 0.5);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut d = Some(Dropout { rate: 0.5, rng: &mut rng });
            block.forward(x.clone(), &mut d).unwrap().0
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }
}
