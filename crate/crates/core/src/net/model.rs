use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, leaky_relu_backward, leaky_relu_inplace, relu_backward, relu_inplace,
    BatchNorm2d, BnCache, Conv2d, Linear, MaxPool2d, Param, SeCache, SqueezeExcite, Visit,
};
use super::tensor::Tensor;
use crate::descriptor::{FRAME_DIM, SLICE_LEN};
use crate::{Error, Result};

pub const STAGE_COUNT: usize = 5;

/// Slices embedded per forward call in inference mode.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    #[serde(default = "one")]
    pub blocks_per_stage: usize,
    pub se_reduction_ratio: usize,
    pub embedding_dim: usize,
    pub fc_hidden: usize,
    pub leaky_relu_slope: f32,
}

fn one() -> usize {
    1
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_channels: 64,
            stage_channels: vec![64, 128, 256, 512, 512],
            blocks_per_stage: 1,
            se_reduction_ratio: 16,
            embedding_dim: 128,
            fc_hidden: 256,
            leaky_relu_slope: 0.01,
        }
    }
}

impl ModelConfig {
    /// A narrow variant of the same topology that trains on a single CPU core
    /// in minutes. Used by the synthetic benchmark.
    pub fn compact() -> Self {
        Self {
            stem_channels: 4,
            stage_channels: vec![4, 8, 8, 16, 16],
            blocks_per_stage: 1,
            se_reduction_ratio: 4,
            embedding_dim: 16,
            fc_hidden: 32,
            leaky_relu_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.stage_channels.len() != STAGE_COUNT {
            return bad("stage_channels must list exactly five stages");
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return bad("channel widths must be positive");
        }
        if self.blocks_per_stage == 0 || self.se_reduction_ratio == 0 {
            return bad("blocks_per_stage and se_reduction_ratio must be positive");
        }
        if self.embedding_dim == 0 || self.fc_hidden == 0 {
            return bad("embedding_dim and fc_hidden must be positive");
        }
        if !self.leaky_relu_slope.is_finite() {
            return bad("leaky_relu_slope must be finite");
        }
        Ok(())
    }
}

/// Spatial size after each part of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeTrace {
    pub input: (usize, usize),
    pub stem: (usize, usize),
    pub pool: (usize, usize),
    pub stages: Vec<(usize, usize)>,
    pub pooled: (usize, usize),
}

struct Shortcut {
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// Two 3×3 conv + BN layers, SE gating after the second, then the
/// (identity or 1×1 projection) shortcut and a final ReLU.
struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    se: SqueezeExcite,
    shortcut: Option<Shortcut>,
}

struct BlockCache {
    x: Tensor,
    bn1: BnCache,
    r1: Tensor,
    bn2: BnCache,
    b2: Tensor,
    se: SeCache,
    sc_bn: Option<BnCache>,
    out: Tensor,
}

impl ResidualBlock {
    fn new(cin: usize, cout: usize, stride: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| Shortcut {
            conv: Conv2d::new(cin, cout, 1, stride, 0, rng),
            bn: BatchNorm2d::new(cout),
        });
        Self {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(cout),
            se: SqueezeExcite::new(cout, reduction, rng),
            shortcut,
        }
    }

    fn forward(&self, x: &Tensor, gates: &mut dyn FnMut(&[f32])) -> Tensor {
        let mut h = self.bn1.forward(&self.conv1.forward(x));
        relu_inplace(&mut h.data);
        let (h, se) = self.se.forward_train(&self.bn2.forward(&self.conv2.forward(&h)));
        gates(se.gates());
        let mut out = match &self.shortcut {
            Some(sc) => sc.bn.forward(&sc.conv.forward(x)),
            None => x.clone(),
        };
        out.data.iter_mut().zip(&h.data).for_each(|(o, v)| *o += v);
        relu_inplace(&mut out.data);
        out
    }

    fn forward_train(&mut self, x: Tensor) -> (Tensor, BlockCache) {
        let (mut r1, bn1) = self.bn1.forward_train(&self.conv1.forward(&x));
        relu_inplace(&mut r1.data);
        let (b2, bn2) = self.bn2.forward_train(&self.conv2.forward(&r1));
        let (h, se) = self.se.forward_train(&b2);
        let (mut out, sc_bn) = match &mut self.shortcut {
            Some(sc) => {
                let (y, c) = sc.bn.forward_train(&sc.conv.forward(&x));
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        out.data.iter_mut().zip(&h.data).for_each(|(o, v)| *o += v);
        relu_inplace(&mut out.data);
        let cache = BlockCache {
            x,
            bn1,
            r1,
            bn2,
            b2,
            se,
            sc_bn,
            out: out.clone(),
        };
        (out, cache)
    }

    fn backward(&mut self, cache: BlockCache, mut dy: Tensor) -> Tensor {
        relu_backward(&mut dy.data, &cache.out.data);
        let d_se_in = self.se.backward(&cache.b2, &cache.se, &dy);
        let d_conv2 = self.bn2.backward(&cache.bn2, &d_se_in);
        let mut d_r1 = self.conv2.backward(&cache.r1, &d_conv2, true).expect("dx requested");
        relu_backward(&mut d_r1.data, &cache.r1.data);
        let d_conv1 = self.bn1.backward(&cache.bn1, &d_r1);
        let mut dx = self.conv1.backward(&cache.x, &d_conv1, true).expect("dx requested");
        match (&mut self.shortcut, cache.sc_bn) {
            (Some(sc), Some(bn_cache)) => {
                let d_sc = sc.bn.backward(&bn_cache, &dy);
                let d_sc_x = sc.conv.backward(&cache.x, &d_sc, true).expect("dx requested");
                dx.data.iter_mut().zip(&d_sc_x.data).for_each(|(a, b)| *a += b);
            }
            _ => dx.data.iter_mut().zip(&dy.data).for_each(|(a, b)| *a += b),
        }
        dx
    }
}

impl Visit for ResidualBlock {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
        self.se.visit_params(&format!("{prefix}.se"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.conv.visit_params(&format!("{prefix}.shortcut.conv"), f);
            sc.bn.visit_params(&format!("{prefix}.shortcut.bn"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>)) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.bn.visit_buffers(&format!("{prefix}.shortcut.bn"), f);
        }
    }
}

/// Everything the backward pass needs from one training forward.
pub struct ForwardCache {
    input: Tensor,
    stem_bn: BnCache,
    stem_out: Tensor,
    pool_arg: Vec<u32>,
    blocks: Vec<BlockCache>,
    last_shape: [usize; 4],
    pooled: Vec<f32>,
    fc1_pre: Vec<f32>,
    fc1_out: Vec<f32>,
    fc2_pre: Vec<f32>,
}

/// SE-residual embedding network over single-channel (time × feature) inputs.
pub struct DbagNet {
    config: ModelConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    pool: MaxPool2d,
    blocks: Vec<ResidualBlock>,
    fc1: Linear,
    fc2: Linear,
}

impl DbagNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = Conv2d::new(1, config.stem_channels, 7, 2, 3, &mut rng);
        let stem_bn = BatchNorm2d::new(config.stem_channels);
        let mut blocks = Vec::new();
        let mut cin = config.stem_channels;
        for (stage, &cout) in config.stage_channels.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(cin, cout, stride, config.se_reduction_ratio, &mut rng));
                cin = cout;
            }
        }
        let fc1 = Linear::new(cin, config.fc_hidden, &mut rng);
        let fc2 = Linear::new(config.fc_hidden, config.embedding_dim, &mut rng);
        Ok(Self {
            config,
            stem_conv,
            stem_bn,
            pool: MaxPool2d { k: 3, stride: 2 },
            blocks,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != 1 {
            return Err(Error::ShapeError(format!("expected 1 input channel, got {}", x.c)));
        }
        if x.h < 2 || x.w < 2 {
            return Err(Error::ShapeError(format!("input {}×{} too small", x.h, x.w)));
        }
        Ok(())
    }

    /// Inference-mode forward with the spatial size recorded after each stage.
    pub fn forward_traced(&self, x: &Tensor) -> Result<(Vec<f32>, ShapeTrace)> {
        self.forward_inner(x, &mut |_| {})
    }

    /// SE gates of every block from an inference-mode forward, each `[n, c]`.
    pub fn se_gates(&self, x: &Tensor) -> Result<Vec<Vec<f32>>> {
        let mut all = Vec::new();
        self.forward_inner(x, &mut |g| all.push(g.to_vec()))?;
        Ok(all)
    }

    fn forward_inner(&self, x: &Tensor, gates: &mut dyn FnMut(&[f32])) -> Result<(Vec<f32>, ShapeTrace)> {
        self.check_input(x)?;
        let mut h = self.stem_bn.forward(&self.stem_conv.forward(x));
        relu_inplace(&mut h.data);
        let stem = (h.h, h.w);
        let mut h = self.pool.forward(&h);
        let pool = (h.h, h.w);
        let mut stages = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(&h, gates);
            if (i + 1) % self.config.blocks_per_stage == 0 {
                stages.push((h.h, h.w));
            }
        }
        let (n, c) = (h.n, h.c);
        let pooled = global_avg_pool(&h);
        let mut z = self.fc1.forward(&pooled, n);
        leaky_relu_inplace(&mut z, self.config.leaky_relu_slope);
        let mut e = self.fc2.forward(&z, n);
        leaky_relu_inplace(&mut e, self.config.leaky_relu_slope);
        debug_assert_eq!(pooled.len(), n * c);
        let trace = ShapeTrace {
            input: (x.h, x.w),
            stem,
            pool,
            stages,
            pooled: (1, 1),
        };
        Ok((e, trace))
    }

    /// Inference-mode embeddings, `[n, embedding_dim]` row-major.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<f32>> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Training-mode forward: batch statistics, running estimates updated.
    pub fn forward_train(&mut self, x: Tensor) -> Result<(Vec<f32>, ForwardCache)> {
        self.check_input(&x)?;
        let (mut stem_out, stem_bn) = self.stem_bn.forward_train(&self.stem_conv.forward(&x));
        relu_inplace(&mut stem_out.data);
        let (mut h, pool_arg) = self.pool.forward_train(&stem_out);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (out, cache) = block.forward_train(h);
            blocks.push(cache);
            h = out;
        }
        let last_shape = h.shape();
        let n = h.n;
        let pooled = global_avg_pool(&h);
        let fc1_pre = self.fc1.forward(&pooled, n);
        let mut fc1_out = fc1_pre.clone();
        leaky_relu_inplace(&mut fc1_out, self.config.leaky_relu_slope);
        let fc2_pre = self.fc2.forward(&fc1_out, n);
        let mut e = fc2_pre.clone();
        leaky_relu_inplace(&mut e, self.config.leaky_relu_slope);
        let cache = ForwardCache {
            input: x,
            stem_bn,
            stem_out,
            pool_arg,
            blocks,
            last_shape,
            pooled,
            fc1_pre,
            fc1_out,
            fc2_pre,
        };
        Ok((e, cache))
    }

    /// Accumulate parameter gradients for `d_embeddings` (`[n, embedding_dim]`).
    pub fn backward(&mut self, cache: ForwardCache, d_embeddings: &[f32]) {
        let slope = self.config.leaky_relu_slope;
        let [n, c, h, w] = cache.last_shape;
        let mut d = d_embeddings.to_vec();
        leaky_relu_backward(&mut d, &cache.fc2_pre, slope);
        let mut d = self.fc2.backward(&cache.fc1_out, &d, n);
        leaky_relu_backward(&mut d, &cache.fc1_pre, slope);
        let d = self.fc1.backward(&cache.pooled, &d, n);
        let mut dt = global_avg_pool_backward(&d, n, c, h, w);
        for (block, bc) in self.blocks.iter_mut().zip(cache.blocks).rev() {
            dt = block.backward(bc, dt);
        }
        let mut dt = self
            .pool
            .backward(&cache.pool_arg, &dt, cache.stem_out.h, cache.stem_out.w);
        relu_backward(&mut dt.data, &cache.stem_out.data);
        let dt = self.stem_bn.backward(&cache.stem_bn, &dt);
        self.stem_conv.backward(&cache.input, &dt, false);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    /// Embed 120×600 slices in inference mode; one row per slice.
    pub fn embed(&self, slices: &[ArrayView2<f32>]) -> Result<Array2<f32>> {
        let dim = self.config.embedding_dim;
        let mut out = Vec::with_capacity(slices.len() * dim);
        for chunk in slices.chunks(EVAL_CHUNK) {
            let x = slices_to_tensor(chunk)?;
            out.extend(self.forward(&x)?);
        }
        Ok(Array2::from_shape_vec((slices.len(), dim), out).expect("one embedding per slice"))
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

impl Visit for DbagNet {
    fn visit_params(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.stem_conv.visit_params("stem.conv", f);
        self.stem_bn.visit_params("stem.bn", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&format!("blocks.{i}"), f);
        }
        self.fc1.visit_params("fc1", f);
        self.fc2.visit_params("fc2", f);
    }

    fn visit_buffers(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Vec<f32>)) {
        self.stem_bn.visit_buffers("stem.bn", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_buffers(&format!("blocks.{i}"), f);
        }
    }
}

/// Stack slices into a `[n, 1, 120, 600]` batch, rejecting any other shape.
pub fn slices_to_tensor(slices: &[ArrayView2<f32>]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(slices.len() * SLICE_LEN * FRAME_DIM);
    for s in slices {
        if s.dim() != (SLICE_LEN, FRAME_DIM) {
            return Err(Error::ShapeError(format!(
                "slice is {}×{}, expected {SLICE_LEN}×{FRAME_DIM}",
                s.nrows(),
                s.ncols()
            )));
        }
        data.extend(s.iter().copied());
    }
    Tensor::from_vec(slices.len(), 1, SLICE_LEN, FRAME_DIM, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            stem_channels: 2,
            stage_channels: vec![2, 3, 3, 4, 4],
            blocks_per_stage: 1,
            se_reduction_ratio: 2,
            embedding_dim: 3,
            fc_hidden: 5,
            leaky_relu_slope: 0.1,
        }
    }

    fn input(n: usize, h: usize, w: usize, seed: u32) -> Tensor {
        let data = (0..n * h * w)
            .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 8) as f32 / 16777216.0) - 0.5)
            .collect();
        Tensor::from_vec(n, 1, h, w, data).unwrap()
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::default();
        c.stage_channels.pop();
        assert!(DbagNet::new(c, 0).is_err());
        let c = ModelConfig {
            se_reduction_ratio: 0,
            ..ModelConfig::default()
        };
        assert!(DbagNet::new(c, 0).is_err());
    }

    #[test]
    fn rejects_wrong_slice_shape() {
        let net = DbagNet::new(tiny(), 0).unwrap();
        let bad = Array2::<f32>::zeros((119, 600));
        assert!(matches!(net.embed(&[bad.view()]), Err(Error::ShapeError(_))));
        let multi = Tensor::zeros(1, 2, 20, 20);
        assert!(net.forward(&multi).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let mut a = DbagNet::new(tiny(), 42).unwrap();
        let mut b = DbagNet::new(tiny(), 42).unwrap();
        let mut wa = Vec::new();
        a.visit_params("", &mut |_, p| wa.extend(p.value.clone()));
        let mut wb = Vec::new();
        b.visit_params("", &mut |_, p| wb.extend(p.value.clone()));
        assert_eq!(wa, wb);
    }

    /// Whole-network gradient against central differences on a small input,
    /// objective sum(embeddings * r).
    #[test]
    fn network_gradient_matches_finite_differences() {
        let mut net = DbagNet::new(tiny(), 3).unwrap();
        let x = input(4, 64, 96, 17);
        let r: Vec<f32> = (0..4 * 3).map(|i| ((i * 7 % 5) as f32 - 2.0) * 0.5).collect();
        let objective = |net: &mut DbagNet| -> f64 {
            let (e, _) = net.forward_train(x.clone()).unwrap();
            e.iter().zip(&r).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        net.zero_grad();
        let (_, cache) = net.forward_train(x.clone()).unwrap();
        net.backward(cache, &r);
        let mut analytic = Vec::new();
        net.visit_params("", &mut |name, p| analytic.push((name, p.grad.clone())));

        let eps = 5e-4f32;
        let mut checked = 0;
        let mut bad = Vec::new();
        for (pi, (name, grads)) in analytic.iter().enumerate() {
            for &j in [0usize, grads.len() / 2, grads.len() - 1].iter() {
                let bump = |delta: f32, net: &mut DbagNet| {
                    let mut k = 0;
                    net.visit_params("", &mut |_, p| {
                        if k == pi {
                            p.value[j] += delta;
                        }
                        k += 1;
                    });
                };
                let mid = objective(&mut net);
                bump(eps, &mut net);
                let up = objective(&mut net);
                bump(-2.0 * eps, &mut net);
                let down = objective(&mut net);
                bump(eps, &mut net);
                let h = eps as f64;
                let fd = (up - down) / (2.0 * h);
                let (right, left) = ((up - mid) / h, (mid - down) / h);
                let an = grads[j] as f64;
                checked += 1;
                let tol = 5e-2 * fd.abs().max(an.abs()).max(1e-2);
                // at a ReLU or max-pool kink the true derivative lies between
                // the one-sided differences
                let bracketed = an >= left.min(right) - tol && an <= left.max(right) + tol;
                if (fd - an).abs() > tol && !bracketed {
                    bad.push(format!("{name}[{j}]: fd {fd:.5} analytic {an:.5}"));
                }
            }
        }
        assert!(checked > 50);
        assert!(bad.len() <= 1, "{} mismatches:\n{}", bad.len(), bad.join("\n"));
    }
}
