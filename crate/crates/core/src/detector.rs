//! Multi-relation detector: re-scores query proposals against support
//! features with three relation heads and fuses their logits by summation.
//!
//! * global head — concatenate, average pool, three-layer MLP; matches
//!   whole-region embeddings.
//! * local head — weight-shared 1x1 convolution then full-extent depth-wise
//!   correlation; matches position-wise.
//! * patch head — a small convolutional stack over the concatenated feature
//!   that also regresses box refinement deltas.
//!
//! Heads output raw logits; the sigmoid is applied once after summation so
//! the binary cross-entropy stays well-posed. Disabled heads contribute
//! exactly zero to the sum.

use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::nn::{avg_pool, avg_pool_backward, relu, relu_backward, relu_vec, relu_vec_backward, Conv2d, Linear};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum DetectorError {
    ShapeMismatch,
    EmptyPairSet,
}

impl core::fmt::Display for DetectorError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            DetectorError::ShapeMismatch => write!(f, "query and support features must both be 7x7xC"),
            DetectorError::EmptyPairSet => write!(f, "matching loss requires at least one pair"),
        }
    }
}

impl core::error::Error for DetectorError {}

/// Per-head on/off switches (the ablation axes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadToggles {
    pub global: bool,
    pub local: bool,
    pub patch: bool,
}

impl Default for HeadToggles {
    fn default() -> Self {
        Self { global: true, local: true, patch: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DetectorConfig {
    pub channels: usize,
    pub patch_mid_channels: usize,
    pub patch_out_channels: usize,
    pub toggles: HeadToggles,
}

impl DetectorConfig {
    /// Full-scale widths from the reference architecture.
    pub fn full_scale(channels: usize) -> Self {
        Self { channels, patch_mid_channels: 512, patch_out_channels: 2048, toggles: HeadToggles::default() }
    }

    /// Narrow widths for fast desk-scale runs and gradient checks.
    pub fn toy(channels: usize) -> Self {
        Self { channels, patch_mid_channels: 8, patch_out_channels: 32, toggles: HeadToggles::default() }
    }
}

/// The three logits, their sum, and the patch head's box refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationScores {
    pub global_logit: f64,
    pub local_logit: f64,
    pub patch_logit: f64,
    pub fused_logit: f64,
    pub patch_box_deltas: [f64; 4],
}

impl RelationScores {
    pub fn probability(&self) -> f64 {
        math::sigmoid(self.fused_logit)
    }
}

/// Arithmetic sum of the head logits; the final match probability is
/// `sigmoid` of the result.
pub fn fuse_relation_scores(global: f64, local: f64, patch: f64) -> f64 {
    global + local + patch
}

// ---------------------------------------------------------------------------
// Global-relation head

#[derive(Debug, Clone)]
pub struct GlobalHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

#[derive(Debug)]
pub struct GlobalCache {
    pooled: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
}

impl GlobalHead {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let mut fc3 = Linear::new(channels, 1, rng);
        fc3.w.value.scale(0.1);
        Self { fc1: Linear::new(2 * channels, channels, rng), fc2: Linear::new(channels, channels, rng), fc3 }
    }

    /// Concatenate channel-wise, average pool to 1x1x2C, MLP to a scalar.
    pub fn forward(&self, f_q: &Tensor, f_s: &Tensor) -> (f64, GlobalCache) {
        let c = f_q.dim(2);
        let spatial = f_q.dim(0) * f_q.dim(1);
        let mut pooled = alloc::vec![0.0; 2 * c];
        let norm = 1.0 / spatial as f64;
        for i in 0..spatial {
            for ch in 0..c {
                pooled[ch] += f_q.data()[i * c + ch] * norm;
                pooled[c + ch] += f_s.data()[i * c + ch] * norm;
            }
        }
        let z1 = self.fc1.forward(&pooled);
        let a1 = relu_vec(&z1);
        let z2 = self.fc2.forward(&a1);
        let a2 = relu_vec(&z2);
        let logit = self.fc3.forward(&a2)[0];
        (logit, GlobalCache { pooled, z1, a1, z2, a2 })
    }

    /// Returns (d_fq, d_fs).
    pub fn backward(&mut self, f_q: &Tensor, f_s: &Tensor, cache: &GlobalCache, d_logit: f64) -> (Tensor, Tensor) {
        let c = f_q.dim(2);
        let spatial = f_q.dim(0) * f_q.dim(1);
        let da2 = self.fc3.backward(&cache.a2, &[d_logit]);
        let dz2 = relu_vec_backward(&cache.z2, &da2);
        let da1 = self.fc2.backward(&cache.a1, &dz2);
        let dz1 = relu_vec_backward(&cache.z1, &da1);
        let dpooled = self.fc1.backward(&cache.pooled, &dz1);
        let norm = 1.0 / spatial as f64;
        let mut d_fq = Tensor::zeros_like(f_q);
        let mut d_fs = Tensor::zeros_like(f_s);
        for i in 0..spatial {
            for ch in 0..c {
                d_fq.data_mut()[i * c + ch] = dpooled[ch] * norm;
                d_fs.data_mut()[i * c + ch] = dpooled[c + ch] * norm;
            }
        }
        (d_fq, d_fs)
    }

    pub fn zero_grad(&mut self) {
        for fc in [&mut self.fc1, &mut self.fc2, &mut self.fc3] {
            fc.w.zero_grad();
            fc.b.zero_grad();
        }
    }

    /// The two fc pre-activations, exposed for kink-aware gradient checks.
    pub fn preactivations(&self, f_q: &Tensor, f_s: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (_, cache) = self.forward(f_q, f_s);
        (cache.z1, cache.z2)
    }
}

// ---------------------------------------------------------------------------
// Local-relation head

#[derive(Debug, Clone)]
pub struct LocalHead {
    pub conv: Conv2d,
    pub fc: Linear,
}

#[derive(Debug)]
pub struct LocalCache {
    q_conv: Tensor,
    s_conv: Tensor,
    corr: Vec<f64>,
}

impl LocalHead {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let mut fc = Linear::new(channels, 1, rng);
        // The full-extent correlation sums 49 products per channel; keep the
        // initial logit magnitude comparable to the other heads.
        fc.w.value.scale(0.02);
        Self { conv: Conv2d::new(1, 1, channels, channels, 1, 0, rng), fc }
    }

    /// The same 1x1 convolution processes both features, then the
    /// full-extent (S = H = W) depth-wise correlation collapses space to a
    /// 1x1xC vector which a single fc layer turns into the logit.
    pub fn forward(&self, f_q: &Tensor, f_s: &Tensor) -> (f64, LocalCache) {
        let q_conv = self.conv.forward(f_q);
        let s_conv = self.conv.forward(f_s);
        let c = q_conv.dim(2);
        let spatial = q_conv.dim(0) * q_conv.dim(1);
        let mut corr = alloc::vec![0.0; c];
        for i in 0..spatial {
            for ch in 0..c {
                corr[ch] += s_conv.data()[i * c + ch] * q_conv.data()[i * c + ch];
            }
        }
        let logit = self.fc.forward(&corr)[0];
        (logit, LocalCache { q_conv, s_conv, corr })
    }

    pub fn backward(&mut self, f_q: &Tensor, f_s: &Tensor, cache: &LocalCache, d_logit: f64) -> (Tensor, Tensor) {
        let c = cache.q_conv.dim(2);
        let spatial = cache.q_conv.dim(0) * cache.q_conv.dim(1);
        let d_corr = self.fc.backward(&cache.corr, &[d_logit]);
        let mut d_q_conv = Tensor::zeros_like(&cache.q_conv);
        let mut d_s_conv = Tensor::zeros_like(&cache.s_conv);
        for i in 0..spatial {
            for ch in 0..c {
                d_q_conv.data_mut()[i * c + ch] = d_corr[ch] * cache.s_conv.data()[i * c + ch];
                d_s_conv.data_mut()[i * c + ch] = d_corr[ch] * cache.q_conv.data()[i * c + ch];
            }
        }
        // Weight-shared convolution: both branch gradients accumulate.
        let d_fq = self.conv.backward(f_q, &d_q_conv);
        let d_fs = self.conv.backward(f_s, &d_s_conv);
        (d_fq, d_fs)
    }

    pub fn zero_grad(&mut self) {
        self.conv.w.zero_grad();
        self.conv.b.zero_grad();
        self.fc.w.zero_grad();
        self.fc.b.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Patch-relation head

#[derive(Debug, Clone)]
pub struct PatchHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub fc_cls: Linear,
    pub fc_box: Linear,
}

/// Intermediates of the patch stack; shapes expose the 7-5-5-3-3-1 trace.
#[derive(Debug)]
pub struct PatchCache {
    pub concat: Tensor,
    pub pooled1: Tensor,
    pub z1: Tensor,
    pub a1: Tensor,
    pub z2: Tensor,
    pub a2: Tensor,
    pub z3: Tensor,
    pub a3: Tensor,
    pub pooled2: Tensor,
    pub flat: Vec<f64>,
}

impl PatchHead {
    pub fn new<R: Rng>(channels: usize, mid: usize, out: usize, rng: &mut R) -> Self {
        let mut fc_cls = Linear::new(out, 1, rng);
        let mut fc_box = Linear::new(out, 4, rng);
        fc_cls.w.value.scale(0.1);
        fc_box.w.value.scale(0.1);
        Self {
            conv1: Conv2d::new(1, 1, 2 * channels, mid, 1, 0, rng),
            conv2: Conv2d::new(3, 3, mid, mid, 1, 0, rng),
            conv3: Conv2d::new(1, 1, mid, out, 1, 0, rng),
            fc_cls,
            fc_box,
        }
    }

    /// Concatenate, then: avg-pool 3x3 (7 -> 5), 1x1 conv + ReLU, 3x3 conv +
    /// ReLU (5 -> 3), 1x1 conv + ReLU, avg-pool 3x3 (3 -> 1); one fc for the
    /// matching logit and a separate fc for the box deltas.
    pub fn forward(&self, f_q: &Tensor, f_s: &Tensor) -> (f64, [f64; 4], PatchCache) {
        let concat = concat_channels(f_q, f_s);
        let pooled1 = avg_pool(&concat, 3, 1);
        let z1 = self.conv1.forward(&pooled1);
        let a1 = relu(&z1);
        let z2 = self.conv2.forward(&a1);
        let a2 = relu(&z2);
        let z3 = self.conv3.forward(&a2);
        let a3 = relu(&z3);
        let pooled2 = avg_pool(&a3, 3, 1);
        let flat = pooled2.data().to_vec();
        let logit = self.fc_cls.forward(&flat)[0];
        let deltas = self.fc_box.forward(&flat);
        (
            logit,
            [deltas[0], deltas[1], deltas[2], deltas[3]],
            PatchCache { concat, pooled1, z1, a1, z2, a2, z3, a3, pooled2, flat },
        )
    }

    pub fn backward(
        &mut self,
        cache: &PatchCache,
        d_logit: f64,
        d_deltas: &[f64; 4],
    ) -> (Tensor, Tensor) {
        let mut d_flat = self.fc_cls.backward(&cache.flat, &[d_logit]);
        let d_flat_box = self.fc_box.backward(&cache.flat, d_deltas);
        for (a, b) in d_flat.iter_mut().zip(&d_flat_box) {
            *a += b;
        }
        let d_pooled2 = Tensor::new(cache.pooled2.shape(), d_flat);
        let d_a3 = avg_pool_backward(cache.a3.shape(), 3, 1, &d_pooled2);
        let d_z3 = relu_backward(&cache.z3, &d_a3);
        let d_a2 = self.conv3.backward(&cache.a2, &d_z3);
        let d_z2 = relu_backward(&cache.z2, &d_a2);
        let d_a1 = self.conv2.backward(&cache.a1, &d_z2);
        let d_z1 = relu_backward(&cache.z1, &d_a1);
        let d_pooled1 = self.conv1.backward(&cache.pooled1, &d_z1);
        let d_concat = avg_pool_backward(cache.concat.shape(), 3, 1, &d_pooled1);
        split_channels(&d_concat)
    }

    pub fn zero_grad(&mut self) {
        for conv in [&mut self.conv1, &mut self.conv2, &mut self.conv3] {
            conv.w.zero_grad();
            conv.b.zero_grad();
        }
        for fc in [&mut self.fc_cls, &mut self.fc_box] {
            fc.w.zero_grad();
            fc.b.zero_grad();
        }
    }
}

/// `(h, w, c) + (h, w, c) -> (h, w, 2c)`, query channels first.
pub fn concat_channels(f_q: &Tensor, f_s: &Tensor) -> Tensor {
    assert_eq!(f_q.shape(), f_s.shape());
    let (h, w, c) = (f_q.dim(0), f_q.dim(1), f_q.dim(2));
    let mut out = Tensor::zeros(&[h, w, 2 * c]);
    for i in 0..h * w {
        out.data_mut()[i * 2 * c..i * 2 * c + c].copy_from_slice(&f_q.data()[i * c..(i + 1) * c]);
        out.data_mut()[i * 2 * c + c..(i + 1) * 2 * c].copy_from_slice(&f_s.data()[i * c..(i + 1) * c]);
    }
    out
}

fn split_channels(combined: &Tensor) -> (Tensor, Tensor) {
    let (h, w, c2) = (combined.dim(0), combined.dim(1), combined.dim(2));
    let c = c2 / 2;
    let mut a = Tensor::zeros(&[h, w, c]);
    let mut b = Tensor::zeros(&[h, w, c]);
    for i in 0..h * w {
        a.data_mut()[i * c..(i + 1) * c].copy_from_slice(&combined.data()[i * c2..i * c2 + c]);
        b.data_mut()[i * c..(i + 1) * c].copy_from_slice(&combined.data()[i * c2 + c..(i + 1) * c2]);
    }
    (a, b)
}

// ---------------------------------------------------------------------------
// Assembled detector

#[derive(Debug, Clone)]
pub struct MultiRelationDetector {
    pub global: GlobalHead,
    pub local: LocalHead,
    pub patch: PatchHead,
    pub toggles: HeadToggles,
}

#[derive(Debug)]
pub struct DetectorCache {
    global: Option<GlobalCache>,
    local: Option<LocalCache>,
    patch: Option<PatchCache>,
}

impl MultiRelationDetector {
    pub fn new<R: Rng>(config: &DetectorConfig, rng: &mut R) -> Self {
        Self {
            global: GlobalHead::new(config.channels, rng),
            local: LocalHead::new(config.channels, rng),
            patch: PatchHead::new(config.channels, config.patch_mid_channels, config.patch_out_channels, rng),
            toggles: config.toggles,
        }
    }

    fn check_shapes(&self, f_q: &Tensor, f_s: &Tensor) -> Result<(), DetectorError> {
        if f_q.shape() != f_s.shape() || f_q.shape().len() != 3 || f_q.dim(0) != f_q.dim(1) {
            return Err(DetectorError::ShapeMismatch);
        }
        Ok(())
    }

    pub fn forward(&self, f_q: &Tensor, f_s: &Tensor) -> Result<RelationScores, DetectorError> {
        let (scores, _) = self.forward_cached(f_q, f_s)?;
        Ok(scores)
    }

    pub fn forward_cached(&self, f_q: &Tensor, f_s: &Tensor) -> Result<(RelationScores, DetectorCache), DetectorError> {
        self.check_shapes(f_q, f_s)?;
        let (global_logit, gcache) = if self.toggles.global {
            let (l, c) = self.global.forward(f_q, f_s);
            (l, Some(c))
        } else {
            (0.0, None)
        };
        let (local_logit, lcache) = if self.toggles.local {
            let (l, c) = self.local.forward(f_q, f_s);
            (l, Some(c))
        } else {
            (0.0, None)
        };
        let (patch_logit, patch_box_deltas, pcache) = if self.toggles.patch {
            let (l, d, c) = self.patch.forward(f_q, f_s);
            (l, d, Some(c))
        } else {
            (0.0, [0.0; 4], None)
        };
        let fused_logit = fuse_relation_scores(global_logit, local_logit, patch_logit);
        Ok((
            RelationScores { global_logit, local_logit, patch_logit, fused_logit, patch_box_deltas },
            DetectorCache { global: gcache, local: lcache, patch: pcache },
        ))
    }

    /// Backward of the fused logit plus the patch box deltas; returns
    /// gradients w.r.t. the two region features.
    pub fn backward(
        &mut self,
        f_q: &Tensor,
        f_s: &Tensor,
        cache: &DetectorCache,
        d_fused: f64,
        d_deltas: &[f64; 4],
    ) -> (Tensor, Tensor) {
        let mut d_fq = Tensor::zeros_like(f_q);
        let mut d_fs = Tensor::zeros_like(f_s);
        if let Some(gc) = &cache.global {
            let (dq, ds) = self.global.backward(f_q, f_s, gc, d_fused);
            d_fq.add_scaled(&dq, 1.0);
            d_fs.add_scaled(&ds, 1.0);
        }
        if let Some(lc) = &cache.local {
            let (dq, ds) = self.local.backward(f_q, f_s, lc, d_fused);
            d_fq.add_scaled(&dq, 1.0);
            d_fs.add_scaled(&ds, 1.0);
        }
        if let Some(pc) = &cache.patch {
            let (dq, ds) = self.patch.backward(pc, d_fused, d_deltas);
            d_fq.add_scaled(&dq, 1.0);
            d_fs.add_scaled(&ds, 1.0);
        }
        (d_fq, d_fs)
    }

    pub fn zero_grad(&mut self) {
        self.global.zero_grad();
        self.local.zero_grad();
        self.patch.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Losses

/// Mean sigmoid binary cross-entropy over pairs; `labels[i]` is true for a
/// matching pair.
pub fn matching_loss(fused_logits: &[f64], labels: &[bool]) -> Result<f64, DetectorError> {
    if fused_logits.is_empty() || fused_logits.len() != labels.len() {
        return Err(DetectorError::EmptyPairSet);
    }
    let sum: f64 = fused_logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| math::bce_with_logit(z, if y { 1.0 } else { 0.0 }))
        .sum();
    Ok(sum / fused_logits.len() as f64)
}

/// d/dz of [`matching_loss`] per pair.
pub fn matching_loss_grads(fused_logits: &[f64], labels: &[bool]) -> Vec<f64> {
    let n = fused_logits.len() as f64;
    fused_logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| math::bce_with_logit_grad(z, if y { 1.0 } else { 0.0 }) / n)
        .collect()
}

/// Box refinement loss and its per-pair gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxLoss {
    pub value: f64,
    /// Set when no foreground pair supervised the loss.
    pub empty: bool,
}

/// Smooth-L1 summed over the four coordinates, averaged over foreground
/// pairs; background and negative-support pairs contribute nothing.
pub fn detector_box_loss(
    deltas: &[[f64; 4]],
    targets: &[[f64; 4]],
    foreground: &[bool],
) -> (BoxLoss, Vec<[f64; 4]>) {
    assert_eq!(deltas.len(), targets.len());
    assert_eq!(deltas.len(), foreground.len());
    let n_fg = foreground.iter().filter(|&&f| f).count();
    let mut grads = alloc::vec![[0.0; 4]; deltas.len()];
    if n_fg == 0 {
        return (BoxLoss { value: 0.0, empty: true }, grads);
    }
    let mut sum = 0.0;
    for i in 0..deltas.len() {
        if !foreground[i] {
            continue;
        }
        for k in 0..4 {
            let diff = deltas[i][k] - targets[i][k];
            sum += math::smooth_l1(diff);
            grads[i][k] = math::smooth_l1_grad(diff) / n_fg as f64;
        }
    }
    (BoxLoss { value: sum / n_fg as f64, empty: false }, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_region(c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(&[7, 7, c], (0..49 * c).map(|_| rng.random::<f64>() - 0.5).collect())
    }

    #[test]
    fn fuse_is_addition() {
        assert_eq!(fuse_relation_scores(0.0, 0.0, 0.0), 0.0);
        assert_eq!(fuse_relation_scores(1.0, -1.0, 0.0), 0.0);
        assert!((fuse_relation_scores(0.3, 0.5, -0.1) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn global_zero_inputs_zero_bias_gives_zero_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let head = GlobalHead::new(3, &mut rng);
        let z = Tensor::zeros(&[7, 7, 3]);
        let (logit, _) = head.forward(&z, &z);
        assert_eq!(logit, 0.0);
    }

    #[test]
    fn global_pools_constants_in_query_then_support_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let head = GlobalHead::new(2, &mut rng);
        let f_q = Tensor::full(&[7, 7, 2], 3.0);
        let f_s = Tensor::full(&[7, 7, 2], -2.0);
        let (_, cache) = head.forward(&f_q, &f_s);
        assert!(cache.pooled[..2].iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(cache.pooled[2..].iter().all(|&v| (v + 2.0).abs() < 1e-12));
    }

    #[test]
    fn global_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut head = GlobalHead::new(2, &mut rng);
        head.fc1.w.value = Tensor::new(&[4, 2], vec![1.0, 0.5, -1.0, 0.25, 0.5, -0.5, 2.0, 1.0]);
        head.fc1.b.value = Tensor::new(&[2], vec![0.1, -0.1]);
        head.fc2.w.value = Tensor::new(&[2, 2], vec![1.0, -1.0, 0.5, 0.5]);
        head.fc2.b.value = Tensor::new(&[2], vec![0.0, 0.2]);
        head.fc3.w.value = Tensor::new(&[2, 1], vec![2.0, -1.0]);
        head.fc3.b.value = Tensor::new(&[1], vec![0.05]);
        let f_q = Tensor::full(&[7, 7, 2], 1.0);
        let f_s = Tensor::full(&[7, 7, 2], 2.0);
        let (logit, _) = head.forward(&f_q, &f_s);
        // pooled = [1, 1, 2, 2]
        let z1: [f64; 2] = [
            1.0 * 1.0 + 1.0 * -1.0 + 2.0 * 0.5 + 2.0 * 2.0 + 0.1,
            1.0 * 0.5 + 1.0 * 0.25 + 2.0 * -0.5 + 2.0 * 1.0 + -0.1,
        ];
        let a1 = [z1[0].max(0.0), z1[1].max(0.0)];
        let z2 = [a1[0] * 1.0 + a1[1] * 0.5 + 0.0, a1[0] * -1.0 + a1[1] * 0.5 + 0.2];
        let a2 = [z2[0].max(0.0), z2[1].max(0.0)];
        let expect = a2[0] * 2.0 + a2[1] * -1.0 + 0.05;
        assert!((logit - expect).abs() < 1e-6);
    }

    #[test]
    fn local_zero_support_gives_fc_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut head = LocalHead::new(3, &mut rng);
        head.fc.b.value = Tensor::new(&[1], vec![0.7]);
        let f_q = random_region(3, &mut rng);
        let f_s = Tensor::zeros(&[7, 7, 3]);
        // conv bias would make s_conv nonzero; zero it for the contract test
        head.conv.b.value.fill(0.0);
        let (logit, cache) = head.forward(&f_q, &f_s);
        assert!(cache.corr.iter().all(|&v| v == 0.0));
        assert!((logit - 0.7).abs() < 1e-12);
    }

    #[test]
    fn local_self_correlation_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let head = LocalHead::new(3, &mut rng);
        let f = random_region(3, &mut rng);
        let (_, cache) = head.forward(&f, &f);
        for &v in &cache.corr {
            assert!(v >= 0.0, "self-correlation must be a sum of squares");
        }
    }

    #[test]
    fn local_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let head = LocalHead::new(2, &mut rng);
        let f_q = random_region(2, &mut rng);
        let f_s = random_region(2, &mut rng);
        let (logit, _) = head.forward(&f_q, &f_s);

        // independent evaluation: 1x1 conv then correlation then fc
        let c = 2;
        let mut q_conv = vec![0.0; 49 * c];
        let mut s_conv = vec![0.0; 49 * c];
        for i in 0..49 {
            for co in 0..c {
                let mut aq = head.conv.b.value.data()[co];
                let mut as_ = head.conv.b.value.data()[co];
                for ci in 0..c {
                    aq += f_q.data()[i * c + ci] * head.conv.w.value.at4(0, 0, ci, co);
                    as_ += f_s.data()[i * c + ci] * head.conv.w.value.at4(0, 0, ci, co);
                }
                q_conv[i * c + co] = aq;
                s_conv[i * c + co] = as_;
            }
        }
        let mut expect = head.fc.b.value.data()[0];
        for ch in 0..c {
            let mut corr = 0.0;
            for i in 0..49 {
                corr += s_conv[i * c + ch] * q_conv[i * c + ch];
            }
            expect += corr * head.fc.w.value.at2(ch, 0);
        }
        assert!((logit - expect).abs() < 1e-6);
    }

    #[test]
    fn local_invariant_to_common_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let head = LocalHead::new(3, &mut rng);
        let f_q = random_region(3, &mut rng);
        let f_s = random_region(3, &mut rng);
        let (base, _) = head.forward(&f_q, &f_s);
        // reverse spatial order in both inputs (1x1 conv commutes with it)
        let perm = |t: &Tensor| {
            let c = t.dim(2);
            let mut out = Tensor::zeros_like(t);
            for i in 0..49 {
                let j = 48 - i;
                out.data_mut()[j * c..(j + 1) * c].copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            out
        };
        let (permuted, _) = head.forward(&perm(&f_q), &perm(&f_s));
        assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn patch_spatial_trace_7_5_5_3_3_1() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let head = PatchHead::new(3, 8, 32, &mut rng);
        let f_q = random_region(3, &mut rng);
        let f_s = random_region(3, &mut rng);
        let (_, _, cache) = head.forward(&f_q, &f_s);
        assert_eq!(&cache.concat.shape()[..2], &[7, 7]);
        assert_eq!(&cache.pooled1.shape()[..2], &[5, 5]);
        assert_eq!(&cache.a1.shape()[..2], &[5, 5]);
        assert_eq!(&cache.a2.shape()[..2], &[3, 3]);
        assert_eq!(&cache.a3.shape()[..2], &[3, 3]);
        assert_eq!(&cache.pooled2.shape()[..2], &[1, 1]);
    }

    #[test]
    fn patch_zero_inputs_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let head = PatchHead::new(2, 4, 8, &mut rng);
        let z = Tensor::zeros(&[7, 7, 2]);
        let (logit, deltas, _) = head.forward(&z, &z);
        assert_eq!(logit, 0.0);
        assert_eq!(deltas, [0.0; 4]);
    }

    #[test]
    fn patch_matches_layerwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let head = PatchHead::new(2, 3, 5, &mut rng);
        let f_q = random_region(2, &mut rng);
        let f_s = random_region(2, &mut rng);
        let (logit, deltas, _) = head.forward(&f_q, &f_s);

        // dense per-layer evaluation with explicit loops
        let c2 = 4;
        let concat = concat_channels(&f_q, &f_s);
        let pool = |t: &[f64], h: usize, w: usize, c: usize| {
            let (oh, ow) = (h - 2, w - 2);
            let mut out = vec![0.0; oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += t[((oy + ky) * w + (ox + kx)) * c + ch];
                            }
                        }
                        out[(oy * ow + ox) * c + ch] = acc / 9.0;
                    }
                }
            }
            out
        };
        let p1 = pool(concat.data(), 7, 7, c2);
        // conv1 1x1: 4 -> 3 with relu
        let mut a1 = vec![0.0; 25 * 3];
        for i in 0..25 {
            for co in 0..3 {
                let mut acc = head.conv1.b.value.data()[co];
                for ci in 0..c2 {
                    acc += p1[i * c2 + ci] * head.conv1.w.value.at4(0, 0, ci, co);
                }
                a1[i * 3 + co] = acc.max(0.0);
            }
        }
        // conv2 3x3 no pad: 5x5 -> 3x3 with relu
        let mut a2 = vec![0.0; 9 * 3];
        for oy in 0..3 {
            for ox in 0..3 {
                for co in 0..3 {
                    let mut acc = head.conv2.b.value.data()[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for ci in 0..3 {
                                acc += a1[((oy + ky) * 5 + (ox + kx)) * 3 + ci]
                                    * head.conv2.w.value.at4(ky, kx, ci, co);
                            }
                        }
                    }
                    a2[(oy * 3 + ox) * 3 + co] = acc.max(0.0);
                }
            }
        }
        // conv3 1x1: 3 -> 5 with relu
        let mut a3 = vec![0.0; 9 * 5];
        for i in 0..9 {
            for co in 0..5 {
                let mut acc = head.conv3.b.value.data()[co];
                for ci in 0..3 {
                    acc += a2[i * 3 + ci] * head.conv3.w.value.at4(0, 0, ci, co);
                }
                a3[i * 5 + co] = acc.max(0.0);
            }
        }
        let p2 = pool(&a3, 3, 3, 5);
        let mut want_logit = head.fc_cls.b.value.data()[0];
        for ch in 0..5 {
            want_logit += p2[ch] * head.fc_cls.w.value.at2(ch, 0);
        }
        let mut want_deltas = [0.0; 4];
        for k in 0..4 {
            want_deltas[k] = head.fc_box.b.value.data()[k];
            for ch in 0..5 {
                want_deltas[k] += p2[ch] * head.fc_box.w.value.at2(ch, k);
            }
        }
        assert!((logit - want_logit).abs() < 1e-5);
        for k in 0..4 {
            assert!((deltas[k] - want_deltas[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn toggles_zero_exactly_the_disabled_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let base_cfg = DetectorConfig::toy(3);
        let det = MultiRelationDetector::new(&base_cfg, &mut rng);
        let f_q = random_region(3, &mut rng);
        let f_s = random_region(3, &mut rng);
        let full = det.forward(&f_q, &f_s).unwrap();
        for mask in 0..8u8 {
            let mut d = det.clone();
            d.toggles = HeadToggles { global: mask & 1 != 0, local: mask & 2 != 0, patch: mask & 4 != 0 };
            let s = d.forward(&f_q, &f_s).unwrap();
            let want_g = if mask & 1 != 0 { full.global_logit } else { 0.0 };
            let want_l = if mask & 2 != 0 { full.local_logit } else { 0.0 };
            let want_p = if mask & 4 != 0 { full.patch_logit } else { 0.0 };
            assert_eq!(s.global_logit, want_g);
            assert_eq!(s.local_logit, want_l);
            assert_eq!(s.patch_logit, want_p);
            assert_eq!(s.fused_logit, want_g + want_l + want_p);
            if mask == 0 {
                assert_eq!(s.fused_logit, 0.0);
            }
        }
    }

    #[test]
    fn fused_probability_increases_in_each_logit() {
        let base = RelationScores {
            global_logit: 0.2,
            local_logit: -0.4,
            patch_logit: 0.1,
            fused_logit: fuse_relation_scores(0.2, -0.4, 0.1),
            patch_box_deltas: [0.0; 4],
        };
        for bump in [0.5, 1.0, 2.0] {
            for head in 0..3 {
                let (g, l, p) = match head {
                    0 => (base.global_logit + bump, base.local_logit, base.patch_logit),
                    1 => (base.global_logit, base.local_logit + bump, base.patch_logit),
                    _ => (base.global_logit, base.local_logit, base.patch_logit + bump),
                };
                let fused = fuse_relation_scores(g, l, p);
                assert!(math::sigmoid(fused) > base.probability());
            }
        }
    }

    #[test]
    fn matching_loss_examples() {
        assert!((matching_loss(&[0.0], &[true]).unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
        assert!((matching_loss(&[0.0], &[false]).unwrap() - core::f64::consts::LN_2).abs() < 1e-12);
        let sat = matching_loss(&[60.0, -60.0], &[true, false]).unwrap();
        assert!(sat < 1e-12);
        assert!(matching_loss(&[], &[]).is_err());
    }

    #[test]
    fn matching_loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let logits: Vec<f64> = (0..17).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
        let labels: Vec<bool> = (0..17).map(|_| rng.random::<f64>() > 0.5).collect();
        let got = matching_loss(&logits, &labels).unwrap();
        let mut want = 0.0;
        for i in 0..17 {
            let y = if labels[i] { 1.0 } else { 0.0 };
            let z = logits[i];
            let p = 1.0 / (1.0 + (-z as f64).exp());
            want += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        want /= 17.0;
        assert!((got - want).abs() < 1e-7);
    }

    #[test]
    fn box_loss_examples() {
        let (zero, _) = detector_box_loss(&[[0.1, 0.2, 0.3, 0.4]], &[[0.1, 0.2, 0.3, 0.4]], &[true]);
        assert_eq!(zero.value, 0.0);
        assert!(!zero.empty);

        let (half, _) = detector_box_loss(&[[0.5, 0.5, 0.5, 0.5]], &[[0.0; 4]], &[true]);
        assert!((half.value - 4.0 * 0.125).abs() < 1e-12);

        let (bg, grads) = detector_box_loss(&[[1.0, 1.0, 1.0, 1.0]], &[[0.0; 4]], &[false]);
        assert_eq!(bg.value, 0.0);
        assert!(bg.empty);
        assert_eq!(grads[0], [0.0; 4]);
    }
}
