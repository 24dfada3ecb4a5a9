//! Support-conditioned region proposal network.
//!
//! The support feature map is average-pooled to a 1x1xC kernel and
//! depth-wise cross-correlated with the query feature map; the resulting
//! attention map feeds a 3x3 convolution and two sibling 1x1 heads for
//! objectness logits and box regression deltas. Forcing the kernel to all
//! ones turns the correlation into the identity and recovers a regular RPN
//! with the same weights, which is the baseline used in the proposal-quality
//! ablation.

use alloc::vec::Vec;

use rand::Rng;

use crate::feature::{
    depthwise_cross_correlation, depthwise_cross_correlation_backward, global_average_pool,
    global_average_pool_backward, FeatureError, FeatureMap, SupportKernel,
};
use crate::geometry::{iou, nms_boxes, BBox};
use crate::math;
use crate::nn::Conv2d;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum RpnError {
    Feature(FeatureError),
    DegenerateAnchor { index: usize },
    LengthMismatch,
}

impl core::fmt::Display for RpnError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            RpnError::Feature(e) => write!(f, "{e}"),
            RpnError::DegenerateAnchor { index } => {
                write!(f, "anchor {index} has non-positive width or height")
            }
            RpnError::LengthMismatch => write!(f, "anchor and delta counts differ"),
        }
    }
}

impl core::error::Error for RpnError {}

impl From<FeatureError> for RpnError {
    fn from(e: FeatureError) -> Self {
        RpnError::Feature(e)
    }
}

/// Anchor grid layout: side lengths in pixels, width/height ratios, feature
/// stride.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub stride: usize,
}

impl AnchorConfig {
    pub fn new(scales: Vec<f64>, aspect_ratios: Vec<f64>, stride: usize) -> Self {
        assert!(!scales.is_empty() && !aspect_ratios.is_empty());
        assert!(scales.iter().all(|&s| s > 0.0) && aspect_ratios.iter().all(|&r| r > 0.0));
        assert!(stride >= 1);
        Self { scales, aspect_ratios, stride }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

/// One anchor per (cell, scale, ratio), centered at cell centers, row-major
/// cells, then scale, then ratio. The ratio r preserves area:
/// `w = scale * sqrt(r)`, `h = scale / sqrt(r)`.
pub fn generate_anchors(config: &AnchorConfig, fm_h: usize, fm_w: usize) -> Vec<BBox> {
    let mut anchors = Vec::with_capacity(fm_h * fm_w * config.anchors_per_cell());
    for y in 0..fm_h {
        for x in 0..fm_w {
            let cx = (x as f64 + 0.5) * config.stride as f64;
            let cy = (y as f64 + 0.5) * config.stride as f64;
            for &scale in &config.scales {
                for &ratio in &config.aspect_ratios {
                    let w = scale * math::sqrt(ratio);
                    let h = scale / math::sqrt(ratio);
                    anchors.push(BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h));
                }
            }
        }
    }
    anchors
}

/// (tx, ty, tw, th) parameterization of a target box against an anchor.
pub fn encode_box(anchor: &BBox, target: &BBox) -> Result<[f64; 4], RpnError> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if wa <= 0.0 || ha <= 0.0 {
        return Err(RpnError::DegenerateAnchor { index: 0 });
    }
    Ok([
        (target.cx() - anchor.cx()) / wa,
        (target.cy() - anchor.cy()) / ha,
        math::ln(target.width() / wa),
        math::ln(target.height() / ha),
    ])
}

/// Exact inverse of [`encode_box`], before clipping.
pub fn decode_box(anchor: &BBox, delta: &[f64; 4]) -> Result<BBox, RpnError> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if wa <= 0.0 || ha <= 0.0 {
        return Err(RpnError::DegenerateAnchor { index: 0 });
    }
    let cx = anchor.cx() + delta[0] * wa;
    let cy = anchor.cy() + delta[1] * ha;
    let w = wa * math::exp(delta[2]);
    let h = ha * math::exp(delta[3]);
    Ok(BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h))
}

/// Proposal selection and anchor sampling knobs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RpnConfig {
    pub pre_nms_k: usize,
    pub post_nms_k: usize,
    pub nms_threshold: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub anchor_batch: usize,
    pub positive_fraction: f64,
}

impl Default for RpnConfig {
    fn default() -> Self {
        Self {
            pre_nms_k: 1000,
            post_nms_k: 100,
            nms_threshold: 0.7,
            positive_iou: 0.7,
            negative_iou: 0.3,
            anchor_batch: 256,
            positive_fraction: 0.5,
        }
    }
}

/// Candidate box with its objectness score.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// The 3x3 convolution and the two sibling 1x1 heads.
#[derive(Debug, Clone)]
pub struct RpnHead {
    pub conv: Conv2d,
    pub objectness: Conv2d,
    pub regression: Conv2d,
    pub anchors_per_cell: usize,
}

/// Raw head outputs: objectness logits `(h, w, A)` and deltas `(h, w, 4A)`.
#[derive(Debug, Clone)]
pub struct RpnMaps {
    pub objectness: Tensor,
    pub deltas: Tensor,
}

/// Activations retained for [`attention_backward`].
#[derive(Debug)]
pub struct AttentionCache {
    attention: Tensor,
    mid_pre: Tensor,
    mid: Tensor,
}

impl RpnHead {
    pub fn new<R: Rng>(channels: usize, mid_channels: usize, anchors_per_cell: usize, rng: &mut R) -> Self {
        let conv = Conv2d::new(3, 3, channels, mid_channels, 1, 1, rng);
        let mut objectness = Conv2d::new(1, 1, mid_channels, anchors_per_cell, 1, 0, rng);
        let mut regression = Conv2d::new(1, 1, mid_channels, 4 * anchors_per_cell, 1, 0, rng);
        // Output layers start small so early logits and deltas are tame.
        objectness.w.value.scale(0.1);
        regression.w.value.scale(0.1);
        Self { conv, objectness, regression, anchors_per_cell }
    }

    pub fn zero_grad(&mut self) {
        for conv in [&mut self.conv, &mut self.objectness, &mut self.regression] {
            conv.w.zero_grad();
            conv.b.zero_grad();
        }
    }
}

/// Build the S=1 attention kernel by averaging the support feature map.
pub fn build_support_kernel(support: &FeatureMap) -> SupportKernel {
    SupportKernel::new(global_average_pool(&support.data))
}

/// Attention RPN forward: correlate, 3x3 convolution, sibling heads. The
/// kernel must be S=1 so the output spatial size equals the query's.
pub fn attention_forward(
    kernel: &SupportKernel,
    query: &FeatureMap,
    head: &RpnHead,
) -> Result<RpnMaps, RpnError> {
    let (maps, _) = attention_forward_cached(kernel, query, head)?;
    Ok(maps)
}

pub fn attention_forward_cached(
    kernel: &SupportKernel,
    query: &FeatureMap,
    head: &RpnHead,
) -> Result<(RpnMaps, AttentionCache), RpnError> {
    assert_eq!(kernel.size(), 1, "attention RPN uses an S=1 averaged kernel");
    let attention = depthwise_cross_correlation(kernel, &query.data)?;
    let mid_pre = head.conv.forward(&attention.data);
    let mid = crate::nn::relu(&mid_pre);
    let objectness = head.objectness.forward(&mid);
    let deltas = head.regression.forward(&mid);
    Ok((RpnMaps { objectness, deltas }, AttentionCache { attention: attention.data, mid_pre, mid }))
}

/// Backward through both heads, the 3x3 convolution and the correlation.
/// Head gradients accumulate in place; returns (d_kernel, d_query_features).
pub fn attention_backward(
    head: &mut RpnHead,
    kernel: &SupportKernel,
    query: &FeatureMap,
    cache: &AttentionCache,
    d_objectness: &Tensor,
    d_deltas: &Tensor,
) -> (Tensor, Tensor) {
    let mut d_mid = head.objectness.backward(&cache.mid, d_objectness);
    let d_mid_reg = head.regression.backward(&cache.mid, d_deltas);
    d_mid.add_scaled(&d_mid_reg, 1.0);
    let d_mid_pre = crate::nn::relu_backward(&cache.mid_pre, &d_mid);
    let d_attention = head.conv.backward(&cache.attention, &d_mid_pre);
    depthwise_cross_correlation_backward(kernel, &query.data, &d_attention)
}

/// Gradient of [`build_support_kernel`] back onto the support feature map.
pub fn support_kernel_backward(support_shape: &[usize], d_kernel: &Tensor) -> Tensor {
    global_average_pool_backward(support_shape, d_kernel)
}

/// Sigmoid top-k selection, decode, clip, NMS, cap. Proposals come back in
/// descending objectness order (ties by ascending anchor index).
pub fn select_proposals(
    maps: &RpnMaps,
    anchors: &[BBox],
    image_w: f64,
    image_h: f64,
    config: &RpnConfig,
) -> Result<Vec<Proposal>, RpnError> {
    let (h, w, a) = (maps.objectness.dim(0), maps.objectness.dim(1), maps.objectness.dim(2));
    if anchors.len() != h * w * a {
        return Err(RpnError::LengthMismatch);
    }
    let mut order: Vec<(usize, f64)> = maps
        .objectness
        .data()
        .iter()
        .map(|&z| math::sigmoid(z))
        .enumerate()
        .collect();
    order.sort_by(|x, y| {
        y.1.partial_cmp(&x.1).unwrap_or(core::cmp::Ordering::Equal).then(x.0.cmp(&y.0))
    });
    order.truncate(config.pre_nms_k);

    let mut boxes = Vec::with_capacity(order.len());
    let mut scores = Vec::with_capacity(order.len());
    for &(idx, score) in &order {
        let cell = idx / a;
        let ai = idx % a;
        let dbase = cell * 4 * a + ai * 4;
        let d = &maps.deltas.data()[dbase..dbase + 4];
        let decoded = decode_box(&anchors[idx], &[d[0], d[1], d[2], d[3]])?;
        boxes.push(decoded.clip(image_w, image_h));
        scores.push(score);
    }
    let kept = nms_boxes(&boxes, &scores, config.nms_threshold);
    Ok(kept
        .into_iter()
        .take(config.post_nms_k)
        .map(|i| Proposal { bbox: boxes[i], objectness: scores[i] })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Per-anchor labels and regression targets after IoU assignment and
/// 1:1 subsampling.
#[derive(Debug, Clone)]
pub struct RpnTargets {
    pub labels: Vec<AnchorLabel>,
    /// Encoded (tx, ty, tw, th) for positive anchors, zeros elsewhere.
    pub deltas: Vec<[f64; 4]>,
    pub num_positive: usize,
    pub num_sampled: usize,
}

/// IoU-based assignment: positive at IoU >= `positive_iou` or as a ground
/// truth box's best anchor; negative at IoU <= `negative_iou`; ignore
/// otherwise. At most `anchor_batch` anchors survive subsampling at
/// `positive_fraction`.
pub fn assign_rpn_targets<R: Rng>(
    anchors: &[BBox],
    gt_boxes: &[BBox],
    config: &RpnConfig,
    rng: &mut R,
) -> RpnTargets {
    let n = anchors.len();
    let mut labels = alloc::vec![AnchorLabel::Ignore; n];
    let mut deltas = alloc::vec![[0.0; 4]; n];

    if gt_boxes.is_empty() {
        // Everything maximally overlaps nothing: all anchors are negatives.
        for l in labels.iter_mut() {
            *l = AnchorLabel::Negative;
        }
    } else {
        let mut best_iou = alloc::vec![0.0f64; n];
        let mut best_gt = alloc::vec![0usize; n];
        let mut gt_best = alloc::vec![0.0f64; gt_boxes.len()];
        for (ai, anchor) in anchors.iter().enumerate() {
            for (gi, gt) in gt_boxes.iter().enumerate() {
                let ov = iou(anchor, gt);
                if ov > best_iou[ai] {
                    best_iou[ai] = ov;
                    best_gt[ai] = gi;
                }
                if ov > gt_best[gi] {
                    gt_best[gi] = ov;
                }
            }
        }
        for ai in 0..n {
            if best_iou[ai] >= config.positive_iou {
                labels[ai] = AnchorLabel::Positive;
            } else if best_iou[ai] <= config.negative_iou {
                labels[ai] = AnchorLabel::Negative;
            }
        }
        // Force the best anchor(s) of every ground truth positive.
        for (gi, gt) in gt_boxes.iter().enumerate() {
            if gt_best[gi] <= 0.0 {
                continue;
            }
            for (ai, anchor) in anchors.iter().enumerate() {
                if iou(anchor, gt) == gt_best[gi] {
                    labels[ai] = AnchorLabel::Positive;
                    if gt_best[gi] > best_iou[ai] {
                        best_gt[ai] = gi;
                    }
                }
            }
        }
        for ai in 0..n {
            if labels[ai] == AnchorLabel::Positive {
                // Anchors come from a regular grid and are never degenerate.
                deltas[ai] = encode_box(&anchors[ai], &gt_boxes[best_gt[ai]]).unwrap_or([0.0; 4]);
            }
        }
    }

    let positives: Vec<usize> = (0..n).filter(|&i| labels[i] == AnchorLabel::Positive).collect();
    let negatives: Vec<usize> = (0..n).filter(|&i| labels[i] == AnchorLabel::Negative).collect();
    let max_pos = ((config.anchor_batch as f64) * config.positive_fraction) as usize;
    let keep_pos = subsample(&positives, max_pos, rng);
    let keep_neg = subsample(&negatives, config.anchor_batch - keep_pos.len(), rng);

    let mut final_labels = alloc::vec![AnchorLabel::Ignore; n];
    for &i in &keep_pos {
        final_labels[i] = AnchorLabel::Positive;
    }
    for &i in &keep_neg {
        final_labels[i] = AnchorLabel::Negative;
    }
    RpnTargets {
        labels: final_labels,
        deltas,
        num_positive: keep_pos.len(),
        num_sampled: keep_pos.len() + keep_neg.len(),
    }
}

/// Keep at most `k` indices, chosen by partial Fisher-Yates for determinism.
fn subsample<R: Rng>(indices: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if indices.len() <= k {
        return indices.to_vec();
    }
    let mut pool = indices.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.sort_unstable();
    pool
}

/// RPN loss terms and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnLoss {
    pub objectness: f64,
    pub regression: f64,
    /// Set when no anchors were sampled and both terms are zero.
    pub empty: bool,
}

impl RpnLoss {
    pub fn total(&self) -> f64 {
        self.objectness + self.regression
    }
}

/// Binary cross-entropy over sampled anchors plus smooth-L1 over positive
/// anchors, each normalized by its own count.
pub fn rpn_loss(maps: &RpnMaps, targets: &RpnTargets) -> RpnLoss {
    let (loss, _, _) = rpn_loss_with_grads(maps, targets, false);
    loss
}

/// Loss plus gradients w.r.t. the raw maps (when `with_grads` is set).
pub fn rpn_loss_with_grads(
    maps: &RpnMaps,
    targets: &RpnTargets,
    with_grads: bool,
) -> (RpnLoss, Tensor, Tensor) {
    let a = maps.objectness.dim(2);
    let mut d_obj = Tensor::zeros_like(&maps.objectness);
    let mut d_reg = Tensor::zeros_like(&maps.deltas);
    let n_sampled = targets.labels.iter().filter(|&&l| l != AnchorLabel::Ignore).count();
    let n_pos = targets.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count();
    if n_sampled == 0 {
        return (RpnLoss { objectness: 0.0, regression: 0.0, empty: true }, d_obj, d_reg);
    }

    let mut l_obj = 0.0;
    let mut l_reg = 0.0;
    for (idx, &label) in targets.labels.iter().enumerate() {
        if label == AnchorLabel::Ignore {
            continue;
        }
        let z = maps.objectness.data()[idx];
        let y = if label == AnchorLabel::Positive { 1.0 } else { 0.0 };
        l_obj += math::bce_with_logit(z, y);
        if with_grads {
            d_obj.data_mut()[idx] = math::bce_with_logit_grad(z, y) / n_sampled as f64;
        }
        if label == AnchorLabel::Positive {
            let cell = idx / a;
            let ai = idx % a;
            let dbase = cell * 4 * a + ai * 4;
            for k in 0..4 {
                let diff = maps.deltas.data()[dbase + k] - targets.deltas[idx][k];
                l_reg += math::smooth_l1(diff);
                if with_grads {
                    d_reg.data_mut()[dbase + k] = math::smooth_l1_grad(diff) / n_pos as f64;
                }
            }
        }
    }
    l_obj /= n_sampled as f64;
    if n_pos > 0 {
        l_reg /= n_pos as f64;
    }
    (RpnLoss { objectness: l_obj, regression: l_reg, empty: false }, d_obj, d_reg)
}
