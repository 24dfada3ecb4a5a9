//! Two-way contrastive training: triplet sampling, match-pair construction
//! with the 1:2:1 foreground/background/negative ratio, the multi-task loss
//! `L = L_rpn + L_matching + L_box`, and the SGD loop.
//!
//! Each step draws a triplet (query of category c, supports of c, supports
//! of some other category n), runs the attention RPN once per support
//! branch, scores every (proposal, support) pair with the multi-relation
//! detector, mines the highest-scoring background and negative pairs, and
//! backpropagates through the whole weight-shared network.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneCache;
use crate::data::{
    prepare_query, prepare_support_sized, DataError, DatasetManifest, ImageSource, QueryResize,
};
use crate::detector::{detector_box_loss, matching_loss, matching_loss_grads, DetectorError};
use crate::feature::{
    extract_region_feature, fuse_k_shot_features, roi_align_backward, FeatureMap, RegionFeature,
    SupportKernel, REGION_SIZE,
};
use crate::geometry::{iou, BBox};
use crate::model::{FewShotDetector, ModelError};
use crate::nn::Param;
use crate::rpn::{
    assign_rpn_targets, attention_backward, attention_forward_cached, encode_box, generate_anchors,
    rpn_loss_with_grads, select_proposals, support_kernel_backward, AttentionCache, Proposal, RpnMaps,
    RpnTargets,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    Data(DataError),
    Model(ModelError),
    Detector(DetectorError),
    InsufficientCategories,
    NoEligibleTriplet,
    NonFiniteLoss { iteration: usize },
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Detector(e) => write!(f, "{e}"),
            TrainError::InsufficientCategories => write!(f, "triplet sampling needs at least 2 categories"),
            TrainError::NoEligibleTriplet => write!(f, "no category has enough queries and supports"),
            TrainError::NonFiniteLoss { iteration } => {
                write!(f, "non-finite loss at iteration {iteration}; step aborted")
            }
        }
    }
}

impl core::error::Error for TrainError {}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}
impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}
impl From<DetectorError> for TrainError {
    fn from(e: DetectorError) -> Self {
        TrainError::Detector(e)
    }
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

/// Learning-rate schedule and optimizer constants. Reference values follow
/// the cited training setup; desk runs scale the counts down.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub decay_step: usize,
    pub decay_factor: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl TrainSchedule {
    /// 0.002 for the first 56000 iterations, 0.0002 afterwards, batch 4.
    pub fn reference() -> Self {
        Self {
            base_lr: 0.002,
            decay_step: 56_000,
            decay_factor: 0.1,
            iterations: 60_000,
            batch_size: 4,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.decay_step {
            self.base_lr
        } else {
            self.base_lr * self.decay_factor
        }
    }
}

/// Plain SGD with momentum and weight decay; velocity buffers keyed by
/// parameter name. Frozen parameters are skipped entirely.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, model: &mut FewShotDetector, lr: f64) {
        let momentum = self.momentum;
        let weight_decay = self.weight_decay;
        let velocity = &mut self.velocity;
        model.for_each_param(&mut |name: &str, param: &mut Param, frozen: bool| {
            if frozen {
                return;
            }
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros_like(&param.value));
            for i in 0..param.value.len() {
                let g = param.grad.data()[i] + weight_decay * param.value.data()[i];
                let vi = momentum * v.data()[i] + g;
                v.data_mut()[i] = vi;
                param.value.data_mut()[i] -= lr * vi;
            }
        });
    }

    /// Named velocity snapshot for exact checkpoint resume.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        self.velocity.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn load_state(&mut self, state: &[(String, Tensor)]) {
        self.velocity = state.iter().cloned().collect();
    }
}

// ---------------------------------------------------------------------------
// Triplet sampling

/// Pair-mining quotas relative to the foreground count N: keep `fg * N`
/// matching pairs, `bg * N` background pairs and `neg * N` negative-support
/// pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PairQuotas {
    pub fg: usize,
    pub bg: usize,
    pub neg: usize,
}

impl Default for PairQuotas {
    fn default() -> Self {
        Self { fg: 1, bg: 2, neg: 1 }
    }
}

/// One contrastive training unit: a preprocessed query of category c with
/// its c-category ground truth, K support crops of c, and K support crops of
/// a different category n.
#[derive(Debug, Clone)]
pub struct TrainingTriplet {
    pub category: String,
    pub negative_category: String,
    pub query: Tensor,
    /// Only the c-category boxes, scaled to the resized query.
    pub query_gt: Vec<BBox>,
    pub positive_supports: Vec<Tensor>,
    pub negative_supports: Vec<Tensor>,
}

/// Sampling and preprocessing knobs for triplet construction.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TripletConfig {
    pub shots: usize,
    pub support_size: usize,
    pub query_resize: QueryResize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { shots: 1, support_size: crate::data::SUPPORT_SIZE, query_resize: QueryResize::default() }
    }
}

fn choose<R: Rng, T: Copy>(items: &[T], rng: &mut R) -> T {
    items[rng.random_range(0..items.len())]
}

/// Draw `k` distinct elements, preserving deterministic order of selection.
fn choose_k<R: Rng, T: Copy>(items: &[T], k: usize, rng: &mut R) -> Vec<T> {
    let mut pool: Vec<T> = items.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(pool.len()) {
        let i = rng.random_range(0..pool.len());
        out.push(pool.swap_remove(i));
    }
    out
}

/// Uniformly sample a training triplet: category c over all eligible
/// categories, a query image of c, `shots` support instances of c outside
/// the query image, a different category n and `shots` support instances of
/// n. Deterministic for a given rng state.
pub fn sample_triplet<S: ImageSource>(
    manifest: &DatasetManifest,
    images: &S,
    config: &TripletConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingTriplet, TrainError> {
    if manifest.categories.len() < 2 {
        return Err(TrainError::InsufficientCategories);
    }

    // Eligible query category: has a query image whose exclusion still
    // leaves `shots` support instances.
    let mut eligible: Vec<&String> = Vec::new();
    for cat in &manifest.categories {
        let instances = manifest.instances_of(cat);
        let images_of = manifest.images_with(cat);
        let ok = images_of.iter().any(|&ri| {
            instances.iter().filter(|(ir, _)| *ir != ri).count() >= config.shots
        });
        if ok && !images_of.is_empty() {
            eligible.push(cat);
        }
    }
    if eligible.is_empty() {
        return Err(TrainError::NoEligibleTriplet);
    }
    let category = eligible[rng.random_range(0..eligible.len())].clone();

    let instances = manifest.instances_of(&category);
    let query_candidates: Vec<usize> = manifest
        .images_with(&category)
        .into_iter()
        .filter(|&ri| instances.iter().filter(|(ir, _)| *ir != ri).count() >= config.shots)
        .collect();
    let query_index = choose(&query_candidates, rng);

    let support_pool: Vec<(usize, usize)> =
        instances.iter().copied().filter(|(ri, _)| *ri != query_index).collect();
    let positive_refs = choose_k(&support_pool, config.shots, rng);

    // Negative category: any other category with enough support instances.
    let negative_candidates: Vec<&String> = manifest
        .categories
        .iter()
        .filter(|c| **c != category && manifest.instances_of(c).len() >= config.shots)
        .collect();
    if negative_candidates.is_empty() {
        return Err(TrainError::NoEligibleTriplet);
    }
    let negative_category = negative_candidates[rng.random_range(0..negative_candidates.len())].clone();
    let negative_refs = choose_k(&manifest.instances_of(&negative_category), config.shots, rng);

    // Materialize tensors.
    let qrec = &manifest.records[query_index];
    let qimg = images.load(&qrec.image)?;
    let (query, scale) = prepare_query(&qimg, &config.query_resize)?;
    let query_gt: Vec<BBox> = qrec
        .boxes
        .iter()
        .filter(|b| b.category == category)
        .map(|b| b.bbox.scaled(scale))
        .collect();

    let crop = |refs: &[(usize, usize)]| -> Result<Vec<Tensor>, TrainError> {
        let mut out = Vec::with_capacity(refs.len());
        for &(ri, bi) in refs {
            let rec = &manifest.records[ri];
            let img = images.load(&rec.image)?;
            let sc = prepare_support_sized(&img, &rec.boxes[bi].bbox, config.support_size)?;
            out.push(sc.image);
        }
        Ok(out)
    };

    Ok(TrainingTriplet {
        category,
        negative_category,
        query,
        query_gt,
        positive_supports: crop(&positive_refs)?,
        negative_supports: crop(&negative_refs)?,
    })
}

// ---------------------------------------------------------------------------
// Pair classification and selection

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportPolarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    /// Foreground proposal with the positive support: the only matching kind.
    FgPos,
    /// Background proposal with the positive support.
    BgPos,
    /// Any proposal with the negative support.
    AnyNeg,
}

/// A labeled (proposal, support) pair with the detector's current matching
/// score; indices refer into the owning branch's proposal list.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchPair {
    pub branch: SupportPolarity,
    pub proposal_index: usize,
    pub kind: PairKind,
    /// Matching ground-truth index for foreground pairs.
    pub matched_gt: Option<usize>,
    pub label: bool,
    pub score: f64,
}

/// Classify proposals against one support polarity: with the positive
/// support a proposal is foreground iff its best IoU with the category's
/// ground truth reaches `fg_iou`, background otherwise; with the negative
/// support every pair is a non-match regardless of overlap.
pub fn classify_pairs(
    proposals: &[Proposal],
    gt_boxes: &[BBox],
    polarity: SupportPolarity,
    fg_iou: f64,
) -> Vec<(PairKind, Option<usize>)> {
    proposals
        .iter()
        .map(|p| match polarity {
            SupportPolarity::Negative => (PairKind::AnyNeg, None),
            SupportPolarity::Positive => {
                let mut best = 0.0;
                let mut best_gt = None;
                for (gi, gt) in gt_boxes.iter().enumerate() {
                    let ov = iou(&p.bbox, gt);
                    if ov > best {
                        best = ov;
                        best_gt = Some(gi);
                    }
                }
                if best >= fg_iou {
                    (PairKind::FgPos, best_gt)
                } else {
                    (PairKind::BgPos, None)
                }
            }
        })
        .collect()
}

/// Outcome of 1:2:1 pair mining.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSelection {
    /// Indices into the input pair list, foreground first, then background,
    /// then negative.
    pub selected: Vec<usize>,
    pub counts: (usize, usize, usize),
    /// Some pool could not fill its quota.
    pub deficit: bool,
    /// No foreground pair survived; quotas fell back to N = 1.
    pub fg_fallback: bool,
}

/// Keep all N foreground pairs, the top `2N` background pairs and the top
/// `N` negative pairs by current matching score (ties by ascending index).
/// When N = 0 the quotas are computed as if N were 1 so the step still
/// trains the non-match direction.
pub fn select_training_pairs(pairs: &[MatchPair], quotas: &PairQuotas) -> PairSelection {
    let fg: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].kind == PairKind::FgPos).collect();
    let mut bg: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].kind == PairKind::BgPos).collect();
    let mut neg: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].kind == PairKind::AnyNeg).collect();

    let fg_fallback = fg.is_empty();
    let n = if fg_fallback { 1 } else { fg.len() };
    let want_fg = quotas.fg * n;
    let want_bg = quotas.bg * n;
    let want_neg = quotas.neg * n;

    let by_score_desc = |pool: &mut Vec<usize>| {
        pool.sort_by(|&a, &b| {
            pairs[b]
                .score
                .partial_cmp(&pairs[a].score)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
    };
    by_score_desc(&mut bg);
    by_score_desc(&mut neg);

    let take_fg: Vec<usize> = fg.into_iter().take(want_fg).collect();
    let take_bg: Vec<usize> = bg.into_iter().take(want_bg).collect();
    let take_neg: Vec<usize> = neg.into_iter().take(want_neg).collect();
    let deficit = take_bg.len() < want_bg || take_neg.len() < want_neg || take_fg.len() < want_fg;

    let counts = (take_fg.len(), take_bg.len(), take_neg.len());
    let mut selected = take_fg;
    selected.extend(take_bg);
    selected.extend(take_neg);
    PairSelection { selected, counts, deficit, fg_fallback }
}

// ---------------------------------------------------------------------------
// Training step

/// The decomposed multi-task loss.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBundle {
    pub rpn: f64,
    pub matching: f64,
    pub box_refine: f64,
}

impl LossBundle {
    pub fn total(&self) -> f64 {
        self.rpn + self.matching + self.box_refine
    }

    pub fn is_finite(&self) -> bool {
        self.rpn.is_finite() && self.matching.is_finite() && self.box_refine.is_finite()
    }
}

/// Per-step knobs beyond the schedule.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepConfig {
    pub quotas: PairQuotas,
    /// IoU at which a proposal counts as foreground for pair labeling.
    pub fg_iou: f64,
    /// Supervise the RPN on the negative branch as well (all background).
    pub rpn_on_negative: bool,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self { quotas: PairQuotas::default(), fg_iou: 0.5, rpn_on_negative: false }
    }
}

/// Diagnostics of one gradient computation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub losses: LossBundle,
    pub pair_counts: (usize, usize, usize),
    pub proposal_counts: (usize, usize),
    /// Mean matching score over the whole candidate pool, by kind
    /// (foreground, background, negative-support).
    pub score_means: (f64, f64, f64),
    /// Smallest and largest matching score in the candidate pool.
    pub score_range: (f64, f64),
    pub deficit: bool,
    pub fg_fallback: bool,
    pub rpn_empty: bool,
}

struct BranchState {
    crop_caches: Vec<BackboneCache>,
    fused_map: FeatureMap,
    kernel: SupportKernel,
    region: RegionFeature,
    attn_cache: AttentionCache,
    maps: RpnMaps,
    proposals: Vec<Proposal>,
    region_features: Vec<RegionFeature>,
}

fn forward_branch(
    model: &FewShotDetector,
    supports: &[Tensor],
    qfm: &FeatureMap,
    img_w: f64,
    img_h: f64,
) -> Result<BranchState, TrainError> {
    let mut crop_caches = Vec::with_capacity(supports.len());
    let mut maps = Vec::with_capacity(supports.len());
    for crop in supports {
        let (fm, cache) = model.backbone.extract_cached(crop, "support").map_err(ModelError::from)?;
        crop_caches.push(cache);
        maps.push(fm.data);
    }
    let fused = fuse_k_shot_features(&maps).map_err(ModelError::from)?;
    let fused_map = FeatureMap::new(fused, model.backbone.stride(), "support");
    let kernel = crate::rpn::build_support_kernel(&fused_map);
    let full = BBox::new(
        0.0,
        0.0,
        (fused_map.width() * fused_map.stride) as f64,
        (fused_map.height() * fused_map.stride) as f64,
    );
    let region = extract_region_feature(&fused_map, &full).map_err(ModelError::from)?;

    let kernel_eff = if model.attention_enabled {
        kernel.clone()
    } else {
        SupportKernel::ones(1, kernel.channels())
    };
    let (rpn_maps, attn_cache) =
        attention_forward_cached(&kernel_eff, qfm, &model.rpn_head).map_err(ModelError::from)?;
    let anchors = generate_anchors(&model.anchors, qfm.height(), qfm.width());
    let proposals =
        select_proposals(&rpn_maps, &anchors, img_w, img_h, &model.rpn).map_err(ModelError::from)?;

    let mut region_features = Vec::with_capacity(proposals.len());
    for p in &proposals {
        region_features.push(extract_region_feature(qfm, &p.bbox).map_err(ModelError::from)?);
    }
    Ok(BranchState {
        crop_caches,
        fused_map,
        kernel: kernel_eff,
        region,
        attn_cache,
        maps: rpn_maps,
        proposals,
        region_features,
    })
}

/// Run one full forward/backward over a triplet, accumulating parameter
/// gradients in the model. Does not apply the optimizer.
pub fn compute_gradients(
    model: &mut FewShotDetector,
    triplet: &TrainingTriplet,
    config: &StepConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput, TrainError> {
    let img_w = triplet.query.dim(1) as f64;
    let img_h = triplet.query.dim(0) as f64;
    let (qfm, qcache) = model
        .backbone
        .extract_cached(&triplet.query, "query")
        .map_err(ModelError::from)?;

    let pos = forward_branch(model, &triplet.positive_supports, &qfm, img_w, img_h)?;
    let neg = forward_branch(model, &triplet.negative_supports, &qfm, img_w, img_h)?;

    // RPN supervision: foreground is defined only by the triplet's category.
    let anchors = generate_anchors(&model.anchors, qfm.height(), qfm.width());
    let pos_targets = assign_rpn_targets(&anchors, &triplet.query_gt, &model.rpn, rng);
    let (pos_rpn_loss, d_obj_pos, d_reg_pos) = rpn_loss_with_grads(&pos.maps, &pos_targets, true);
    let neg_supervision: Option<(RpnTargets, Tensor, Tensor, f64)> = if config.rpn_on_negative {
        let t = assign_rpn_targets(&anchors, &[], &model.rpn, rng);
        let (l, d_obj, d_reg) = rpn_loss_with_grads(&neg.maps, &t, true);
        Some((t, d_obj, d_reg, l.total()))
    } else {
        None
    };

    // Score and label every (proposal, support) pair.
    let mut pairs: Vec<MatchPair> = Vec::new();
    for (branch, state, polarity) in [
        (&pos, &pos, SupportPolarity::Positive),
        (&neg, &neg, SupportPolarity::Negative),
    ] {
        let _ = branch;
        let kinds = classify_pairs(&state.proposals, &triplet.query_gt, polarity, config.fg_iou);
        for (pi, (kind, matched_gt)) in kinds.into_iter().enumerate() {
            let scores = model
                .detector
                .forward(&state.region_features[pi].data, &state.region.data)?;
            pairs.push(MatchPair {
                branch: polarity,
                proposal_index: pi,
                kind,
                matched_gt,
                label: kind == PairKind::FgPos,
                score: scores.probability(),
            });
        }
    }

    let selection = select_training_pairs(&pairs, &config.quotas);
    if selection.selected.is_empty() {
        return Err(TrainError::Detector(DetectorError::EmptyPairSet));
    }
    let mean_score = |kind: PairKind| {
        let pool: Vec<f64> = pairs.iter().filter(|p| p.kind == kind).map(|p| p.score).collect();
        if pool.is_empty() {
            0.0
        } else {
            pool.iter().sum::<f64>() / pool.len() as f64
        }
    };
    let score_means = (mean_score(PairKind::FgPos), mean_score(PairKind::BgPos), mean_score(PairKind::AnyNeg));
    let score_range = pairs.iter().fold((1.0f64, 0.0f64), |(lo, hi), p| (lo.min(p.score), hi.max(p.score)));

    // Loss on the selected pairs: recompute with caches for the backward.
    let mut fused_logits = Vec::with_capacity(selection.selected.len());
    let mut labels = Vec::with_capacity(selection.selected.len());
    let mut deltas = Vec::with_capacity(selection.selected.len());
    let mut box_targets = Vec::with_capacity(selection.selected.len());
    let mut foreground = Vec::with_capacity(selection.selected.len());
    let mut pair_caches = Vec::with_capacity(selection.selected.len());
    for &pi in &selection.selected {
        let pair = &pairs[pi];
        let state = if pair.branch == SupportPolarity::Positive { &pos } else { &neg };
        let f_q = &state.region_features[pair.proposal_index];
        let (scores, cache) = model.detector.forward_cached(&f_q.data, &state.region.data)?;
        fused_logits.push(scores.fused_logit);
        labels.push(pair.label);
        deltas.push(scores.patch_box_deltas);
        foreground.push(pair.kind == PairKind::FgPos);
        let target = match pair.matched_gt {
            Some(gi) => encode_box(
                &state.proposals[pair.proposal_index].bbox,
                &triplet.query_gt[gi],
            )
            .unwrap_or([0.0; 4]),
            None => [0.0; 4],
        };
        box_targets.push(target);
        pair_caches.push(cache);
    }

    let l_matching = matching_loss(&fused_logits, &labels)?;
    let d_fused = matching_loss_grads(&fused_logits, &labels);
    let (box_loss, d_box) = detector_box_loss(&deltas, &box_targets, &foreground);

    let losses = LossBundle {
        rpn: pos_rpn_loss.total() + neg_supervision.as_ref().map_or(0.0, |(_, _, _, l)| *l),
        matching: l_matching,
        box_refine: box_loss.value,
    };
    if !losses.is_finite() {
        return Err(TrainError::NonFiniteLoss { iteration: 0 });
    }

    // ------------------------------------------------------------------
    // Backward

    model.zero_grad();
    let mut d_qfm = Tensor::zeros_like(&qfm.data);
    let mut d_region_pos = Tensor::zeros(&[REGION_SIZE, REGION_SIZE, qfm.channels()]);
    let mut d_region_neg = Tensor::zeros(&[REGION_SIZE, REGION_SIZE, qfm.channels()]);

    for (si, &pi) in selection.selected.iter().enumerate() {
        let pair = &pairs[pi];
        let state = if pair.branch == SupportPolarity::Positive { &pos } else { &neg };
        let f_q = &state.region_features[pair.proposal_index];
        let (d_fq, d_fs) = model.detector.backward(
            &f_q.data,
            &state.region.data,
            &pair_caches[si],
            d_fused[si],
            &d_box[si],
        );
        d_qfm.add_scaled(&roi_align_backward(&qfm, &f_q.source, REGION_SIZE, 2, &d_fq), 1.0);
        if pair.branch == SupportPolarity::Positive {
            d_region_pos.add_scaled(&d_fs, 1.0);
        } else {
            d_region_neg.add_scaled(&d_fs, 1.0);
        }
    }

    // RPN backward on the positive branch (and optionally the negative one).
    let (d_kernel_pos, d_qfm_rpn) = attention_backward(
        &mut model.rpn_head,
        &pos.kernel,
        &qfm,
        &pos.attn_cache,
        &d_obj_pos,
        &d_reg_pos,
    );
    d_qfm.add_scaled(&d_qfm_rpn, 1.0);
    let d_kernel_neg = if let Some((_, d_obj, d_reg, _)) = &neg_supervision {
        let (dk, dq) = attention_backward(
            &mut model.rpn_head,
            &neg.kernel,
            &qfm,
            &neg.attn_cache,
            d_obj,
            d_reg,
        );
        d_qfm.add_scaled(&dq, 1.0);
        Some(dk)
    } else {
        None
    };

    // Support-side backward per branch: region feature and (when attention
    // is on) the averaged kernel, through the fused map into each crop.
    for (state, d_region, d_kernel) in [
        (&pos, &d_region_pos, if model.attention_enabled { Some(&d_kernel_pos) } else { None }),
        (&neg, &d_region_neg, if model.attention_enabled { d_kernel_neg.as_ref() } else { None }),
    ] {
        let full = BBox::new(
            0.0,
            0.0,
            (state.fused_map.width() * state.fused_map.stride) as f64,
            (state.fused_map.height() * state.fused_map.stride) as f64,
        );
        let mut d_fused = roi_align_backward(&state.fused_map, &full, REGION_SIZE, 2, d_region);
        if let Some(dk) = d_kernel {
            d_fused.add_scaled(&support_kernel_backward(state.fused_map.data.shape(), dk), 1.0);
        }
        let k = state.crop_caches.len() as f64;
        let mut d_crop = d_fused;
        d_crop.scale(1.0 / k);
        for cache in &state.crop_caches {
            model.backbone.backward(cache, &d_crop);
        }
    }

    model.backbone.backward(&qcache, &d_qfm);

    Ok(StepOutput {
        losses,
        pair_counts: selection.counts,
        proposal_counts: (pos.proposals.len(), neg.proposals.len()),
        score_means,
        score_range,
        deficit: selection.deficit,
        fg_fallback: selection.fg_fallback,
        rpn_empty: pos_rpn_loss.empty,
    })
}

/// One optimization step: gradients from the triplet, then SGD at the
/// scheduled learning rate. Zero learning rate provably leaves weights
/// unchanged.
pub fn training_step(
    model: &mut FewShotDetector,
    triplet: &TrainingTriplet,
    config: &StepConfig,
    schedule: &TrainSchedule,
    optimizer: &mut Sgd,
    iteration: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput, TrainError> {
    let out = compute_gradients(model, triplet, config, rng).map_err(|e| match e {
        TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { iteration },
        other => other,
    })?;
    optimizer.step(model, schedule.lr_at(iteration));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training loop

/// Everything a full run needs besides the model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub step: StepConfig,
    pub triplet: TripletConfig,
    pub seed: u64,
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceRow {
    pub iteration: usize,
    pub rpn: f64,
    pub matching: f64,
    pub box_refine: f64,
    pub total: f64,
}

/// Run the contrastive training loop from `start_iteration` for the
/// scheduled number of iterations, invoking `on_step` after each one.
/// Deterministic given the seed in single-producer mode (one sampling rng,
/// one step rng, fixed arithmetic order).
pub fn run_training<S: ImageSource>(
    model: &mut FewShotDetector,
    manifest: &DatasetManifest,
    images: &S,
    config: &TrainConfig,
    optimizer: &mut Sgd,
    start_iteration: usize,
    mut on_step: impl FnMut(&TraceRow, &StepOutput),
) -> Result<Vec<TraceRow>, TrainError> {
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut step_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    // Fast-forward the sampling streams when resuming.
    if start_iteration > 0 {
        for _ in 0..start_iteration * config.schedule.batch_size {
            let _ = sample_triplet(manifest, images, &config.triplet, &mut sample_rng)?;
            let _ = step_rng.random::<u64>();
        }
    }

    let mut trace = Vec::new();
    for iteration in start_iteration..config.schedule.iterations {
        let mut accumulated = LossBundle { rpn: 0.0, matching: 0.0, box_refine: 0.0 };
        let mut last_output = None;
        for b in 0..config.schedule.batch_size {
            let triplet = sample_triplet(manifest, images, &config.triplet, &mut sample_rng)?;
            let out = compute_gradients_accumulate(model, &triplet, &config.step, &mut step_rng, b > 0)?;
            accumulated.rpn += out.losses.rpn;
            accumulated.matching += out.losses.matching;
            accumulated.box_refine += out.losses.box_refine;
            last_output = Some(out);
        }
        let bsz = config.schedule.batch_size as f64;
        scale_gradients(model, 1.0 / bsz);
        optimizer.step(model, config.schedule.lr_at(iteration));

        let losses = LossBundle {
            rpn: accumulated.rpn / bsz,
            matching: accumulated.matching / bsz,
            box_refine: accumulated.box_refine / bsz,
        };
        if !losses.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration });
        }
        let row = TraceRow {
            iteration,
            rpn: losses.rpn,
            matching: losses.matching,
            box_refine: losses.box_refine,
            total: losses.total(),
        };
        if let Some(out) = &last_output {
            on_step(&row, out);
        }
        trace.push(row);
    }
    Ok(trace)
}

/// [`compute_gradients`] that optionally preserves previously accumulated
/// gradients (micro-batching).
fn compute_gradients_accumulate(
    model: &mut FewShotDetector,
    triplet: &TrainingTriplet,
    config: &StepConfig,
    rng: &mut ChaCha8Rng,
    keep_existing: bool,
) -> Result<StepOutput, TrainError> {
    if !keep_existing {
        return compute_gradients(model, triplet, config, rng);
    }
    // Stash the running gradient, compute fresh, then re-add.
    let mut stash: Vec<Tensor> = Vec::new();
    model.for_each_param(&mut |_, p, _| stash.push(p.grad.clone()));
    let out = compute_gradients(model, triplet, config, rng)?;
    let mut i = 0;
    model.for_each_param(&mut |_, p, _| {
        p.grad.add_scaled(&stash[i], 1.0);
        i += 1;
    });
    Ok(out)
}

fn scale_gradients(model: &mut FewShotDetector, factor: f64) {
    model.for_each_param(&mut |_, p, _| p.grad.scale(factor));
}
