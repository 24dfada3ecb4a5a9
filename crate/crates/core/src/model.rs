//! Full model assembly: the weight-shared extractor feeding the attention
//! RPN and the multi-relation detector, plus the support-side precompute
//! path. Support features are computed once per category and then act like
//! extra model weights for every query forward.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::{Backbone, BackboneConfig, BackboneError};
use crate::detector::{DetectorConfig, DetectorError, HeadToggles, MultiRelationDetector};
use crate::feature::{
    extract_region_feature, fuse_k_shot_features, FeatureError, FeatureMap, RegionFeature, SupportKernel,
};
use crate::geometry::{nms, soft_nms, BBox, Detection};
use crate::nn::Param;
use crate::rpn::{
    attention_forward, build_support_kernel, decode_box, generate_anchors, select_proposals, AnchorConfig,
    Proposal, RpnConfig, RpnError, RpnHead, RpnMaps,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Backbone(BackboneError),
    Feature(FeatureError),
    Rpn(RpnError),
    Detector(DetectorError),
    EmptySupportSet { category: String },
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::Backbone(e) => write!(f, "{e}"),
            ModelError::Feature(e) => write!(f, "{e}"),
            ModelError::Rpn(e) => write!(f, "{e}"),
            ModelError::Detector(e) => write!(f, "{e}"),
            ModelError::EmptySupportSet { category } => {
                write!(f, "no support crops supplied for category {category:?}")
            }
        }
    }
}

impl core::error::Error for ModelError {}

impl From<BackboneError> for ModelError {
    fn from(e: BackboneError) -> Self {
        ModelError::Backbone(e)
    }
}
impl From<FeatureError> for ModelError {
    fn from(e: FeatureError) -> Self {
        ModelError::Feature(e)
    }
}
impl From<RpnError> for ModelError {
    fn from(e: RpnError) -> Self {
        ModelError::Rpn(e)
    }
}
impl From<DetectorError> for ModelError {
    fn from(e: DetectorError) -> Self {
        ModelError::Detector(e)
    }
}

/// Everything needed to build a [`FewShotDetector`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub rpn: RpnConfig,
    pub heads: HeadToggles,
    pub patch_mid_channels: usize,
    pub patch_out_channels: usize,
    /// When false the support kernel is forced to all ones, turning the
    /// attention RPN into a regular RPN with identical weights.
    pub attention_enabled: bool,
}

impl ModelConfig {
    /// Desk-scale defaults used by the synthetic benchmark.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            anchors: AnchorConfig::new(
                alloc::vec![24.0, 32.0, 44.0],
                alloc::vec![0.5, 1.0, 2.0],
                BackboneConfig::toy().total_stride(),
            ),
            rpn: RpnConfig::default(),
            heads: HeadToggles::default(),
            patch_mid_channels: 8,
            patch_out_channels: 32,
            attention_enabled: true,
        }
    }

    /// Full-scale defaults mirroring the cited training setup.
    pub fn reference() -> Self {
        Self {
            backbone: BackboneConfig::reference(),
            anchors: AnchorConfig::new(
                alloc::vec![32.0, 64.0, 128.0, 256.0],
                alloc::vec![0.5, 1.0, 2.0],
                BackboneConfig::reference().total_stride(),
            ),
            rpn: RpnConfig::default(),
            heads: HeadToggles::default(),
            patch_mid_channels: 512,
            patch_out_channels: 2048,
            attention_enabled: true,
        }
    }
}

/// Suppression and thresholding applied to raw detections.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DetectOptions {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Gaussian soft-NMS (sigma, score floor) instead of hard NMS.
    pub soft_nms: Option<(f64, f64)>,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self { score_threshold: 0.5, nms_threshold: 0.5, soft_nms: None }
    }
}

/// Precomputed support-side state: the fused K-shot feature map, its S=1
/// attention kernel and the pooled region feature the detector matches
/// against.
#[derive(Debug, Clone)]
pub struct SupportContext {
    pub fused_map: FeatureMap,
    pub kernel: SupportKernel,
    pub region: RegionFeature,
}

#[derive(Debug, Clone)]
pub struct FewShotDetector {
    pub backbone: Backbone,
    pub rpn_head: RpnHead,
    pub detector: MultiRelationDetector,
    pub anchors: AnchorConfig,
    pub rpn: RpnConfig,
    pub attention_enabled: bool,
}

impl FewShotDetector {
    pub fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let backbone = Backbone::new(&config.backbone, rng);
        let c = backbone.out_channels();
        let rpn_head = RpnHead::new(c, c, config.anchors.anchors_per_cell(), rng);
        let det_cfg = DetectorConfig {
            channels: c,
            patch_mid_channels: config.patch_mid_channels,
            patch_out_channels: config.patch_out_channels,
            toggles: config.heads,
        };
        let detector = MultiRelationDetector::new(&det_cfg, rng);
        Self {
            backbone,
            rpn_head,
            detector,
            anchors: config.anchors.clone(),
            rpn: config.rpn.clone(),
            attention_enabled: config.attention_enabled,
        }
    }

    /// Run the K support crops through the shared extractor, average their
    /// feature maps and derive the kernel and support region feature.
    pub fn precompute_support(&self, crops: &[Tensor]) -> Result<SupportContext, ModelError> {
        if crops.is_empty() {
            return Err(ModelError::EmptySupportSet { category: String::new() });
        }
        let mut maps = Vec::with_capacity(crops.len());
        for crop in crops {
            maps.push(self.backbone.extract(crop, "support")?.data);
        }
        let fused = fuse_k_shot_features(&maps)?;
        let fused_map = FeatureMap::new(fused, self.backbone.stride(), "support");
        let kernel = build_support_kernel(&fused_map);
        let full = BBox::new(
            0.0,
            0.0,
            (fused_map.width() * fused_map.stride) as f64,
            (fused_map.height() * fused_map.stride) as f64,
        );
        let region = extract_region_feature(&fused_map, &full)?;
        Ok(SupportContext { fused_map, kernel, region })
    }

    /// One fused support context per category, all through the same shared
    /// weights. Branch outputs are independent of evaluation order.
    pub fn extend_to_n_way(
        &self,
        supports: &[(String, Vec<Tensor>)],
    ) -> Result<Vec<(String, SupportContext)>, ModelError> {
        let mut out = Vec::with_capacity(supports.len());
        for (category, crops) in supports {
            if crops.is_empty() {
                return Err(ModelError::EmptySupportSet { category: category.clone() });
            }
            out.push((category.clone(), self.precompute_support(crops)?));
        }
        Ok(out)
    }

    /// The kernel actually fed to the correlation: the support kernel, or
    /// all ones when attention is disabled (the regular-RPN baseline).
    pub fn effective_kernel(&self, ctx: &SupportContext) -> SupportKernel {
        if self.attention_enabled {
            ctx.kernel.clone()
        } else {
            SupportKernel::ones(1, ctx.kernel.channels())
        }
    }

    /// Proposal stage only: extract query features, correlate, select.
    pub fn propose(&self, query: &Tensor, ctx: &SupportContext) -> Result<Vec<Proposal>, ModelError> {
        let qfm = self.backbone.extract(query, "query")?;
        let (maps, anchors) = self.rpn_maps(&qfm, ctx)?;
        let props = select_proposals(
            &maps,
            &anchors,
            query.dim(1) as f64,
            query.dim(0) as f64,
            &self.rpn,
        )?;
        Ok(props)
    }

    pub(crate) fn rpn_maps(&self, qfm: &FeatureMap, ctx: &SupportContext) -> Result<(RpnMaps, Vec<BBox>), ModelError> {
        let kernel = self.effective_kernel(ctx);
        let maps = attention_forward(&kernel, qfm, &self.rpn_head)?;
        let anchors = generate_anchors(&self.anchors, qfm.height(), qfm.width());
        Ok((maps, anchors))
    }

    /// Full forward: proposals, region features, relation scoring, patch-head
    /// box refinement, suppression, thresholding. The support context can be
    /// precomputed once and reused across queries.
    pub fn detect(
        &self,
        query: &Tensor,
        ctx: &SupportContext,
        category: &str,
        options: &DetectOptions,
    ) -> Result<Vec<Detection>, ModelError> {
        let qfm = self.backbone.extract(query, "query")?;
        let (dets, _) = self.detect_on_features(
            &qfm,
            query.dim(1) as f64,
            query.dim(0) as f64,
            ctx,
            category,
            options,
        )?;
        Ok(dets)
    }

    /// [`FewShotDetector::detect`] on already-extracted query features, also
    /// returning the proposals the detections came from. Query features only
    /// depend on the query, so one extraction serves every category branch.
    pub fn detect_on_features(
        &self,
        qfm: &FeatureMap,
        img_w: f64,
        img_h: f64,
        ctx: &SupportContext,
        category: &str,
        options: &DetectOptions,
    ) -> Result<(Vec<Detection>, Vec<Proposal>), ModelError> {
        let (maps, anchors) = self.rpn_maps(qfm, ctx)?;
        let proposals = select_proposals(&maps, &anchors, img_w, img_h, &self.rpn)?;

        let mut raw: Vec<Detection> = Vec::with_capacity(proposals.len());
        for prop in &proposals {
            if prop.bbox.area() <= 0.0 {
                continue;
            }
            let f_q = match extract_region_feature(qfm, &prop.bbox) {
                Ok(r) => r,
                Err(FeatureError::BoxOutsideImage) => continue,
                Err(e) => return Err(e.into()),
            };
            let scores = self.detector.forward(&f_q.data, &ctx.region.data)?;
            let refined = decode_box(&prop.bbox, &scores.patch_box_deltas)?.clip(img_w, img_h);
            raw.push(Detection { bbox: refined, score: scores.probability(), category: category.to_string() });
        }

        let mut kept: Vec<Detection> = match options.soft_nms {
            Some((sigma, floor)) => soft_nms(&raw, sigma, floor),
            None => nms(&raw, options.nms_threshold).into_iter().map(|i| raw[i].clone()).collect(),
        };
        kept.retain(|d| d.score >= options.score_threshold);
        Ok((kept, proposals))
    }

    /// Stable parameter walk used by the optimizer and the checkpoint format.
    /// The callback receives (name, parameter, frozen).
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param, bool)) {
        let frozen = self.frozen_flags();
        for (i, conv) in self.backbone.blocks.iter_mut().enumerate() {
            f(&alloc::format!("backbone.block{i}.w"), &mut conv.w, frozen[i]);
            f(&alloc::format!("backbone.block{i}.b"), &mut conv.b, frozen[i]);
        }
        f("rpn.conv.w", &mut self.rpn_head.conv.w, false);
        f("rpn.conv.b", &mut self.rpn_head.conv.b, false);
        f("rpn.objectness.w", &mut self.rpn_head.objectness.w, false);
        f("rpn.objectness.b", &mut self.rpn_head.objectness.b, false);
        f("rpn.regression.w", &mut self.rpn_head.regression.w, false);
        f("rpn.regression.b", &mut self.rpn_head.regression.b, false);
        f("detector.global.fc1.w", &mut self.detector.global.fc1.w, false);
        f("detector.global.fc1.b", &mut self.detector.global.fc1.b, false);
        f("detector.global.fc2.w", &mut self.detector.global.fc2.w, false);
        f("detector.global.fc2.b", &mut self.detector.global.fc2.b, false);
        f("detector.global.fc3.w", &mut self.detector.global.fc3.w, false);
        f("detector.global.fc3.b", &mut self.detector.global.fc3.b, false);
        f("detector.local.conv.w", &mut self.detector.local.conv.w, false);
        f("detector.local.conv.b", &mut self.detector.local.conv.b, false);
        f("detector.local.fc.w", &mut self.detector.local.fc.w, false);
        f("detector.local.fc.b", &mut self.detector.local.fc.b, false);
        f("detector.patch.conv1.w", &mut self.detector.patch.conv1.w, false);
        f("detector.patch.conv1.b", &mut self.detector.patch.conv1.b, false);
        f("detector.patch.conv2.w", &mut self.detector.patch.conv2.w, false);
        f("detector.patch.conv2.b", &mut self.detector.patch.conv2.b, false);
        f("detector.patch.conv3.w", &mut self.detector.patch.conv3.w, false);
        f("detector.patch.conv3.b", &mut self.detector.patch.conv3.b, false);
        f("detector.patch.fc_cls.w", &mut self.detector.patch.fc_cls.w, false);
        f("detector.patch.fc_cls.b", &mut self.detector.patch.fc_cls.b, false);
        f("detector.patch.fc_box.w", &mut self.detector.patch.fc_box.w, false);
        f("detector.patch.fc_box.b", &mut self.detector.patch.fc_box.b, false);
    }

    fn frozen_flags(&self) -> Vec<bool> {
        self.backbone.frozen.clone()
    }

    /// Named snapshot of all parameter tensors (checkpoint contents).
    pub fn named_tensors(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, param, _| out.push((name.to_string(), param.value.clone())));
        out
    }

    /// Load a named snapshot; unknown or missing names are reported.
    pub fn load_named_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<(), String> {
        let mut missing: Vec<String> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        self.for_each_param(&mut |name, param, _| {
            names.push(name.to_string());
            match tensors.iter().find(|(n, _)| n == name) {
                Some((_, t)) if t.shape() == param.value.shape() => param.value = t.clone(),
                Some((_, t)) => missing.push(alloc::format!("{name}: shape {:?} != {:?}", t.shape(), param.value.shape())),
                None => missing.push(alloc::format!("{name}: absent")),
            }
        });
        for (n, _) in tensors {
            if !names.iter().any(|m| m == n) {
                missing.push(alloc::format!("{n}: unknown parameter"));
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(missing.join("; "))
        }
    }

    pub fn zero_grad(&mut self) {
        self.backbone.zero_grad();
        self.rpn_head.zero_grad();
        self.detector.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image(size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[size, size, 3], (0..size * size * 3).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn precomputed_support_reused_gives_identical_detections() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let model = FewShotDetector::new(&ModelConfig::toy(), &mut rng);
        let crops = alloc::vec![test_image(64, 1), test_image(64, 2)];
        let ctx = model.precompute_support(&crops).unwrap();
        let query = test_image(96, 3);
        let opts = DetectOptions { score_threshold: 0.0, ..Default::default() };
        let a = model.detect(&query, &ctx, "c", &opts).unwrap();
        let ctx2 = model.precompute_support(&crops).unwrap();
        let b = model.detect(&query, &ctx2, "c", &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn n_way_identical_supports_identical_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let model = FewShotDetector::new(&ModelConfig::toy(), &mut rng);
        let crops = alloc::vec![test_image(64, 7)];
        let branches = model
            .extend_to_n_way(&[
                ("a".to_string(), crops.clone()),
                ("b".to_string(), crops.clone()),
            ])
            .unwrap();
        assert_eq!(branches[0].1.kernel.data.data(), branches[1].1.kernel.data.data());
        assert_eq!(branches[0].1.region.data.data(), branches[1].1.region.data.data());
    }

    #[test]
    fn n_way_empty_category_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let model = FewShotDetector::new(&ModelConfig::toy(), &mut rng);
        let err = model.extend_to_n_way(&[("empty".to_string(), alloc::vec![])]).unwrap_err();
        assert!(matches!(err, ModelError::EmptySupportSet { .. }));
    }

    #[test]
    fn k_shot_fusion_order_invariant_detections() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let model = FewShotDetector::new(&ModelConfig::toy(), &mut rng);
        let crops = alloc::vec![test_image(64, 10), test_image(64, 11), test_image(64, 12)];
        let reversed: Vec<Tensor> = crops.iter().rev().cloned().collect();
        let query = test_image(96, 13);
        let opts = DetectOptions { score_threshold: 0.0, ..Default::default() };
        let a = model
            .detect(&query, &model.precompute_support(&crops).unwrap(), "c", &opts)
            .unwrap();
        let b = model
            .detect(&query, &model.precompute_support(&reversed).unwrap(), "c", &opts)
            .unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x.score - y.score).abs() < 1e-9);
            assert!((x.bbox.x1 - y.bbox.x1).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_disabled_uses_ones_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut config = ModelConfig::toy();
        config.attention_enabled = false;
        let model = FewShotDetector::new(&config, &mut rng);
        let ctx = model.precompute_support(&[test_image(64, 20)]).unwrap();
        let k = model.effective_kernel(&ctx);
        assert!(k.data.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn parameter_walk_is_stable_and_complete() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let mut model = FewShotDetector::new(&ModelConfig::toy(), &mut rng);
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 8 + 6 + 6 + 4 + 10);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "parameter names must be unique");

        // round-trip
        let snapshot = model.named_tensors();
        let mut rng2 = ChaCha8Rng::seed_from_u64(999);
        let mut other = FewShotDetector::new(&ModelConfig::toy(), &mut rng2);
        other.load_named_tensors(&snapshot).unwrap();
        assert_eq!(other.named_tensors(), snapshot);
    }
}
