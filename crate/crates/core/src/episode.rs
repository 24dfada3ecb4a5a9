//! Episodic N-way K-shot evaluation and the standard full-way protocol.
//!
//! An episode draws N categories, K support instances per category and 10
//! query images per category (every query contains at least one instance of
//! its category). Per-episode detection metrics are computed per category
//! and averaged; episodes aggregate by unweighted mean. Query images are
//! drawn without replacement inside an episode and with replacement across
//! episodes. Evaluation never mutates model weights.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    prepare_query, prepare_support_sized, DataError, DatasetManifest, ImageSource, InstanceRef, QueryResize,
};
use crate::geometry::{
    average_best_overlap, average_precision, coco_average_precision, recall_at_k, BBox, Detection, EvalImage,
};
use crate::model::{DetectOptions, FewShotDetector, ModelError};
use crate::rpn::Proposal;

/// Queries per category in every episode.
pub const QUERIES_PER_CATEGORY: usize = 10;

/// Default number of evaluation episodes.
pub const DEFAULT_EPISODES: usize = 600;

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    Data(DataError),
    Model(ModelError),
    InsufficientData { category: String, detail: &'static str },
    NotEnoughCategories { needed: usize, available: usize },
    EmptyReport,
}

impl core::fmt::Display for EvalError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EvalError::Data(e) => write!(f, "{e}"),
            EvalError::Model(e) => write!(f, "{e}"),
            EvalError::InsufficientData { category, detail } => {
                write!(f, "category {category:?}: {detail}")
            }
            EvalError::NotEnoughCategories { needed, available } => {
                write!(f, "episode needs {needed} eligible categories, found {available}")
            }
            EvalError::EmptyReport => write!(f, "cannot aggregate zero episodes"),
        }
    }
}

impl core::error::Error for EvalError {}

impl From<DataError> for EvalError {
    fn from(e: DataError) -> Self {
        EvalError::Data(e)
    }
}
impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

/// One N-way K-shot evaluation episode: per-category support instances and
/// query record indices.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub categories: Vec<String>,
    /// Per category, K (record, box) support instances.
    pub supports: Vec<Vec<InstanceRef>>,
    /// Per category, 10 query record indices.
    pub queries: Vec<Vec<usize>>,
}

impl EpisodeSpec {
    pub fn support_count(&self) -> usize {
        self.supports.iter().map(Vec::len).sum()
    }

    pub fn query_count(&self) -> usize {
        self.queries.iter().map(Vec::len).sum()
    }
}

/// Draw `k` distinct elements.
fn choose_k<R: Rng, T: Copy>(items: &[T], k: usize, rng: &mut R) -> Vec<T> {
    let mut pool: Vec<T> = items.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(pool.len()) {
        let i = rng.random_range(0..pool.len());
        out.push(pool.swap_remove(i));
    }
    out
}

/// Sample `n_episodes` episodes uniformly at random; deterministic given the
/// rng state. A category is eligible when it has at least `shots` support
/// instances and at least [`QUERIES_PER_CATEGORY`] images containing it.
pub fn sample_episodes(
    manifest: &DatasetManifest,
    ways: usize,
    shots: usize,
    n_episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpisodeSpec>, EvalError> {
    let mut eligible: Vec<&String> = Vec::new();
    let mut deficient: Option<(String, &'static str)> = None;
    for cat in &manifest.categories {
        let n_instances = manifest.instances_of(cat).len();
        let n_images = manifest.images_with(cat).len();
        if n_instances < shots {
            deficient.get_or_insert((cat.clone(), "not enough support instances"));
        } else if n_images < QUERIES_PER_CATEGORY {
            deficient.get_or_insert((cat.clone(), "not enough eligible query images"));
        } else {
            eligible.push(cat);
        }
    }
    if eligible.len() < ways {
        if let Some((category, detail)) = deficient {
            return Err(EvalError::InsufficientData { category, detail });
        }
        return Err(EvalError::NotEnoughCategories { needed: ways, available: eligible.len() });
    }

    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let cats = choose_k(&eligible.iter().map(|c| c.as_str()).collect::<Vec<_>>(), ways, rng);
        let mut supports = Vec::with_capacity(ways);
        let mut queries = Vec::with_capacity(ways);
        for cat in &cats {
            supports.push(choose_k(&manifest.instances_of(cat), shots, rng));
            queries.push(choose_k(&manifest.images_with(cat), QUERIES_PER_CATEGORY, rng));
        }
        episodes.push(EpisodeSpec {
            ways,
            shots,
            categories: cats.into_iter().map(|c| c.to_string()).collect(),
            supports,
            queries,
        });
    }
    Ok(episodes)
}

/// Detection metrics of one episode (or one full-way run).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpisodeMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub recall100: f64,
    pub abo: f64,
}

/// Aggregate over episodes: unweighted means with standard deviations.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub episodes: usize,
    pub seed: u64,
    pub mean: EpisodeMetrics,
    pub std: EpisodeMetrics,
    pub per_episode: Vec<EpisodeMetrics>,
}

/// What one (query, category) branch produced: final detections and the raw
/// proposal stage, both in original image coordinates.
#[derive(Debug, Clone, Default)]
pub struct BranchOutputs {
    pub detections: Vec<Detection>,
    pub proposals: Vec<Detection>,
}

/// Per-category metric assembly from an arbitrary forward callback, so
/// oracle models can exercise the protocol without network weights. The
/// callback receives the query record index and the branch category.
pub fn evaluate_episode_with<F>(
    manifest: &DatasetManifest,
    episode: &EpisodeSpec,
    mut forward: F,
    proposal_k: usize,
    proposal_iou: f64,
) -> Result<EpisodeMetrics, EvalError>
where
    F: FnMut(usize, &str) -> Result<BranchOutputs, EvalError>,
{
    // The episode's query set: every sampled query record, deduplicated.
    let mut query_records: Vec<usize> = episode.queries.iter().flatten().copied().collect();
    query_records.sort_unstable();
    query_records.dedup();

    let mut sum = EpisodeMetrics { ap: 0.0, ap50: 0.0, ap75: 0.0, recall100: 0.0, abo: 0.0 };
    for cat in &episode.categories {
        let mut det_images = Vec::with_capacity(query_records.len());
        let mut prop_images = Vec::with_capacity(query_records.len());
        for &ri in &query_records {
            let gt: Vec<BBox> = manifest.records[ri]
                .boxes
                .iter()
                .filter(|b| &b.category == cat)
                .map(|b| b.bbox)
                .collect();
            let out = forward(ri, cat)?;
            det_images.push(EvalImage { detections: out.detections, ground_truth: gt.clone() });
            prop_images.push(EvalImage { detections: out.proposals, ground_truth: gt });
        }
        sum.ap += coco_average_precision(&det_images);
        sum.ap50 += average_precision(&det_images, 0.5);
        sum.ap75 += average_precision(&det_images, 0.75);
        sum.recall100 += recall_at_k(&prop_images, proposal_k, proposal_iou);
        sum.abo += average_best_overlap(&prop_images);
    }
    let n = episode.categories.len() as f64;
    Ok(EpisodeMetrics {
        ap: sum.ap / n,
        ap50: sum.ap50 / n,
        ap75: sum.ap75 / n,
        recall100: sum.recall100 / n,
        abo: sum.abo / n,
    })
}

/// Preprocessing knobs for the evaluation forward path.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalPreprocess {
    pub support_size: usize,
    pub query_resize: QueryResize,
}

impl Default for EvalPreprocess {
    fn default() -> Self {
        Self { support_size: crate::data::SUPPORT_SIZE, query_resize: QueryResize::default() }
    }
}

fn support_crops<S: ImageSource>(
    manifest: &DatasetManifest,
    images: &S,
    refs: &[InstanceRef],
    prep: &EvalPreprocess,
) -> Result<Vec<crate::tensor::Tensor>, EvalError> {
    let mut out = Vec::with_capacity(refs.len());
    for &(ri, bi) in refs {
        let rec = &manifest.records[ri];
        let img = images.load(&rec.image)?;
        out.push(prepare_support_sized(&img, &rec.boxes[bi].bbox, prep.support_size)?.image);
    }
    Ok(out)
}

/// Evaluate one episode with the real model: fused K-shot support features
/// per category, detection per (query, category) branch, boxes mapped back
/// to original image coordinates.
pub fn evaluate_episode<S: ImageSource>(
    model: &FewShotDetector,
    manifest: &DatasetManifest,
    images: &S,
    episode: &EpisodeSpec,
    prep: &EvalPreprocess,
    options: &DetectOptions,
) -> Result<EpisodeMetrics, EvalError> {
    let mut contexts = Vec::with_capacity(episode.categories.len());
    for (ci, cat) in episode.categories.iter().enumerate() {
        let crops = support_crops(manifest, images, &episode.supports[ci], prep)?;
        contexts.push((cat.clone(), model.precompute_support(&crops)?));
    }

    // Query features depend only on the query; cache them across branches.
    let mut feature_cache: alloc::collections::BTreeMap<usize, (crate::feature::FeatureMap, f64, f64, f64)> =
        alloc::collections::BTreeMap::new();
    let forward = |ri: usize, cat: &str| -> Result<BranchOutputs, EvalError> {
        if !feature_cache.contains_key(&ri) {
            let img = images.load(&manifest.records[ri].image)?;
            let (query, scale) = prepare_query(&img, &prep.query_resize)?;
            let qfm = model
                .backbone
                .extract(&query, manifest.records[ri].image.clone())
                .map_err(ModelError::from)?;
            feature_cache.insert(ri, (qfm, scale, query.dim(1) as f64, query.dim(0) as f64));
        }
        let (qfm, scale, img_w, img_h) = feature_cache.get(&ri).expect("cached features");
        let ctx = &contexts.iter().find(|(c, _)| c == cat).expect("category context").1;
        let (dets, props) = model.detect_on_features(qfm, *img_w, *img_h, ctx, cat, options)?;
        Ok(BranchOutputs {
            detections: dets
                .into_iter()
                .map(|mut d| {
                    d.bbox = d.bbox.scaled(1.0 / scale);
                    d
                })
                .collect(),
            proposals: props
                .into_iter()
                .map(|Proposal { bbox, objectness }| Detection {
                    bbox: bbox.scaled(1.0 / scale),
                    score: objectness,
                    category: cat.to_string(),
                })
                .collect(),
        })
    };

    evaluate_episode_with(manifest, episode, forward, model.rpn.post_nms_k, 0.5)
}

/// Unweighted mean and standard deviation over per-episode metrics.
pub fn aggregate(per_episode: &[EpisodeMetrics], seed: u64) -> Result<EvalReport, EvalError> {
    if per_episode.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let n = per_episode.len() as f64;
    let mean_of = |f: &dyn Fn(&EpisodeMetrics) -> f64| per_episode.iter().map(|m| f(m)).sum::<f64>() / n;
    let mean = EpisodeMetrics {
        ap: mean_of(&|m| m.ap),
        ap50: mean_of(&|m| m.ap50),
        ap75: mean_of(&|m| m.ap75),
        recall100: mean_of(&|m| m.recall100),
        abo: mean_of(&|m| m.abo),
    };
    let std_of = |f: &dyn Fn(&EpisodeMetrics) -> f64, mu: f64| {
        crate::math::sqrt(per_episode.iter().map(|m| (f(m) - mu) * (f(m) - mu)).sum::<f64>() / n)
    };
    let std = EpisodeMetrics {
        ap: std_of(&|m| m.ap, mean.ap),
        ap50: std_of(&|m| m.ap50, mean.ap50),
        ap75: std_of(&|m| m.ap75, mean.ap75),
        recall100: std_of(&|m| m.recall100, mean.recall100),
        abo: std_of(&|m| m.abo, mean.abo),
    };
    Ok(EvalReport { episodes: per_episode.len(), seed, mean, std, per_episode: per_episode.to_vec() })
}

/// Full-way N-shot evaluation: every category with enough supports is
/// evaluated over the entire test set; support features are fixed in advance
/// by the seed and precomputed once. Categories lacking supports are
/// excluded and reported.
pub fn full_way_evaluate<S: ImageSource>(
    model: &FewShotDetector,
    manifest: &DatasetManifest,
    images: &S,
    shots: usize,
    prep: &EvalPreprocess,
    options: &DetectOptions,
    seed: u64,
) -> Result<(EvalReport, Vec<String>), EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut excluded = Vec::new();
    let mut evaluated = Vec::new();
    for cat in &manifest.categories {
        let instances = manifest.instances_of(cat);
        if instances.len() < shots {
            excluded.push(cat.clone());
            continue;
        }
        let refs = choose_k(&instances, shots, &mut rng);
        let crops = support_crops(manifest, images, &refs, prep)?;
        let ctx = model.precompute_support(&crops)?;

        let mut det_images = Vec::with_capacity(manifest.records.len());
        let mut prop_images = Vec::with_capacity(manifest.records.len());
        for rec in &manifest.records {
            let gt: Vec<BBox> = rec.boxes.iter().filter(|b| &b.category == cat).map(|b| b.bbox).collect();
            let img = images.load(&rec.image)?;
            let (query, scale) = prepare_query(&img, &prep.query_resize)?;
            let qfm = model.backbone.extract(&query, rec.image.clone()).map_err(ModelError::from)?;
            let (dets, props) = model.detect_on_features(
                &qfm,
                query.dim(1) as f64,
                query.dim(0) as f64,
                &ctx,
                cat,
                options,
            )?;
            let dets: Vec<Detection> = dets
                .into_iter()
                .map(|mut d| {
                    d.bbox = d.bbox.scaled(1.0 / scale);
                    d
                })
                .collect();
            let props: Vec<Detection> = props
                .into_iter()
                .map(|p| Detection { bbox: p.bbox.scaled(1.0 / scale), score: p.objectness, category: cat.clone() })
                .collect();
            det_images.push(EvalImage { detections: dets, ground_truth: gt.clone() });
            prop_images.push(EvalImage { detections: props, ground_truth: gt });
        }
        evaluated.push(EpisodeMetrics {
            ap: coco_average_precision(&det_images),
            ap50: average_precision(&det_images, 0.5),
            ap75: average_precision(&det_images, 0.75),
            recall100: recall_at_k(&prop_images, model.rpn.post_nms_k, 0.5),
            abo: average_best_overlap(&prop_images),
        });
    }
    if evaluated.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    Ok((aggregate(&evaluated, seed)?, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_dataset, ShapeKind, SynthSpec};
    use alloc::vec;

    fn five_way_manifest() -> DatasetManifest {
        let spec = SynthSpec {
            train_images: 0,
            test_images: 160,
            image_size: 64,
            test_categories: vec![
                ShapeKind::Square,
                ShapeKind::Disc,
                ShapeKind::Triangle,
                ShapeKind::Cross,
                ShapeKind::Ring,
            ],
            train_categories: vec![ShapeKind::Saltire],
            min_objects: 2,
            max_objects: 3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (_, test) = generate_synthetic_dataset(&spec, &mut rng).unwrap();
        test.manifest
    }

    #[test]
    fn episode_counts_5way_5shot() {
        let manifest = five_way_manifest();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = sample_episodes(&manifest, 5, 5, 20, &mut rng).unwrap();
        assert_eq!(eps.len(), 20);
        for ep in &eps {
            assert_eq!(ep.support_count(), 25);
            assert_eq!(ep.query_count(), 50);
            // every query contains at least one instance of its category
            for (ci, cat) in ep.categories.iter().enumerate() {
                for &ri in &ep.queries[ci] {
                    assert!(manifest.records[ri].boxes.iter().any(|b| &b.category == cat));
                }
            }
        }
    }

    #[test]
    fn episode_counts_1way_1shot() {
        let manifest = five_way_manifest();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let eps = sample_episodes(&manifest, 1, 1, 3, &mut rng).unwrap();
        for ep in &eps {
            assert_eq!(ep.support_count(), 1);
            assert_eq!(ep.query_count(), 10);
        }
    }

    #[test]
    fn episode_sampling_deterministic() {
        let manifest = five_way_manifest();
        let a = sample_episodes(&manifest, 3, 2, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_episodes(&manifest, 3, 2, 10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn episode_sampling_insufficient_names_category() {
        let manifest = five_way_manifest();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // ask for more shots than any category has instances
        let err = sample_episodes(&manifest, 5, 100_000, 1, &mut rng).unwrap_err();
        assert!(matches!(err, EvalError::InsufficientData { .. }));
    }

    #[test]
    fn oracle_model_yields_perfect_ap() {
        let manifest = five_way_manifest();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let episode = &sample_episodes(&manifest, 2, 1, 1, &mut rng).unwrap()[0];
        // oracle: emit exact ground truth with score 1
        let metrics = evaluate_episode_with(
            &manifest,
            episode,
            |ri, cat| {
                let exact: Vec<Detection> = manifest.records[ri]
                    .boxes
                    .iter()
                    .filter(|b| b.category == cat)
                    .map(|b| Detection { bbox: b.bbox, score: 1.0, category: cat.to_string() })
                    .collect();
                Ok(BranchOutputs { detections: exact.clone(), proposals: exact })
            },
            100,
            0.5,
        )
        .unwrap();
        assert!((metrics.ap50 - 1.0).abs() < 1e-12);
        assert!((metrics.ap75 - 1.0).abs() < 1e-12);
        assert!((metrics.recall100 - 1.0).abs() < 1e-12);
        assert!((metrics.abo - 1.0).abs() < 1e-12);
    }

    #[test]
    fn silent_model_yields_zero_ap() {
        let manifest = five_way_manifest();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let episode = &sample_episodes(&manifest, 2, 1, 1, &mut rng).unwrap()[0];
        let metrics =
            evaluate_episode_with(&manifest, episode, |_, _| Ok(BranchOutputs::default()), 100, 0.5).unwrap();
        assert_eq!(metrics.ap50, 0.0);
        assert_eq!(metrics.abo, 0.0);
    }

    #[test]
    fn episode_metrics_match_geometry_oracle() {
        // 2-way toy episode with hand-built detections: one exact hit and one
        // miss per category; AP50 agrees with direct per-category evaluation.
        let manifest = five_way_manifest();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let episode = &sample_episodes(&manifest, 2, 1, 1, &mut rng).unwrap()[0];
        let hit_first = |ri: usize, cat: &str| -> Vec<Detection> {
            manifest.records[ri]
                .boxes
                .iter()
                .filter(|b| b.category == cat)
                .take(1)
                .map(|b| Detection { bbox: b.bbox, score: 0.9, category: cat.to_string() })
                .collect()
        };
        let metrics = evaluate_episode_with(
            &manifest,
            episode,
            |ri, cat| Ok(BranchOutputs { detections: hit_first(ri, cat), proposals: hit_first(ri, cat) }),
            100,
            0.5,
        )
        .unwrap();

        // independent recomputation per category
        let mut query_records: Vec<usize> = episode.queries.iter().flatten().copied().collect();
        query_records.sort_unstable();
        query_records.dedup();
        let mut want = 0.0;
        for cat in &episode.categories {
            let images: Vec<EvalImage> = query_records
                .iter()
                .map(|&ri| EvalImage {
                    detections: hit_first(ri, cat),
                    ground_truth: manifest.records[ri]
                        .boxes
                        .iter()
                        .filter(|b| &b.category == cat)
                        .map(|b| b.bbox)
                        .collect(),
                })
                .collect();
            want += average_precision(&images, 0.5);
        }
        want /= episode.categories.len() as f64;
        assert!((metrics.ap50 - want).abs() < 1e-12);
    }

    #[test]
    fn aggregate_mean_and_bounds() {
        let m = |v: f64| EpisodeMetrics { ap: v, ap50: v, ap75: v, recall100: v, abo: v };
        let report = aggregate(&[m(0.4), m(0.6)], 7).unwrap();
        assert!((report.mean.ap50 - 0.5).abs() < 1e-12);
        assert_eq!(report.episodes, 2);
        // aggregate lies within [min, max]
        assert!(report.mean.ap50 >= 0.4 && report.mean.ap50 <= 0.6);
        assert!((report.std.ap50 - 0.1).abs() < 1e-12);

        let single = aggregate(&[m(0.25)], 1).unwrap();
        assert_eq!(single.mean.ap, 0.25);
        assert!(aggregate(&[], 0).is_err());
    }

    #[test]
    fn aggregate_matches_streaming_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let metrics: Vec<EpisodeMetrics> = (0..600)
            .map(|_| {
                let v: f64 = rng.random();
                EpisodeMetrics { ap: v, ap50: v, ap75: v, recall100: v, abo: v }
            })
            .collect();
        let report = aggregate(&metrics, 0).unwrap();
        let mut sum = 0.0;
        for m in &metrics {
            sum += m.ap50;
        }
        assert!((report.mean.ap50 - sum / 600.0).abs() < 1e-12);
    }
}
