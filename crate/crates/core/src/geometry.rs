//! Box arithmetic, suppression and detection metrics: IoU, greedy NMS,
//! Gaussian soft-NMS, COCO-style AP (101-point interpolation), recall@k and
//! average best overlap.
//!
//! All operations are pure. The ordering rules are fixed so results are
//! deterministic: detections sort by descending score with ties broken by
//! ascending original index.

use alloc::string::String;
use alloc::vec::Vec;

use crate::math;

/// Axis-aligned box in pixel coordinates, origin top-left.
///
/// Valid boxes satisfy `x2 >= x1` and `y2 >= y1`; zero-area boxes are
/// permitted and contribute zero IoU against anything.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn cx(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn cy(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 >= self.x1
            && self.y2 >= self.y1
            && self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
    }

    /// Clip to an image of the given pixel size.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox {
            x1: math::clamp(self.x1, 0.0, width),
            y1: math::clamp(self.y1, 0.0, height),
            x2: math::clamp(self.x2, 0.0, width),
            y2: math::clamp(self.y2, 0.0, height),
        }
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = math::min(self.x2, other.x2) - math::max(self.x1, other.x1);
        let ih = math::min(self.y2, other.y2) - math::max(self.y1, other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }
}

/// Intersection over union. Degenerate (zero-area) boxes contribute 0, which
/// also covers the 0/0 case of two identical degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A scored, categorized detection.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub category: String,
}

/// Ground-truth annotations for one image.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroundTruthSet {
    pub image_id: String,
    pub entries: Vec<(BBox, String)>,
}

/// Detections and ground truth of a single category on a single image; the
/// unit all metric functions consume.
#[derive(Debug, Clone, Default)]
pub struct EvalImage {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<BBox>,
}

/// One metric value, ready to be emitted as a JSON record.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricRecord {
    pub metric: String,
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none"))]
    pub category: Option<String>,
    pub value: f64,
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none"))]
    pub iou_threshold: Option<f64>,
    #[cfg_attr(feature = "serde", serde(skip_serializing_if = "Option::is_none"))]
    pub k: Option<usize>,
}

/// Indices sorted by descending score, ties by ascending index.
fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = scores.enumerate().collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    order.into_iter().map(|(i, _)| i).collect()
}

/// Greedy non-maximum suppression over boxes with parallel scores. Returns
/// kept indices in descending-score order. A box is suppressed iff its IoU
/// with an already-kept box exceeds `iou_threshold`.
pub fn nms_boxes(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let order = score_order(scores.iter().copied());
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&j| iou(&boxes[i], &boxes[j]) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// [`nms_boxes`] over full detections.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_boxes(&boxes, &scores, iou_threshold)
}

/// Gaussian soft-NMS: repeatedly select the current top-scoring detection and
/// decay every remaining score by `exp(-iou^2 / sigma)` against it, dropping
/// detections whose rescored value falls below `score_floor`. Scores never
/// increase. Output is in selection order.
pub fn soft_nms(dets: &[Detection], sigma: f64, score_floor: f64) -> Vec<Detection> {
    assert!(sigma > 0.0, "soft_nms requires sigma > 0");
    let mut remaining: Vec<(usize, f64)> = dets.iter().map(|d| d.score).enumerate().collect();
    let mut out = Vec::with_capacity(dets.len());
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if remaining[i].1 > remaining[best].1 {
                best = i;
            }
        }
        let (idx, score) = remaining.swap_remove(best);
        let mut det = dets[idx].clone();
        det.score = score;
        out.push(det);
        let top = dets[idx].bbox;
        remaining.retain_mut(|(j, s)| {
            let overlap = iou(&top, &dets[*j].bbox);
            *s *= math::exp(-(overlap * overlap) / sigma);
            *s >= score_floor
        });
        // swap_remove disturbs ordering; restore ascending index so the
        // argmax tie-break stays "lowest original index".
        remaining.sort_by_key(|&(j, _)| j);
    }
    out
}

/// Average precision at one IoU threshold with 101-point interpolation.
///
/// Detections are pooled across images, sorted by descending score (ties by
/// image then index), and greedily matched to the unmatched ground-truth box
/// of highest IoU in their image; a match requires IoU >= `iou_threshold`.
/// Returns 0.0 when there is no ground truth.
pub fn average_precision(images: &[EvalImage], iou_threshold: f64) -> f64 {
    let total_gt: usize = images.iter().map(|im| im.ground_truth.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }

    // (image, det index) pooled and score-sorted.
    let mut pooled: Vec<(usize, usize, f64)> = Vec::new();
    for (ii, im) in images.iter().enumerate() {
        for (di, d) in im.detections.iter().enumerate() {
            pooled.push((ii, di, d.score));
        }
    }
    pooled.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut matched: Vec<Vec<bool>> = images.iter().map(|im| alloc::vec![false; im.ground_truth.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(pooled.len()); // (recall, precision)
    for &(ii, di, _) in &pooled {
        let det = &images[ii].detections[di];
        let mut best_gt: Option<usize> = None;
        let mut best_iou = 0.0;
        for (gi, gt) in images[ii].ground_truth.iter().enumerate() {
            if matched[ii][gi] {
                continue;
            }
            let ov = iou(&det.bbox, gt);
            if ov > best_iou {
                best_iou = ov;
                best_gt = Some(gi);
            }
        }
        if best_iou >= iou_threshold {
            if let Some(gi) = best_gt {
                matched[ii][gi] = true;
                tp += 1;
            } else {
                fp += 1;
            }
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    if curve.is_empty() {
        return 0.0;
    }

    // Precision envelope: env[i] = max precision over points with recall >= recall[i].
    let mut env = alloc::vec![0.0; curve.len()];
    let mut running = 0.0;
    for i in (0..curve.len()).rev() {
        running = math::max(running, curve[i].1);
        env[i] = running;
    }

    let mut sum = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        // First point with recall >= r; recall is non-decreasing along the curve.
        let p = curve.iter().position(|&(rec, _)| rec >= r).map_or(0.0, |i| env[i]);
        sum += p;
    }
    sum / 101.0
}

/// Headline AP: mean of [`average_precision`] over IoU 0.50:0.05:0.95.
pub fn coco_average_precision(images: &[EvalImage]) -> f64 {
    let mut sum = 0.0;
    for i in 0..10 {
        sum += average_precision(images, 0.5 + 0.05 * i as f64);
    }
    sum / 10.0
}

/// Fraction of ground-truth boxes matched (IoU >= threshold) by any of the
/// top-k detections of their image. Defined as 1.0 when there is no ground
/// truth.
pub fn recall_at_k(images: &[EvalImage], k: usize, iou_threshold: f64) -> f64 {
    assert!(k >= 1, "recall_at_k requires k >= 1");
    let total_gt: usize = images.iter().map(|im| im.ground_truth.len()).sum();
    if total_gt == 0 {
        return 1.0;
    }
    let mut hit = 0usize;
    for im in images {
        let order = score_order(im.detections.iter().map(|d| d.score));
        let top: Vec<&Detection> = order.iter().take(k).map(|&i| &im.detections[i]).collect();
        for gt in &im.ground_truth {
            if top.iter().any(|d| iou(&d.bbox, gt) >= iou_threshold) {
                hit += 1;
            }
        }
    }
    hit as f64 / total_gt as f64
}

/// Mean over ground-truth boxes of the best IoU achieved by any detection in
/// the same image. 0.0 when there are no detections at all; expects nonempty
/// ground truth (returns 0.0 otherwise).
pub fn average_best_overlap(images: &[EvalImage]) -> f64 {
    let total_gt: usize = images.iter().map(|im| im.ground_truth.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for im in images {
        for gt in &im.ground_truth {
            let best = im
                .detections
                .iter()
                .map(|d| iou(&d.bbox, gt))
                .fold(0.0, math::max);
            sum += best;
        }
    }
    sum / total_gt as f64
}
