//! Brute-force reference implementations used only to verify the fast
//! paths. Each oracle recomputes its quantity by direct enumeration and
//! stays independent of the implementation it checks: the AP oracle
//! rematches every score prefix from scratch and scans all points per
//! recall grid value instead of building a precision envelope; the
//! correlation oracle is a literal five-loop transcription of the defining
//! equation.

use alloc::vec::Vec;

use crate::geometry::{iou, EvalImage};
use crate::tensor::Tensor;

/// Average precision by exhaustive prefix re-matching and direct 101-point
/// grid evaluation.
pub fn brute_force_average_precision(images: &[EvalImage], iou_threshold: f64) -> f64 {
    let total_gt: usize = images.iter().map(|im| im.ground_truth.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
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
    if pooled.is_empty() {
        return 0.0;
    }

    // For every prefix length, rebuild the greedy matching from scratch.
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(pooled.len());
    for k in 1..=pooled.len() {
        let mut matched: Vec<Vec<bool>> =
            images.iter().map(|im| alloc::vec![false; im.ground_truth.len()]).collect();
        let mut tp = 0usize;
        for &(ii, di, _) in &pooled[..k] {
            let det = &images[ii].detections[di];
            let mut best = 0.0;
            let mut best_gt = None;
            for (gi, gt) in images[ii].ground_truth.iter().enumerate() {
                if matched[ii][gi] {
                    continue;
                }
                let ov = iou(&det.bbox, gt);
                if ov > best {
                    best = ov;
                    best_gt = Some(gi);
                }
            }
            if best >= iou_threshold {
                if let Some(gi) = best_gt {
                    matched[ii][gi] = true;
                    tp += 1;
                }
            }
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / k as f64));
    }

    let mut sum = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        let mut best = 0.0;
        for &(rec, prec) in &points {
            if rec >= r && prec > best {
                best = prec;
            }
        }
        sum += best;
    }
    sum / 101.0
}

/// Literal transcription of the depth-wise correlation equation:
/// `G[h,w,c] = sum_{i,j} X[i,j,c] * Y[h+i, w+j, c]`.
pub fn brute_force_depthwise_correlation(x: &Tensor, y: &Tensor) -> Tensor {
    let s = x.dim(0);
    let (h, w, c) = (y.dim(0), y.dim(1), y.dim(2));
    let mut g = Tensor::zeros(&[h - s + 1, w - s + 1, c]);
    for gh in 0..h - s + 1 {
        for gw in 0..w - s + 1 {
            for ch in 0..c {
                let mut acc = 0.0;
                for i in 0..s {
                    for j in 0..s {
                        acc += x.at3(i, j, ch) * y.at3(gh + i, gw + j, ch);
                    }
                }
                *g.at3_mut(gh, gw, ch) = acc;
            }
        }
    }
    g
}
