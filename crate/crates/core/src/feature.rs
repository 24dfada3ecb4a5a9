//! Feature-map primitives shared by both attention stages: depth-wise
//! cross-correlation, average pooling, bilinear region feature extraction and
//! K-shot feature fusion.

use alloc::string::String;

use crate::geometry::BBox;
use crate::math;
use crate::tensor::Tensor;

/// Spatial size of extracted region features.
pub const REGION_SIZE: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureError {
    ChannelMismatch { kernel: usize, map: usize },
    KernelTooLarge { kernel: usize, map_h: usize, map_w: usize },
    ShapeMismatch,
    EmptyFusion,
    BoxOutsideImage,
}

impl core::fmt::Display for FeatureError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            FeatureError::ChannelMismatch { kernel, map } => {
                write!(f, "channel mismatch: kernel has {kernel}, map has {map}")
            }
            FeatureError::KernelTooLarge { kernel, map_h, map_w } => {
                write!(f, "kernel size {kernel} exceeds map extent {map_h}x{map_w}")
            }
            FeatureError::ShapeMismatch => write!(f, "feature shapes do not match"),
            FeatureError::EmptyFusion => write!(f, "cannot fuse an empty feature list"),
            FeatureError::BoxOutsideImage => write!(f, "box does not intersect the image"),
        }
    }
}

impl core::error::Error for FeatureError {}

/// Dense `(h, w, c)` features with the pixel stride of one feature cell and
/// the identifier of the image they came from.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stride: usize,
    pub source: String,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize, source: impl Into<String>) -> Self {
        assert_eq!(data.shape().len(), 3);
        assert!(stride >= 1);
        Self { data, stride, source: source.into() }
    }

    pub fn height(&self) -> usize {
        self.data.dim(0)
    }

    pub fn width(&self) -> usize {
        self.data.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.data.dim(2)
    }
}

/// `(s, s, c)` correlation kernel built from support features.
#[derive(Debug, Clone)]
pub struct SupportKernel {
    pub data: Tensor,
}

impl SupportKernel {
    pub fn new(data: Tensor) -> Self {
        assert_eq!(data.shape().len(), 3);
        assert_eq!(data.dim(0), data.dim(1), "kernel must be square");
        Self { data }
    }

    pub fn size(&self) -> usize {
        self.data.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.data.dim(2)
    }

    /// All-ones kernel; correlation with it is the identity for S = 1, which
    /// realizes the no-attention RPN baseline.
    pub fn ones(size: usize, channels: usize) -> Self {
        Self { data: Tensor::full(&[size, size, channels], 1.0) }
    }
}

/// Valid (unpadded) depth-wise correlation output, `(h-s+1, w-s+1, c)`.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub data: Tensor,
}

/// `7x7xC` feature pooled from a proposal region.
#[derive(Debug, Clone)]
pub struct RegionFeature {
    pub data: Tensor,
    pub source: BBox,
}

/// Depth-wise cross-correlation: each output channel is the sliding inner
/// product of the kernel's channel with the same channel of the map; channels
/// never mix. `G[h,w,c] = sum_{i,j} X[i,j,c] * Y[h+i, w+j, c]`.
pub fn depthwise_cross_correlation(kernel: &SupportKernel, map: &Tensor) -> Result<AttentionMap, FeatureError> {
    let s = kernel.size();
    let (h, w, c) = (map.dim(0), map.dim(1), map.dim(2));
    if kernel.channels() != c {
        return Err(FeatureError::ChannelMismatch { kernel: kernel.channels(), map: c });
    }
    if s > h || s > w {
        return Err(FeatureError::KernelTooLarge { kernel: s, map_h: h, map_w: w });
    }
    let (oh, ow) = (h - s + 1, w - s + 1);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = out.idx3(oy, ox, 0);
            for ky in 0..s {
                for kx in 0..s {
                    let kbase = kernel.data.idx3(ky, kx, 0);
                    let ybase = map.idx3(oy + ky, ox + kx, 0);
                    for ci in 0..c {
                        out.data_mut()[obase + ci] += kernel.data.data()[kbase + ci] * map.data()[ybase + ci];
                    }
                }
            }
        }
    }
    Ok(AttentionMap { data: out })
}

/// Gradients of [`depthwise_cross_correlation`] w.r.t. kernel and map.
pub fn depthwise_cross_correlation_backward(
    kernel: &SupportKernel,
    map: &Tensor,
    dg: &Tensor,
) -> (Tensor, Tensor) {
    let s = kernel.size();
    let c = map.dim(2);
    let mut dk = Tensor::zeros_like(&kernel.data);
    let mut dm = Tensor::zeros_like(map);
    for oy in 0..dg.dim(0) {
        for ox in 0..dg.dim(1) {
            let gbase = dg.idx3(oy, ox, 0);
            for ky in 0..s {
                for kx in 0..s {
                    let kbase = kernel.data.idx3(ky, kx, 0);
                    let ybase = map.idx3(oy + ky, ox + kx, 0);
                    for ci in 0..c {
                        let g = dg.data()[gbase + ci];
                        dk.data_mut()[kbase + ci] += g * map.data()[ybase + ci];
                        dm.data_mut()[ybase + ci] += g * kernel.data.data()[kbase + ci];
                    }
                }
            }
        }
    }
    (dk, dm)
}

/// Per-channel mean over all spatial positions, `(1, 1, c)`.
pub fn global_average_pool(map: &Tensor) -> Tensor {
    let (h, w, c) = (map.dim(0), map.dim(1), map.dim(2));
    let mut out = Tensor::zeros(&[1, 1, c]);
    let norm = 1.0 / (h * w) as f64;
    for y in 0..h {
        for x in 0..w {
            let base = map.idx3(y, x, 0);
            for ci in 0..c {
                out.data_mut()[ci] += map.data()[base + ci] * norm;
            }
        }
    }
    out
}

pub fn global_average_pool_backward(map_shape: &[usize], dy: &Tensor) -> Tensor {
    let (h, w, c) = (map_shape[0], map_shape[1], map_shape[2]);
    let norm = 1.0 / (h * w) as f64;
    let mut dx = Tensor::zeros(map_shape);
    for y in 0..h {
        for x in 0..w {
            let base = ((y * w) + x) * c;
            for ci in 0..c {
                dx.data_mut()[base + ci] = dy.data()[ci] * norm;
            }
        }
    }
    dx
}

#[inline]
fn bilinear_weights(coord: f64, limit: usize) -> (usize, usize, f64) {
    // Clamp into [0, limit-1]; returns (lo, hi, frac of hi).
    let c = math::clamp(coord, 0.0, (limit - 1) as f64);
    let lo = math::floor(c) as usize;
    let hi = if lo + 1 < limit { lo + 1 } else { lo };
    (lo, hi, c - lo as f64)
}

/// Bilinear interpolation of all channels at a continuous feature coordinate.
fn bilinear_sample(map: &Tensor, y: f64, x: f64, out: &mut [f64], scale: f64) {
    let (h, w, c) = (map.dim(0), map.dim(1), map.dim(2));
    let (y0, y1, fy) = bilinear_weights(y, h);
    let (x0, x1, fx) = bilinear_weights(x, w);
    let w00 = (1.0 - fy) * (1.0 - fx) * scale;
    let w01 = (1.0 - fy) * fx * scale;
    let w10 = fy * (1.0 - fx) * scale;
    let w11 = fy * fx * scale;
    let b00 = map.idx3(y0, x0, 0);
    let b01 = map.idx3(y0, x1, 0);
    let b10 = map.idx3(y1, x0, 0);
    let b11 = map.idx3(y1, x1, 0);
    let d = map.data();
    for ci in 0..c {
        out[ci] += w00 * d[b00 + ci] + w01 * d[b01 + ci] + w10 * d[b10 + ci] + w11 * d[b11 + ci];
    }
}

fn bilinear_sample_backward(dm: &mut Tensor, y: f64, x: f64, dout: &[f64], scale: f64) {
    let (h, w, c) = (dm.dim(0), dm.dim(1), dm.dim(2));
    let (y0, y1, fy) = bilinear_weights(y, h);
    let (x0, x1, fx) = bilinear_weights(x, w);
    let w00 = (1.0 - fy) * (1.0 - fx) * scale;
    let w01 = (1.0 - fy) * fx * scale;
    let w10 = fy * (1.0 - fx) * scale;
    let w11 = fy * fx * scale;
    let b00 = dm.idx3(y0, x0, 0);
    let b01 = dm.idx3(y0, x1, 0);
    let b10 = dm.idx3(y1, x0, 0);
    let b11 = dm.idx3(y1, x1, 0);
    let d = dm.data_mut();
    for ci in 0..c {
        let g = dout[ci];
        d[b00 + ci] += w00 * g;
        d[b01 + ci] += w01 * g;
        d[b10 + ci] += w10 * g;
        d[b11 + ci] += w11 * g;
    }
}

/// Sample-point layout shared by the forward and backward region passes.
fn region_sample_points(
    fm: &FeatureMap,
    bbox: &BBox,
    out_size: usize,
    samples: usize,
) -> (f64, f64, f64, f64) {
    // Pixel coordinate p maps to continuous feature coordinate p/stride - 0.5
    // so that integral feature coordinates sit at cell centers.
    let stride = fm.stride as f64;
    let y1 = bbox.y1 / stride - 0.5;
    let x1 = bbox.x1 / stride - 0.5;
    let bin_h = (bbox.y2 - bbox.y1) / stride / out_size as f64;
    let bin_w = (bbox.x2 - bbox.x1) / stride / out_size as f64;
    let _ = samples;
    (y1, x1, bin_h, bin_w)
}

/// Bilinear region alignment of a pixel-space box onto an
/// `out_size x out_size` grid with `samples x samples` sample points per
/// output cell. Errors if the box does not intersect the image.
pub fn roi_align(
    fm: &FeatureMap,
    bbox: &BBox,
    out_size: usize,
    samples: usize,
) -> Result<RegionFeature, FeatureError> {
    let img_w = (fm.width() * fm.stride) as f64;
    let img_h = (fm.height() * fm.stride) as f64;
    if bbox.x2 <= 0.0 || bbox.y2 <= 0.0 || bbox.x1 >= img_w || bbox.y1 >= img_h {
        return Err(FeatureError::BoxOutsideImage);
    }
    let c = fm.channels();
    let (y1, x1, bin_h, bin_w) = region_sample_points(fm, bbox, out_size, samples);
    let norm = 1.0 / (samples * samples) as f64;
    let mut out = Tensor::zeros(&[out_size, out_size, c]);
    for oy in 0..out_size {
        for ox in 0..out_size {
            let base = out.idx3(oy, ox, 0);
            for sy in 0..samples {
                let py = y1 + (oy as f64 + (sy as f64 + 0.5) / samples as f64) * bin_h;
                for sx in 0..samples {
                    let px = x1 + (ox as f64 + (sx as f64 + 0.5) / samples as f64) * bin_w;
                    let (head, tail) = out.data_mut().split_at_mut(base);
                    let _ = head;
                    bilinear_sample(&fm.data, py, px, &mut tail[..c], norm);
                }
            }
        }
    }
    Ok(RegionFeature { data: out, source: *bbox })
}

/// Gradient of [`roi_align`] w.r.t. the feature map (boxes are constants).
pub fn roi_align_backward(
    fm: &FeatureMap,
    bbox: &BBox,
    out_size: usize,
    samples: usize,
    dy: &Tensor,
) -> Tensor {
    let c = fm.channels();
    let (y1, x1, bin_h, bin_w) = region_sample_points(fm, bbox, out_size, samples);
    let norm = 1.0 / (samples * samples) as f64;
    let mut dm = Tensor::zeros_like(&fm.data);
    for oy in 0..out_size {
        for ox in 0..out_size {
            let base = dy.idx3(oy, ox, 0);
            let g = &dy.data()[base..base + c];
            for sy in 0..samples {
                let py = y1 + (oy as f64 + (sy as f64 + 0.5) / samples as f64) * bin_h;
                for sx in 0..samples {
                    let px = x1 + (ox as f64 + (sx as f64 + 0.5) / samples as f64) * bin_w;
                    bilinear_sample_backward(&mut dm, py, px, g, norm);
                }
            }
        }
    }
    dm
}

/// Extract the `7x7xC` region feature for a proposal (2x2 sample points per
/// cell).
pub fn extract_region_feature(fm: &FeatureMap, bbox: &BBox) -> Result<RegionFeature, FeatureError> {
    roi_align(fm, bbox, REGION_SIZE, 2)
}

/// Elementwise mean of K same-shape support features.
pub fn fuse_k_shot_features(features: &[Tensor]) -> Result<Tensor, FeatureError> {
    let first = features.first().ok_or(FeatureError::EmptyFusion)?;
    if features.iter().any(|f| f.shape() != first.shape()) {
        return Err(FeatureError::ShapeMismatch);
    }
    let mut out = Tensor::zeros_like(first);
    let norm = 1.0 / features.len() as f64;
    for f in features {
        out.add_scaled(f, norm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape, data)
    }

    /// Triple-nested-loop transcription of the correlation equation; the
    /// independent oracle for the implementation.
    pub fn corr_oracle(x: &Tensor, y: &Tensor) -> Tensor {
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

    #[test]
    fn corr_s1_ones_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = random_tensor(&[4, 5, 3], &mut rng);
        let k = SupportKernel::ones(1, 3);
        let g = depthwise_cross_correlation(&k, &y).unwrap();
        assert_eq!(g.data.data(), y.data());
    }

    #[test]
    fn corr_s1_scalar_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = random_tensor(&[3, 3, 2], &mut rng);
        let k = SupportKernel::new(Tensor::full(&[1, 1, 2], 2.0));
        let g = depthwise_cross_correlation(&k, &y).unwrap();
        for (a, b) in g.data.data().iter().zip(y.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn corr_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&[3, 3, 2], &mut rng);
        let y = random_tensor(&[5, 5, 2], &mut rng);
        let got = depthwise_cross_correlation(&SupportKernel::new(x.clone()), &y).unwrap();
        let want = corr_oracle(&x, &y);
        assert_eq!(got.data.shape(), &[3, 3, 2]);
        for (a, b) in got.data.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn corr_errors() {
        let k = SupportKernel::ones(3, 2);
        let y = Tensor::zeros(&[2, 5, 2]);
        assert_eq!(
            depthwise_cross_correlation(&k, &y).unwrap_err(),
            FeatureError::KernelTooLarge { kernel: 3, map_h: 2, map_w: 5 }
        );
        let y = Tensor::zeros(&[5, 5, 4]);
        assert_eq!(
            depthwise_cross_correlation(&k, &y).unwrap_err(),
            FeatureError::ChannelMismatch { kernel: 2, map: 4 }
        );
    }

    #[test]
    fn corr_linear_in_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = SupportKernel::new(random_tensor(&[2, 2, 3], &mut rng));
        let y1 = random_tensor(&[4, 4, 3], &mut rng);
        let y2 = random_tensor(&[4, 4, 3], &mut rng);
        let (a, b) = (0.7, -1.3);
        let mut combined = Tensor::zeros_like(&y1);
        combined.add_scaled(&y1, a);
        combined.add_scaled(&y2, b);
        let lhs = depthwise_cross_correlation(&x, &combined).unwrap();
        let g1 = depthwise_cross_correlation(&x, &y1).unwrap();
        let g2 = depthwise_cross_correlation(&x, &y2).unwrap();
        for i in 0..lhs.data.len() {
            let rhs = a * g1.data.data()[i] + b * g2.data.data()[i];
            assert!((lhs.data.data()[i] - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn corr_channel_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = random_tensor(&[2, 2, 3], &mut rng);
        let y = random_tensor(&[4, 4, 3], &mut rng);
        let full = depthwise_cross_correlation(&SupportKernel::new(x.clone()), &y).unwrap();
        // zero channel 1 of the kernel
        for i in 0..2 {
            for j in 0..2 {
                *x.at3_mut(i, j, 1) = 0.0;
            }
        }
        let zeroed = depthwise_cross_correlation(&SupportKernel::new(x), &y).unwrap();
        for gh in 0..3 {
            for gw in 0..3 {
                assert_eq!(zeroed.data.at3(gh, gw, 1), 0.0);
                assert_eq!(zeroed.data.at3(gh, gw, 0), full.data.at3(gh, gw, 0));
                assert_eq!(zeroed.data.at3(gh, gw, 2), full.data.at3(gh, gw, 2));
            }
        }
    }

    #[test]
    fn gap_constant_and_mean() {
        let t = Tensor::full(&[3, 4, 2], 1.5);
        let p = global_average_pool(&t);
        assert_eq!(p.shape(), &[1, 1, 2]);
        assert!((p.data()[0] - 1.5).abs() < 1e-15);
        let t = Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        assert!((global_average_pool(&t).data()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn gap_matches_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = random_tensor(&[5, 3, 4], &mut rng);
        let p = global_average_pool(&t);
        for ci in 0..4 {
            let mut sum = 0.0;
            for y in 0..5 {
                for x in 0..3 {
                    sum += t.at3(y, x, ci);
                }
            }
            assert!((p.data()[ci] - sum / 15.0).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_align_constant_map() {
        let fm = FeatureMap::new(Tensor::full(&[6, 6, 2], 3.25), 4, "img");
        let rf = extract_region_feature(&fm, &BBox::new(2.0, 2.0, 20.0, 18.0)).unwrap();
        assert_eq!(rf.data.shape(), &[7, 7, 2]);
        assert!(rf.data.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn roi_align_full_map_identity_at_cell_centers() {
        // With one sample per cell, a full-extent box on a 7x7 stride-1 map
        // samples exactly at cell centers and reproduces the input.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = random_tensor(&[7, 7, 3], &mut rng);
        let fm = FeatureMap::new(t.clone(), 1, "img");
        let rf = roi_align(&fm, &BBox::new(0.0, 0.0, 7.0, 7.0), 7, 1).unwrap();
        for (a, b) in rf.data.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_align_matches_dense_bilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let t = random_tensor(&[6, 8, 2], &mut rng);
            let fm = FeatureMap::new(t.clone(), 2, "img");
            let x1 = rng.random::<f64>() * 6.0;
            let y1 = rng.random::<f64>() * 5.0;
            let bbox = BBox::new(x1, y1, x1 + 2.0 + rng.random::<f64>() * 7.0, y1 + 2.0 + rng.random::<f64>() * 5.0);
            let got = roi_align(&fm, &bbox, 7, 2).unwrap();
            // independent per-sample-point bilinear evaluation
            for oy in 0..7 {
                for ox in 0..7 {
                    for ci in 0..2 {
                        let mut acc = 0.0;
                        for sy in 0..2 {
                            for sx in 0..2 {
                                let py = bbox.y1 / 2.0 - 0.5
                                    + (oy as f64 + (sy as f64 + 0.5) / 2.0) * ((bbox.y2 - bbox.y1) / 2.0 / 7.0);
                                let px = bbox.x1 / 2.0 - 0.5
                                    + (ox as f64 + (sx as f64 + 0.5) / 2.0) * ((bbox.x2 - bbox.x1) / 2.0 / 7.0);
                                let cy = py.clamp(0.0, 5.0);
                                let cx = px.clamp(0.0, 7.0);
                                let y0 = cy.floor() as usize;
                                let x0 = cx.floor() as usize;
                                let y1i = (y0 + 1).min(5);
                                let x1i = (x0 + 1).min(7);
                                let fy = cy - y0 as f64;
                                let fx = cx - x0 as f64;
                                acc += (1.0 - fy) * (1.0 - fx) * t.at3(y0, x0, ci)
                                    + (1.0 - fy) * fx * t.at3(y0, x1i, ci)
                                    + fy * (1.0 - fx) * t.at3(y1i, x0, ci)
                                    + fy * fx * t.at3(y1i, x1i, ci);
                            }
                        }
                        acc /= 4.0;
                        assert!((got.data.at3(oy, ox, ci) - acc).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn roi_align_box_outside_errors() {
        let fm = FeatureMap::new(Tensor::zeros(&[4, 4, 1]), 8, "img");
        let err = extract_region_feature(&fm, &BBox::new(100.0, 100.0, 120.0, 120.0)).unwrap_err();
        assert_eq!(err, FeatureError::BoxOutsideImage);
    }

    #[test]
    fn fusion_identity_symmetry_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let f = random_tensor(&[2, 2, 2], &mut rng);
        let single = fuse_k_shot_features(core::slice::from_ref(&f)).unwrap();
        assert_eq!(single, f);

        let mut neg = f.clone();
        neg.scale(-1.0);
        let zero = fuse_k_shot_features(&[f.clone(), neg]).unwrap();
        assert!(zero.data().iter().all(|&v| v.abs() < 1e-15));

        let fs: Vec<Tensor> = (0..5).map(|_| random_tensor(&[3, 2, 2], &mut rng)).collect();
        let fused = fuse_k_shot_features(&fs).unwrap();
        for i in 0..fused.len() {
            let mean = fs.iter().map(|f| f.data()[i]).sum::<f64>() / 5.0;
            assert!((fused.data()[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_errors() {
        assert_eq!(fuse_k_shot_features(&[]).unwrap_err(), FeatureError::EmptyFusion);
        let a = Tensor::zeros(&[2, 2, 1]);
        let b = Tensor::zeros(&[2, 3, 1]);
        assert_eq!(fuse_k_shot_features(&[a, b]).unwrap_err(), FeatureError::ShapeMismatch);
    }

    #[test]
    fn fusion_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let fs: Vec<Tensor> = (0..4).map(|_| random_tensor(&[2, 3, 2], &mut rng)).collect();
        let fwd = fuse_k_shot_features(&fs).unwrap();
        let rev: Vec<Tensor> = fs.iter().rev().cloned().collect();
        let bwd = fuse_k_shot_features(&rev).unwrap();
        for (a, b) in fwd.data().iter().zip(bwd.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
