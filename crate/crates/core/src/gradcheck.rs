//! Central finite-difference verification of every analytic backward pass.
//!
//! Each scenario builds a random toy-sized instance, computes analytic
//! gradients, re-derives them numerically with central differences at
//! `EPS = 1e-3`, and returns the worst relative error across all checked
//! coordinates. Instances are resampled until every ReLU pre-activation and
//! bilinear sample point sits safely away from its kink, otherwise the
//! numeric derivative straddles a non-differentiable point and the
//! comparison is meaningless.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, ConvBlockConfig};
use crate::detector::{detector_box_loss, matching_loss, matching_loss_grads, GlobalHead, LocalHead, PatchHead};
use crate::feature::{
    depthwise_cross_correlation, depthwise_cross_correlation_backward, roi_align, roi_align_backward,
    FeatureMap, SupportKernel,
};
use crate::geometry::BBox;
use crate::math;
use crate::rpn::{
    attention_backward, attention_forward, attention_forward_cached, rpn_loss_with_grads, AnchorLabel,
    RpnHead, RpnMaps, RpnTargets,
};
use crate::tensor::Tensor;

/// Central-difference step, fixed by the verification protocol.
pub const EPS: f64 = 1e-3;

/// Acceptance tolerance on the relative error.
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(1, |a|, |n|)`, the comparison metric for one coordinate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    math::abs(analytic - numeric) / math::max(1.0, math::max(math::abs(analytic), math::abs(numeric)))
}

/// Worst [`relative_error`] across two same-shape gradient tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, math::max)
}

/// Numeric gradient of `loss` w.r.t. every entry of `t`.
pub fn fd_tensor(t: &mut Tensor, mut loss: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros_like(t);
    for i in 0..t.len() {
        let orig = t.data()[i];
        t.data_mut()[i] = orig + EPS;
        let lp = loss(t);
        t.data_mut()[i] = orig - EPS;
        let lm = loss(t);
        t.data_mut()[i] = orig;
        g.data_mut()[i] = (lp - lm) / (2.0 * EPS);
    }
    g
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
}

fn projection_loss(t: &Tensor, weights: &Tensor) -> f64 {
    t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Depth-wise cross-correlation w.r.t. both the kernel and the map.
pub fn corr_gradients(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = rng.random_range(1..=3usize);
    let h = rng.random_range(s..=6usize);
    let w = rng.random_range(s..=6usize);
    let c = rng.random_range(1..=3usize);
    let mut kernel_t = random_tensor(&[s, s, c], &mut rng);
    let mut map = random_tensor(&[h, w, c], &mut rng);
    let proj = random_tensor(&[h - s + 1, w - s + 1, c], &mut rng);

    let kernel = SupportKernel::new(kernel_t.clone());
    let (dk, dm) = depthwise_cross_correlation_backward(&kernel, &map, &proj);

    let proj_ref = &proj;
    let map_snapshot = map.clone();
    let nk = fd_tensor(&mut kernel_t, |k| {
        let g = depthwise_cross_correlation(&SupportKernel::new(k.clone()), &map_snapshot).unwrap();
        projection_loss(&g.data, proj_ref)
    });
    let kernel_snapshot = SupportKernel::new(kernel_t.clone());
    let nm = fd_tensor(&mut map, |m| {
        let g = depthwise_cross_correlation(&kernel_snapshot, m).unwrap();
        projection_loss(&g.data, proj_ref)
    });
    math::max(max_relative_error(&dk, &nk), max_relative_error(&dm, &nm))
}

/// True when every 2x2 bilinear sample point of the box lies strictly inside
/// the map and away from integer grid lines.
fn region_samples_safe(fm: &FeatureMap, bbox: &BBox, out_size: usize, samples: usize) -> bool {
    let stride = fm.stride as f64;
    let margin = 0.05;
    for (start, bin, limit) in [
        (bbox.y1 / stride - 0.5, (bbox.y2 - bbox.y1) / stride / out_size as f64, fm.height()),
        (bbox.x1 / stride - 0.5, (bbox.x2 - bbox.x1) / stride / out_size as f64, fm.width()),
    ] {
        for o in 0..out_size {
            for s in 0..samples {
                let p = start + (o as f64 + (s as f64 + 0.5) / samples as f64) * bin;
                if p < margin || p > (limit - 1) as f64 - margin {
                    return false;
                }
                let frac = p - math::floor(p);
                if frac < margin || frac > 1.0 - margin {
                    return false;
                }
            }
        }
    }
    true
}

/// Bilinear region feature extraction w.r.t. the feature map.
pub fn region_feature_gradients(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_range(9..=12usize);
    let w = rng.random_range(9..=12usize);
    let c = 2;
    let stride = 2usize;
    let mut map = random_tensor(&[h, w, c], &mut rng);
    let fm = FeatureMap::new(map.clone(), stride, "g");
    let bbox = loop {
        let x1 = rng.random::<f64>() * (w as f64 * stride as f64 * 0.3) + 2.0;
        let y1 = rng.random::<f64>() * (h as f64 * stride as f64 * 0.3) + 2.0;
        let bw = 6.0 + rng.random::<f64>() * (w as f64 * stride as f64 * 0.4);
        let bh = 6.0 + rng.random::<f64>() * (h as f64 * stride as f64 * 0.4);
        let candidate = BBox::new(x1, y1, x1 + bw, y1 + bh);
        if region_samples_safe(&fm, &candidate, 7, 2) {
            break candidate;
        }
    };
    let proj = random_tensor(&[7, 7, c], &mut rng);

    let analytic = roi_align_backward(&fm, &bbox, 7, 2, &proj);
    let numeric = fd_tensor(&mut map, |m| {
        let f = FeatureMap::new(m.clone(), stride, "g");
        let r = roi_align(&f, &bbox, 7, 2).unwrap();
        projection_loss(&r.data, &proj)
    });
    max_relative_error(&analytic, &numeric)
}

fn relu_margins_ok(preacts: &[&Tensor]) -> bool {
    preacts.iter().all(|t| t.data().iter().all(|&z| math::abs(z) > 10.0 * EPS))
}

/// The tiny extractor's convolution parameters.
pub fn extractor_gradients(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = BackboneConfig {
        in_channels: 2,
        blocks: alloc::vec![
            ConvBlockConfig { out_channels: 3, stride: 2, frozen: false },
            ConvBlockConfig { out_channels: 4, stride: 1, frozen: false },
        ],
    };
    let (mut backbone, image) = loop {
        let bb = Backbone::new(&config, &mut rng);
        let img = random_tensor(&[6, 6, 2], &mut rng);
        // Re-run the forward manually to inspect pre-activations.
        let z1 = bb.blocks[0].forward(&img);
        let a1 = crate::nn::relu(&z1);
        let z2 = bb.blocks[1].forward(&a1);
        if relu_margins_ok(&[&z1, &z2]) {
            break (bb, img);
        }
    };
    let fm_shape = backbone.extract(&image, "g").unwrap().data.shape().to_vec();
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let proj = random_tensor(&fm_shape, &mut rng2);

    backbone.zero_grad();
    let (fm, cache) = backbone.extract_cached(&image, "g").unwrap();
    let _ = fm;
    backbone.backward(&cache, &proj);

    let mut worst: f64 = 0.0;
    for bi in 0..backbone.blocks.len() {
        for which in 0..2 {
            let analytic = if which == 0 {
                backbone.blocks[bi].w.grad.clone()
            } else {
                backbone.blocks[bi].b.grad.clone()
            };
            let mut values = if which == 0 {
                backbone.blocks[bi].w.value.clone()
            } else {
                backbone.blocks[bi].b.value.clone()
            };
            let numeric = fd_tensor(&mut values, |v| {
                let mut probe = backbone.clone();
                if which == 0 {
                    probe.blocks[bi].w.value = v.clone();
                } else {
                    probe.blocks[bi].b.value = v.clone();
                }
                let out = probe.extract(&image, "g").unwrap();
                projection_loss(&out.data, &proj)
            });
            worst = math::max(worst, max_relative_error(&analytic, &numeric));
        }
    }
    worst
}

/// Attention RPN forward w.r.t. support kernel, query features and all head
/// weights.
pub fn attention_gradients(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 3;
    let a = 2;
    let h = rng.random_range(3..=5usize);
    let w = rng.random_range(3..=5usize);
    // Resample until the head's ReLU pre-activations clear the kink margin.
    let (mut head, mut kernel_t, mut query_t) = loop {
        let head = RpnHead::new(c, c, a, &mut rng);
        let kernel_t = random_tensor(&[1, 1, c], &mut rng);
        let query_t = random_tensor(&[h, w, c], &mut rng);
        let attention = depthwise_cross_correlation(&SupportKernel::new(kernel_t.clone()), &query_t).unwrap();
        let mid_pre = head.conv.forward(&attention.data);
        if relu_margins_ok(&[&mid_pre]) {
            break (head, kernel_t, query_t);
        }
    };
    let proj_obj = random_tensor(&[h, w, a], &mut rng);
    let proj_reg = random_tensor(&[h, w, 4 * a], &mut rng);

    let loss = |head: &RpnHead, kernel: &Tensor, query: &Tensor| -> f64 {
        let maps = attention_forward(
            &SupportKernel::new(kernel.clone()),
            &FeatureMap::new(query.clone(), 8, "g"),
            head,
        )
        .unwrap();
        projection_loss(&maps.objectness, &proj_obj) + projection_loss(&maps.deltas, &proj_reg)
    };

    head.zero_grad();
    let kernel = SupportKernel::new(kernel_t.clone());
    let query = FeatureMap::new(query_t.clone(), 8, "g");
    let (_, cache) = attention_forward_cached(&kernel, &query, &head).unwrap();
    let (dk, dq) = attention_backward(&mut head, &kernel, &query, &cache, &proj_obj, &proj_reg);

    let mut worst = {
        let head_ref = &head;
        let q_snap = query_t.clone();
        let nk = fd_tensor(&mut kernel_t, |k| loss(head_ref, k, &q_snap));
        let k_snap = kernel_t.clone();
        let nq = fd_tensor(&mut query_t, |q| loss(head_ref, &k_snap, q));
        math::max(max_relative_error(&dk, &nk), max_relative_error(&dq, &nq))
    };

    // Head parameters: conv, objectness, regression weights and biases.
    for which in 0..6 {
        let (analytic, mut values) = {
            let conv = match which / 2 {
                0 => &head.conv,
                1 => &head.objectness,
                _ => &head.regression,
            };
            if which % 2 == 0 {
                (conv.w.grad.clone(), conv.w.value.clone())
            } else {
                (conv.b.grad.clone(), conv.b.value.clone())
            }
        };
        let numeric = fd_tensor(&mut values, |v| {
            let mut probe = head.clone();
            let conv = match which / 2 {
                0 => &mut probe.conv,
                1 => &mut probe.objectness,
                _ => &mut probe.regression,
            };
            if which % 2 == 0 {
                conv.w.value = v.clone();
            } else {
                conv.b.value = v.clone();
            }
            loss(&probe, &kernel_t, &query_t)
        });
        worst = math::max(worst, max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Global-relation head w.r.t. both inputs and all fc parameters.
pub fn global_head_gradients(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 2;
    let (mut head, mut f_q, mut f_s) = loop {
        let head = GlobalHead::new(c, &mut rng);
        let f_q = random_tensor(&[7, 7, c], &mut rng);
        let f_s = random_tensor(&[7, 7, c], &mut rng);
        let (z1, z2) = head.preactivations(&f_q, &f_s);
        let z1 = Tensor::new(&[z1.len()], z1);
        let z2 = Tensor::new(&[z2.len()], z2);
        if relu_margins_ok(&[&z1, &z2]) {
            break (head, f_q, f_s);
        }
    };

    head.zero_grad();
    let (_, cache) = head.forward(&f_q, &f_s);
    let (dq, ds) = head.backward(&f_q, &f_s, &cache, 1.0);

    let loss = |head: &GlobalHead, q: &Tensor, s: &Tensor| head.forward(q, s).0;
    let mut worst = {
        let h = &head;
        let s_snap = f_s.clone();
        let nq = fd_tensor(&mut f_q, |q| loss(h, q, &s_snap));
        let q_snap = f_q.clone();
        let ns = fd_tensor(&mut f_s, |s| loss(h, &q_snap, s));
        math::max(max_relative_error(&dq, &nq), max_relative_error(&ds, &ns))
    };
    for which in 0..6 {
        let (analytic, mut values) = {
            let fc = match which / 2 {
                0 => &head.fc1,
                1 => &head.fc2,
                _ => &head.fc3,
            };
            if which % 2 == 0 {
                (fc.w.grad.clone(), fc.w.value.clone())
            } else {
                (fc.b.grad.clone(), fc.b.value.clone())
            }
        };
        let numeric = fd_tensor(&mut values, |v| {
            let mut probe = head.clone();
            let fc = match which / 2 {
                0 => &mut probe.fc1,
                1 => &mut probe.fc2,
                _ => &mut probe.fc3,
            };
            if which % 2 == 0 {
                fc.w.value = v.clone();
            } else {
                fc.b.value = v.clone();
            }
            loss(&probe, &f_q, &f_s)
        });
        worst = math::max(worst, max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Local-relation head w.r.t. both inputs, the shared convolution and the fc.
pub fn local_head_gradients(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 2;
    let mut head = LocalHead::new(c, &mut rng);
    let mut f_q = random_tensor(&[7, 7, c], &mut rng);
    let mut f_s = random_tensor(&[7, 7, c], &mut rng);

    head.zero_grad();
    let (_, cache) = head.forward(&f_q, &f_s);
    let (dq, ds) = head.backward(&f_q, &f_s, &cache, 1.0);

    let loss = |head: &LocalHead, q: &Tensor, s: &Tensor| head.forward(q, s).0;
    let mut worst = {
        let h = &head;
        let s_snap = f_s.clone();
        let nq = fd_tensor(&mut f_q, |q| loss(h, q, &s_snap));
        let q_snap = f_q.clone();
        let ns = fd_tensor(&mut f_s, |s| loss(h, &q_snap, s));
        math::max(max_relative_error(&dq, &nq), max_relative_error(&ds, &ns))
    };
    for which in 0..4 {
        let (analytic, mut values) = match which {
            0 => (head.conv.w.grad.clone(), head.conv.w.value.clone()),
            1 => (head.conv.b.grad.clone(), head.conv.b.value.clone()),
            2 => (head.fc.w.grad.clone(), head.fc.w.value.clone()),
            _ => (head.fc.b.grad.clone(), head.fc.b.value.clone()),
        };
        let numeric = fd_tensor(&mut values, |v| {
            let mut probe = head.clone();
            match which {
                0 => probe.conv.w.value = v.clone(),
                1 => probe.conv.b.value = v.clone(),
                2 => probe.fc.w.value = v.clone(),
                _ => probe.fc.b.value = v.clone(),
            }
            loss(&probe, &f_q, &f_s)
        });
        worst = math::max(worst, max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Patch-relation head (toy widths) w.r.t. inputs and every parameter; the
/// loss mixes the logit and a projection of the box deltas.
pub fn patch_head_gradients(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 2;
    let (mut head, mut f_q, mut f_s) = loop {
        let head = PatchHead::new(c, 3, 4, &mut rng);
        let f_q = random_tensor(&[7, 7, c], &mut rng);
        let f_s = random_tensor(&[7, 7, c], &mut rng);
        let (_, _, cache) = head.forward(&f_q, &f_s);
        if relu_margins_ok(&[&cache.z1, &cache.z2, &cache.z3]) {
            break (head, f_q, f_s);
        }
    };
    let dw: [f64; 4] = core::array::from_fn(|_| rng.random::<f64>() - 0.5);

    head.zero_grad();
    let (_, _, cache) = head.forward(&f_q, &f_s);
    let (dq, ds) = head.backward(&cache, 1.0, &dw);

    let loss = |head: &PatchHead, q: &Tensor, s: &Tensor| {
        let (logit, deltas, _) = head.forward(q, s);
        logit + deltas.iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut worst = {
        let h = &head;
        let s_snap = f_s.clone();
        let nq = fd_tensor(&mut f_q, |q| loss(h, q, &s_snap));
        let q_snap = f_q.clone();
        let ns = fd_tensor(&mut f_s, |s| loss(h, &q_snap, s));
        math::max(max_relative_error(&dq, &nq), max_relative_error(&ds, &ns))
    };
    for which in 0..10 {
        let (analytic, mut values) = {
            let (w, b) = match which / 2 {
                0 => (&head.conv1.w, &head.conv1.b),
                1 => (&head.conv2.w, &head.conv2.b),
                2 => (&head.conv3.w, &head.conv3.b),
                3 => (&head.fc_cls.w, &head.fc_cls.b),
                _ => (&head.fc_box.w, &head.fc_box.b),
            };
            if which % 2 == 0 {
                (w.grad.clone(), w.value.clone())
            } else {
                (b.grad.clone(), b.value.clone())
            }
        };
        let numeric = fd_tensor(&mut values, |v| {
            let mut probe = head.clone();
            {
                let (w, b) = match which / 2 {
                    0 => (&mut probe.conv1.w, &mut probe.conv1.b),
                    1 => (&mut probe.conv2.w, &mut probe.conv2.b),
                    2 => (&mut probe.conv3.w, &mut probe.conv3.b),
                    3 => (&mut probe.fc_cls.w, &mut probe.fc_cls.b),
                    _ => (&mut probe.fc_box.w, &mut probe.fc_box.b),
                };
                if which % 2 == 0 {
                    w.value = v.clone();
                } else {
                    b.value = v.clone();
                }
            }
            loss(&probe, &f_q, &f_s)
        });
        worst = math::max(worst, max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Matching loss gradient w.r.t. the fused logits.
pub fn matching_loss_gradients(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=12usize);
    let mut logits = Tensor::new(&[n], (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect());
    let labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() > 0.5).collect();
    let analytic = Tensor::new(&[n], matching_loss_grads(logits.data(), &labels));
    let numeric = fd_tensor(&mut logits, |z| matching_loss(z.data(), &labels).unwrap());
    max_relative_error(&analytic, &numeric)
}

/// Box refinement loss gradient w.r.t. the predicted deltas; residuals are
/// kept away from the smooth-L1 kink at |x| = 1.
pub fn box_loss_gradients(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8usize);
    let mut deltas = Tensor::zeros(&[n, 4]);
    let mut targets = alloc::vec![[0.0; 4]; n];
    let mut fg = Vec::with_capacity(n);
    for i in 0..n {
        fg.push(rng.random::<f64>() > 0.3 || i == 0);
        for k in 0..4 {
            let t = rng.random::<f64>() - 0.5;
            targets[i][k] = t;
            let resid = loop {
                let r = rng.random::<f64>() * 3.0 - 1.5;
                if math::abs(math::abs(r) - 1.0) > 0.05 {
                    break r;
                }
            };
            *t_at(&mut deltas, i, k) = t + resid;
        }
    }
    let d_arr: Vec<[f64; 4]> = (0..n)
        .map(|i| core::array::from_fn(|k| deltas.at2(i, k)))
        .collect();
    let (_, grads) = detector_box_loss(&d_arr, &targets, &fg);
    let mut analytic = Tensor::zeros(&[n, 4]);
    for i in 0..n {
        for k in 0..4 {
            *t_at(&mut analytic, i, k) = grads[i][k];
        }
    }
    let numeric = fd_tensor(&mut deltas, |d| {
        let arr: Vec<[f64; 4]> = (0..n).map(|i| core::array::from_fn(|k| d.at2(i, k))).collect();
        detector_box_loss(&arr, &targets, &fg).0.value
    });
    max_relative_error(&analytic, &numeric)
}

fn t_at(t: &mut Tensor, r: usize, c: usize) -> &mut f64 {
    let i = t.idx2(r, c);
    &mut t.data_mut()[i]
}

/// RPN loss gradients w.r.t. the objectness and delta maps.
pub fn rpn_loss_gradients(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = 2;
    let (h, w) = (rng.random_range(2..=3usize), rng.random_range(2..=3usize));
    let n = h * w * a;
    let mut obj = random_tensor(&[h, w, a], &mut rng);
    let mut reg = random_tensor(&[h, w, 4 * a], &mut rng);
    let mut labels = Vec::with_capacity(n);
    let mut deltas = alloc::vec![[0.0; 4]; n];
    for i in 0..n {
        labels.push(match rng.random_range(0..3u8) {
            0 => AnchorLabel::Positive,
            1 => AnchorLabel::Negative,
            _ => AnchorLabel::Ignore,
        });
        for k in 0..4 {
            // keep residuals off the smooth-L1 kink
            deltas[i][k] = loop {
                let t = rng.random::<f64>() * 2.0 - 1.0;
                let cell = i / a;
                let ai = i % a;
                let resid = reg.data()[cell * 4 * a + ai * 4 + k] - t;
                if math::abs(math::abs(resid) - 1.0) > 0.05 {
                    break t;
                }
            };
        }
    }
    if !labels.iter().any(|&l| l != AnchorLabel::Ignore) {
        labels[0] = AnchorLabel::Negative;
    }
    let n_pos = labels.iter().filter(|&&l| l == AnchorLabel::Positive).count();
    let n_samp = labels.iter().filter(|&&l| l != AnchorLabel::Ignore).count();
    let targets = RpnTargets { labels, deltas, num_positive: n_pos, num_sampled: n_samp };

    let maps = RpnMaps { objectness: obj.clone(), deltas: reg.clone() };
    let (_, d_obj, d_reg) = rpn_loss_with_grads(&maps, &targets, true);

    let reg_snap = reg.clone();
    let n_obj = fd_tensor(&mut obj, |o| {
        let m = RpnMaps { objectness: o.clone(), deltas: reg_snap.clone() };
        let (l, _, _) = rpn_loss_with_grads(&m, &targets, false);
        l.total()
    });
    let obj_snap = obj.clone();
    let n_reg = fd_tensor(&mut reg, |r| {
        let m = RpnMaps { objectness: obj_snap.clone(), deltas: r.clone() };
        let (l, _, _) = rpn_loss_with_grads(&m, &targets, false);
        l.total()
    });
    math::max(max_relative_error(&d_obj, &n_obj), max_relative_error(&d_reg, &n_reg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_scenarios_pass_at_tolerance() {
        for seed in 0..3 {
            assert!(corr_gradients(seed) <= TOLERANCE, "corr seed {seed}");
            assert!(region_feature_gradients(seed) <= TOLERANCE, "region seed {seed}");
            assert!(extractor_gradients(seed) <= TOLERANCE, "extractor seed {seed}");
            assert!(attention_gradients(seed) <= TOLERANCE, "attention seed {seed}");
            assert!(global_head_gradients(seed) <= TOLERANCE, "global seed {seed}");
            assert!(local_head_gradients(seed) <= TOLERANCE, "local seed {seed}");
            assert!(patch_head_gradients(seed) <= TOLERANCE, "patch seed {seed}");
            assert!(matching_loss_gradients(seed) <= TOLERANCE, "matching seed {seed}");
            assert!(box_loss_gradients(seed) <= TOLERANCE, "box seed {seed}");
            assert!(rpn_loss_gradients(seed) <= TOLERANCE, "rpn seed {seed}");
        }
    }
}
