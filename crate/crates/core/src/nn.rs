//! Minimal layer zoo with hand-written forward and backward passes.
//!
//! Every parameter carries its own gradient buffer; `backward` methods
//! accumulate into those buffers and return the gradient w.r.t. the layer
//! input, so models compose by chaining calls in reverse. All passes are
//! plain nested loops over [`Tensor`] data, which at desk scale is fast
//! enough and keeps the arithmetic order deterministic.

use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::tensor::Tensor;

/// A trainable tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros_like(&value);
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Standard normal via Box-Muller.
pub fn sample_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    math::sqrt(-2.0 * math::ln(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

fn he_init<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = math::sqrt(2.0 / fan_in as f64);
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| sample_normal(rng) * std).collect();
    Tensor::new(shape, data)
}

/// 2-D convolution, weights `(kh, kw, c_in, c_out)`, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(kh: usize, kw: usize, c_in: usize, c_out: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = kh * kw * c_in;
        Self {
            w: Param::new(he_init(&[kh, kw, c_in, c_out], fan_in, rng)),
            b: Param::new(Tensor::zeros(&[c_out])),
            stride,
            pad,
        }
    }

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        let kh = self.w.value.dim(0);
        let kw = self.w.value.dim(1);
        let oh = (h + 2 * self.pad - kh) / self.stride + 1;
        let ow = (w + 2 * self.pad - kw) / self.stride + 1;
        (oh, ow)
    }

    /// `x` is `(h, w, c_in)`; requires `h + 2*pad >= kh` (same for width).
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (h, w, c_in) = (x.dim(0), x.dim(1), x.dim(2));
        let (kh, kw) = (self.w.value.dim(0), self.w.value.dim(1));
        let c_out = self.w.value.dim(3);
        assert_eq!(c_in, self.w.value.dim(2), "conv input channel mismatch");
        let (oh, ow) = self.out_shape(h, w);
        let mut out = Tensor::zeros(&[oh, ow, c_out]);
        let wd = self.w.value.data();
        let bd = self.b.value.data();
        for oy in 0..oh {
            for ox in 0..ow {
                let base = out.idx3(oy, ox, 0);
                let acc = &mut out.data_mut()[base..base + c_out];
                acc.copy_from_slice(bd);
                for ky in 0..kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = x.idx3(iy as usize, ix as usize, 0);
                        let xrow = &x.data()[xbase..xbase + c_in];
                        let wbase = ((ky * kw + kx) * c_in) * c_out;
                        for (ci, &xv) in xrow.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &wd[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                            for (co, &wv) in wrow.iter().enumerate() {
                                acc[co] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients, returns gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (h, w, c_in) = (x.dim(0), x.dim(1), x.dim(2));
        let (kh, kw) = (self.w.value.dim(0), self.w.value.dim(1));
        let c_out = self.w.value.dim(3);
        let (oh, ow) = self.out_shape(h, w);
        assert_eq!(dy.shape(), &[oh, ow, c_out], "conv upstream gradient shape mismatch");
        let mut dx = Tensor::zeros_like(x);
        let wd = self.w.value.data();
        for oy in 0..oh {
            for ox in 0..ow {
                let gbase = dy.idx3(oy, ox, 0);
                let g = &dy.data()[gbase..gbase + c_out];
                for (co, &gv) in g.iter().enumerate() {
                    self.b.grad.data_mut()[co] += gv;
                }
                for ky in 0..kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = x.idx3(iy as usize, ix as usize, 0);
                        let wbase = ((ky * kw + kx) * c_in) * c_out;
                        for ci in 0..c_in {
                            let xv = x.data()[xbase + ci];
                            let wrow = &wd[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                            let dwrow = &mut self.w.grad.data_mut()[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                            let mut acc = 0.0;
                            for (co, &gv) in g.iter().enumerate() {
                                acc += wrow[co] * gv;
                                dwrow[co] += xv * gv;
                            }
                            dx.data_mut()[xbase + ci] += acc;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer, weights `(n_in, n_out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        Self {
            w: Param::new(he_init(&[n_in, n_out], n_in, rng)),
            b: Param::new(Tensor::zeros(&[n_out])),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n_in = self.w.value.dim(0);
        let n_out = self.w.value.dim(1);
        assert_eq!(x.len(), n_in, "linear input size mismatch");
        let mut out = self.b.value.data().to_vec();
        let wd = self.w.value.data();
        for (i, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = &wd[i * n_out..(i + 1) * n_out];
            for (o, &wv) in row.iter().enumerate() {
                out[o] += xv * wv;
            }
        }
        out
    }

    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let n_in = self.w.value.dim(0);
        let n_out = self.w.value.dim(1);
        assert_eq!(dy.len(), n_out);
        for (o, &gv) in dy.iter().enumerate() {
            self.b.grad.data_mut()[o] += gv;
        }
        let wd = self.w.value.data();
        let mut dx = alloc::vec![0.0; n_in];
        for i in 0..n_in {
            let xv = x[i];
            let row = &wd[i * n_out..(i + 1) * n_out];
            let drow = &mut self.w.grad.data_mut()[i * n_out..(i + 1) * n_out];
            let mut acc = 0.0;
            for (o, &gv) in dy.iter().enumerate() {
                acc += row[o] * gv;
                drow[o] += xv * gv;
            }
            dx[i] = acc;
        }
        dx
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape(), data)
}

/// Gradient through ReLU given the pre-activation input.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    assert_eq!(x.shape(), dy.shape());
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data)
}

pub fn relu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn relu_vec_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter().zip(dy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

/// Average pooling with square kernel, no padding.
pub fn avg_pool(x: &Tensor, k: usize, stride: usize) -> Tensor {
    let (h, w, c) = (x.dim(0), x.dim(1), x.dim(2));
    assert!(h >= k && w >= k, "avg_pool window larger than input");
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let norm = 1.0 / (k * k) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..k {
                for kx in 0..k {
                    let xbase = x.idx3(oy * stride + ky, ox * stride + kx, 0);
                    let obase = out.idx3(oy, ox, 0);
                    for ci in 0..c {
                        out.data_mut()[obase + ci] += x.data()[xbase + ci] * norm;
                    }
                }
            }
        }
    }
    out
}

pub fn avg_pool_backward(x_shape: &[usize], k: usize, stride: usize, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let c = x_shape[2];
    let norm = 1.0 / (k * k) as f64;
    for oy in 0..dy.dim(0) {
        for ox in 0..dy.dim(1) {
            let gbase = dy.idx3(oy, ox, 0);
            for ky in 0..k {
                for kx in 0..k {
                    let xbase = dx.idx3(oy * stride + ky, ox * stride + kx, 0);
                    for ci in 0..c {
                        dx.data_mut()[xbase + ci] += dy.data()[gbase + ci] * norm;
                    }
                }
            }
        }
    }
    dx
}
