//! Finite-difference gradient oracle.
//!
//! Everything here runs in `f64` over straightforward loop implementations
//! that share no code with the `f32` kernels, so agreement between
//! [`central_difference`] and the tape's gradients checks both the backward
//! rules and the forward kernels.
//!
//! Relative error per element is `|a - n| / max(|a|, |n|, floor)` where
//! `floor` is 1% of the largest numeric gradient magnitude; entries far
//! below the gradient's scale are compared absolutely against that floor.

use std::collections::BTreeMap;

mod suite;
pub use suite::{adjoint_suite, composite_suite, op_suite, toy_pair, AdjointReport, OpReport};

use crate::error::{Error, Result};
use crate::nn::{Activation, LayerKind, NetworkInstance, NetworkSpec};
use crate::tensor::{numel, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Plain `f64` array used by the reference implementations.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: &[usize]) -> Self {
        Arr { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }
}

impl From<&Tensor> for Arr {
    fn from(t: &Tensor) -> Self {
        Arr { shape: t.shape().to_vec(), data: t.data().iter().map(|&v| v as f64).collect() }
    }
}

impl Arr {
    /// Round back to an `f32` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| v as f32).collect()).expect("consistent shape")
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for each requested coordinate.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64, coords: &[usize]) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest per-element relative error (see module docs).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn ref_conv2d(x: &Arr, w: &Arr, b: &Arr, stride: usize, pad: usize) -> Arr {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (k, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Arr::zeros(&[n, k, oh, ow]);
    for bi in 0..n {
        for kk in 0..k {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = b.data[kk];
                    for cc in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let i = (oi * stride + ki) as isize - pad as isize;
                                let j = (oj * stride + kj) as isize - pad as isize;
                                if i < 0 || j < 0 || i as usize >= h || j as usize >= wd {
                                    continue;
                                }
                                acc += x.data[((bi * c + cc) * h + i as usize) * wd + j as usize]
                                    * w.data[((kk * c + cc) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    y.data[((bi * k + kk) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    y
}

/// Transposed convolution by direct scatter: each input pixel stamps the
/// kernel onto the output grid.
pub fn ref_conv_transpose2d(x: &Arr, w: &Arr, b: &Arr, stride: usize, pad: usize) -> Arr {
    let (n, k, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (c, kh, kw) = (w.shape[1], w.shape[2], w.shape[3]);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut y = Arr::zeros(&[n, c, oh, ow]);
    for bi in 0..n {
        for cc in 0..c {
            for v in &mut y.data[(bi * c + cc) * oh * ow..(bi * c + cc + 1) * oh * ow] {
                *v = b.data[cc];
            }
        }
        for kk in 0..k {
            for i in 0..h {
                for j in 0..wd {
                    let xv = x.data[((bi * k + kk) * h + i) * wd + j];
                    for cc in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oi = (i * stride + ki) as isize - pad as isize;
                                let oj = (j * stride + kj) as isize - pad as isize;
                                if oi < 0 || oj < 0 || oi as usize >= oh || oj as usize >= ow {
                                    continue;
                                }
                                y.data[((bi * c + cc) * oh + oi as usize) * ow + oj as usize] +=
                                    xv * w.data[((kk * c + cc) * kh + ki) * kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn ref_dense(x: &Arr, w: &Arr, b: &Arr) -> Arr {
    let (n, din) = (x.shape[0], x.shape[1]);
    let dout = w.shape[0];
    let mut y = Arr::zeros(&[n, dout]);
    for i in 0..n {
        for j in 0..dout {
            y.data[i * dout + j] = b.data[j] + (0..din).map(|d| x.data[i * din + d] * w.data[j * din + d]).sum::<f64>();
        }
    }
    y
}

/// Max pooling; also returns the winning index per window so callers can
/// detect when a perturbation changes the selection.
pub fn ref_max_pool(x: &Arr, kernel: usize, stride: usize) -> (Arr, Vec<u32>) {
    let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut y = Arr::zeros(&[n, c, oh, ow]);
    let mut winners = Vec::with_capacity(y.data.len());
    for p in 0..n * c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0);
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let idx = (oi * stride + ki) * w + oj * stride + kj;
                        let v = x.data[p * h * w + idx];
                        if v > best.0 {
                            best = (v, idx);
                        }
                    }
                }
                y.data[(p * oh + oi) * ow + oj] = best.0;
                winners.push(best.1 as u32);
            }
        }
    }
    (y, winners)
}

pub fn ref_activation(x: &Arr, a: Activation, pattern: &mut Vec<u32>) -> Arr {
    let data = x
        .data
        .iter()
        .map(|&v| match a {
            Activation::Relu => {
                pattern.push((v > 0.0) as u32);
                v.max(0.0)
            }
            Activation::LeakyRelu(s) => {
                pattern.push((v > 0.0) as u32);
                if v > 0.0 {
                    v
                } else {
                    s as f64 * v
                }
            }
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        })
        .collect();
    Arr { shape: x.shape.clone(), data }
}

/// `f64` interpreter for a [`NetworkSpec`].
pub struct RefNet<'a> {
    pub spec: &'a NetworkSpec,
    pub params: BTreeMap<String, Arr>,
}

impl<'a> RefNet<'a> {
    pub fn new(net: &'a NetworkInstance) -> Self {
        RefNet { spec: &net.spec, params: net.params.iter().map(|(k, v)| (k.clone(), Arr::from(v))).collect() }
    }

    /// Run layers `0..=last` (all when `None`); returns the output and the
    /// activation pattern (ReLU signs and pooling winners).
    pub fn forward(&self, input: &Arr, last: Option<&str>) -> Result<(Arr, Vec<u32>)> {
        let end = match last {
            Some(l) => self.spec.layer_index(l)? + 1,
            None => self.spec.layers.len(),
        };
        let mut x = input.clone();
        let mut pattern = Vec::new();
        for layer in &self.spec.layers[..end] {
            let p = |s: &str| {
                self.params.get(&format!("{}.{s}", layer.name)).ok_or_else(|| Error::lookup("parameter", &layer.name))
            };
            x = match &layer.kind {
                LayerKind::Conv { stride, pad, .. } => ref_conv2d(&x, p("weight")?, p("bias")?, *stride, *pad),
                LayerKind::ConvTranspose { stride, pad, .. } => {
                    ref_conv_transpose2d(&x, p("weight")?, p("bias")?, *stride, *pad)
                }
                LayerKind::Dense { .. } => ref_dense(&x, p("weight")?, p("bias")?),
                LayerKind::Activation(a) => ref_activation(&x, *a, &mut pattern),
                LayerKind::MaxPool { kernel, stride } => {
                    let (y, wins) = ref_max_pool(&x, *kernel, *stride);
                    pattern.extend(wins);
                    y
                }
                LayerKind::Flatten => {
                    let n = x.shape[0];
                    let d = x.data.len() / n;
                    Arr { shape: vec![n, d], data: x.data }
                }
                LayerKind::Reshape(dims) => {
                    let mut shape = vec![x.shape[0]];
                    shape.extend_from_slice(dims);
                    Arr { shape, data: x.data }
                }
            };
        }
        Ok((x, pattern))
    }
}

/// Finite-difference gradient of `f` at `x`, skipping coordinates whose
/// ±h probes change the activation pattern reported by `f`.
///
/// Returns `(coordinate, numeric gradient)` pairs for the usable coordinates.
pub fn pattern_safe_difference(
    f: &mut dyn FnMut(&[f64]) -> (f64, Vec<u32>),
    x: &[f64],
    h: f64,
    coords: &[usize],
) -> Vec<(usize, f64)> {
    let (_, base) = f(x);
    let mut probe = x.to_vec();
    let mut out = Vec::new();
    for &i in coords {
        probe[i] = x[i] + h;
        let (up, pu) = f(&probe);
        probe[i] = x[i] - h;
        let (down, pd) = f(&probe);
        probe[i] = x[i];
        if pu == base && pd == base {
            out.push((i, (up - down) / (2.0 * h)));
        }
    }
    out
}
