//! Forward and adjoint kernels on raw tensors. No tape involvement; the
//! differentiable wrappers in `tape.rs` call into these.

use super::Tensor;
use crate::error::{Error, Result};

/// `c = a · b + beta · c` for row/column-strided matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len());
        assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a strided, zero-padded 2-D window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn for_conv(
        op: &'static str,
        channels: usize,
        (in_h, in_w): (usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::dim(op, "stride must be at least 1"));
        }
        if kh > in_h + 2 * pad {
            return Err(Error::dim(op, format!("axis H: kernel {kh} exceeds padded extent {}", in_h + 2 * pad)));
        }
        if kw > in_w + 2 * pad {
            return Err(Error::dim(op, format!("axis W: kernel {kw} exceeds padded extent {}", in_w + 2 * pad)));
        }
        Ok(ConvGeometry {
            channels,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output position (oi, oj) and kernel tap (ki, kj).
    #[inline]
    fn source(&self, oi: usize, oj: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let i = (oi * self.stride + ki) as isize - self.pad as isize;
        let j = (oj * self.stride + kj) as isize - self.pad as isize;
        if i < 0 || j < 0 || i >= self.in_h as isize || j >= self.in_w as isize {
            None
        } else {
            Some((i as usize, j as usize))
        }
    }

    /// Unfold one `[C, in_h, in_w]` image into `[C*kh*kw, out_h*out_w]`.
    fn im2col(&self, image: &[f32], cols: &mut [f32]) {
        let p = self.positions();
        for c in 0..self.channels {
            let plane = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oi in 0..self.out_h {
                        for oj in 0..self.out_w {
                            dst[oi * self.out_w + oj] = match self.source(oi, oj, ki, kj) {
                                Some((i, j)) => plane[i * self.in_w + j],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-add columns back onto an image.
    fn col2im(&self, cols: &[f32], image: &mut [f32]) {
        let p = self.positions();
        for c in 0..self.channels {
            let plane = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oi in 0..self.out_h {
                        for oj in 0..self.out_w {
                            if let Some((i, j)) = self.source(oi, oj, ki, kj) {
                                plane[i * self.in_w + j] += src[oi * self.out_w + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dims4(op: &'static str, t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::dim(op, format!("{what} must be 4-D, got shape {s:?}"))),
    }
}

fn check_bias(op: &'static str, bias: &Tensor, expected: usize) -> Result<()> {
    if bias.shape() != [expected] {
        return Err(Error::dim(op, format!("bias shape {:?}, expected [{expected}]", bias.shape())));
    }
    Ok(())
}

pub struct ConvShapes {
    pub n: usize,
    pub geom: ConvGeometry,
    pub k: usize,
}

pub fn conv2d_shapes(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<ConvShapes> {
    let op = "conv2d";
    let [n, c, h, w] = dims4(op, input, "input")?;
    let [k, wc, kh, kw] = dims4(op, weight, "weight")?;
    if wc != c {
        return Err(Error::dim(op, format!("axis C: input has {c} channels, weight expects {wc}")));
    }
    check_bias(op, bias, k)?;
    let geom = ConvGeometry::for_conv(op, c, (h, w), (kh, kw), stride, pad)?;
    Ok(ConvShapes { n, geom, k })
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let ConvShapes { n, geom, k } = conv2d_shapes(input, weight, bias, stride, pad)?;
    let (ckk, p) = (geom.patch_len(), geom.positions());
    let in_len = geom.channels * geom.in_h * geom.in_w;
    let mut out = vec![0.0; n * k * p];
    let mut cols = vec![0.0; ckk * p];
    for b in 0..n {
        geom.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        let y = &mut out[b * k * p..(b + 1) * k * p];
        for (kk, row) in y.chunks_mut(p).enumerate() {
            row.fill(bias.data()[kk]);
        }
        gemm(k, ckk, p, weight.data(), (ckk, 1), &cols, (p, 1), 1.0, y, (p, 1));
    }
    Tensor::new(vec![n, k, geom.out_h, geom.out_w], out)
}

/// Gradients of conv2d with respect to (input, weight, bias); each is
/// computed only when requested.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    want: [bool; 3],
) -> Result<[Option<Tensor>; 3]> {
    let [_, c, h, w] = dims4("conv2d", input, "input")?;
    let [k, _, kh, kw] = dims4("conv2d", weight, "weight")?;
    let n = input.shape()[0];
    let geom = ConvGeometry::for_conv("conv2d", c, (h, w), (kh, kw), stride, pad)?;
    let (ckk, p) = (geom.patch_len(), geom.positions());
    let in_len = c * h * w;
    let mut dx = want[0].then(|| vec![0.0; input.len()]);
    let mut dw = want[1].then(|| vec![0.0; weight.len()]);
    let mut db = want[2].then(|| vec![0.0; k]);
    let mut cols = vec![0.0; ckk * p];
    for b in 0..n {
        let gy = &grad_out.data()[b * k * p..(b + 1) * k * p];
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T · dy
            gemm(ckk, k, p, weight.data(), (1, ckk), gy, (p, 1), 0.0, &mut cols, (p, 1));
            geom.col2im(&cols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
        if let Some(dw) = dw.as_mut() {
            geom.im2col(&input.data()[b * in_len..(b + 1) * in_len], &mut cols);
            // dW += dy · cols^T
            gemm(k, p, ckk, gy, (p, 1), &cols, (1, p), 1.0, dw, (ckk, 1));
        }
        if let Some(db) = db.as_mut() {
            for (kk, row) in gy.chunks(p).enumerate() {
                db[kk] += row.iter().sum::<f32>();
            }
        }
    }
    Ok([
        dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        dw.map(|d| Tensor::new(weight.shape().to_vec(), d)).transpose()?,
        db.map(|d| Tensor::new(vec![k], d)).transpose()?,
    ])
}

pub fn conv_transpose2d_shapes(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvShapes> {
    let op = "conv2d_transpose";
    let [n, k, h, w] = dims4(op, input, "input")?;
    let [wk, c, kh, kw] = dims4(op, weight, "weight")?;
    if wk != k {
        return Err(Error::dim(op, format!("axis C: input has {k} channels, weight expects {wk}")));
    }
    check_bias(op, bias, c)?;
    if stride == 0 {
        return Err(Error::dim(op, "stride must be at least 1"));
    }
    let oh = ((h - 1) * stride + kh)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::dim(op, format!("axis H: padding {pad} leaves no output")))?;
    let ow = ((w - 1) * stride + kw)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::dim(op, format!("axis W: padding {pad} leaves no output")))?;
    let geom = ConvGeometry::for_conv(op, c, (oh, ow), (kh, kw), stride, pad)?;
    debug_assert_eq!((geom.out_h, geom.out_w), (h, w));
    Ok(ConvShapes { n, geom, k })
}

pub fn conv_transpose2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let ConvShapes { n, geom, k } = conv_transpose2d_shapes(input, weight, bias, stride, pad)?;
    let (ckk, p) = (geom.patch_len(), geom.positions());
    let c = geom.channels;
    let plane = geom.in_h * geom.in_w;
    let mut out = vec![0.0; n * c * plane];
    let mut cols = vec![0.0; ckk * p];
    for b in 0..n {
        let x = &input.data()[b * k * p..(b + 1) * k * p];
        gemm(ckk, k, p, weight.data(), (1, ckk), x, (p, 1), 0.0, &mut cols, (p, 1));
        let y = &mut out[b * c * plane..(b + 1) * c * plane];
        for (cc, row) in y.chunks_mut(plane).enumerate() {
            row.fill(bias.data()[cc]);
        }
        geom.col2im(&cols, y);
    }
    Tensor::new(vec![n, c, geom.in_h, geom.in_w], out)
}

pub fn conv_transpose2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    want: [bool; 3],
) -> Result<[Option<Tensor>; 3]> {
    let ConvShapes { n, geom, k } = conv_transpose2d_shapes(input, weight, bias, stride, pad)?;
    let (ckk, p) = (geom.patch_len(), geom.positions());
    let c = geom.channels;
    let plane = geom.in_h * geom.in_w;
    let mut dx = want[0].then(|| vec![0.0; input.len()]);
    let mut dw = want[1].then(|| vec![0.0; weight.len()]);
    let mut db = want[2].then(|| vec![0.0; c]);
    let mut cols = vec![0.0; ckk * p];
    for b in 0..n {
        let gy = &grad_out.data()[b * c * plane..(b + 1) * c * plane];
        if want[0] || want[1] {
            geom.im2col(gy, &mut cols);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(k, ckk, p, weight.data(), (ckk, 1), &cols, (p, 1), 0.0, &mut dx[b * k * p..(b + 1) * k * p], (p, 1));
        }
        if let Some(dw) = dw.as_mut() {
            let x = &input.data()[b * k * p..(b + 1) * k * p];
            gemm(k, p, ckk, x, (p, 1), &cols, (1, p), 1.0, dw, (ckk, 1));
        }
        if let Some(db) = db.as_mut() {
            for (cc, row) in gy.chunks(plane).enumerate() {
                db[cc] += row.iter().sum::<f32>();
            }
        }
    }
    Ok([
        dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        dw.map(|d| Tensor::new(weight.shape().to_vec(), d)).transpose()?,
        db.map(|d| Tensor::new(vec![c], d)).transpose()?,
    ])
}

pub fn dense_shapes(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let op = "dense";
    let (n, din) = match *input.shape() {
        [n, d] => (n, d),
        ref s => return Err(Error::dim(op, format!("input must be 2-D, got {s:?}"))),
    };
    let (dout, wdin) = match *weight.shape() {
        [o, i] => (o, i),
        ref s => return Err(Error::dim(op, format!("weight must be 2-D, got {s:?}"))),
    };
    if wdin != din {
        return Err(Error::dim(op, format!("axis 1: input width {din}, weight expects {wdin}")));
    }
    check_bias(op, bias, dout)?;
    Ok((n, din, dout))
}

pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, din, dout) = dense_shapes(input, weight, bias)?;
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(n, din, dout, input.data(), (din, 1), weight.data(), (1, din), 1.0, &mut out, (dout, 1));
    Tensor::new(vec![n, dout], out)
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, want: [bool; 3]) -> Result<[Option<Tensor>; 3]> {
    let (n, din) = (input.shape()[0], input.shape()[1]);
    let dout = weight.shape()[0];
    let gy = grad_out.data();
    let dx = want[0]
        .then(|| {
            let mut dx = vec![0.0; n * din];
            gemm(n, dout, din, gy, (dout, 1), weight.data(), (din, 1), 0.0, &mut dx, (din, 1));
            Tensor::new(vec![n, din], dx)
        })
        .transpose()?;
    let dw = want[1]
        .then(|| {
            let mut dw = vec![0.0; dout * din];
            gemm(dout, n, din, gy, (1, dout), input.data(), (din, 1), 0.0, &mut dw, (din, 1));
            Tensor::new(vec![dout, din], dw)
        })
        .transpose()?;
    let db = want[2]
        .then(|| {
            let mut db = vec![0.0; dout];
            for row in gy.chunks(dout) {
                for (d, g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            Tensor::new(vec![dout], db)
        })
        .transpose()?;
    Ok([dx, dw, db])
}

/// Max pooling; returns the output and, per output element, the flat index
/// of the selected input element (first maximum in scan order).
pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let op = "max_pool2d";
    let [n, c, h, w] = dims4(op, input, "input")?;
    let geom = ConvGeometry::for_conv(op, c, (h, w), (kernel, kernel), stride, 0)?;
    let (oh, ow) = (geom.out_h, geom.out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * stride * w + oj * stride;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let idx = base + (oi * stride + ki) * w + oj * stride + kj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f32> {
        let [n, c, h, wd] = dims4("t", x, "x").unwrap();
        let [k, _, kh, kw] = dims4("t", w, "w").unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * k * oh * ow];
        for bi in 0..n {
            for kk in 0..k {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = b.data()[kk];
                        for cc in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let i = (oi * stride + ki) as isize - pad as isize;
                                    let j = (oj * stride + kj) as isize - pad as isize;
                                    if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < wd {
                                        acc += x.data()[((bi * c + cc) * h + i as usize) * wd + j as usize]
                                            * w.data()[((kk * c + cc) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((bi * k + kk) * oh + oi) * ow + oj] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (3, 2)] {
            let x = Tensor::uniform(&[2, 3, 7, 6], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[4, 3, 3, 2], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
            let got = conv2d(&x, &w, &b, stride, pad).unwrap();
            let want = naive_conv(&x, &w, &b, stride, pad);
            for (g, e) in got.data().iter().zip(&want) {
                assert!((g - e).abs() < 1e-5, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn conv2d_names_the_offending_axis() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap_err().to_string();
        assert!(err.contains("axis C"), "{err}");
        let w = Tensor::zeros(&[1, 2, 5, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap_err().to_string();
        assert!(err.contains("axis H"), "{err}");
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[1]), 0, 0).is_err());
    }

    #[test]
    fn transpose_output_extent() {
        let x = Tensor::zeros(&[1, 2, 7, 5]);
        let w = Tensor::zeros(&[2, 3, 4, 4]);
        let y = conv_transpose2d(&x, &w, &Tensor::zeros(&[3]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 14, 10]);
    }

    #[test]
    fn max_pool_picks_window_maxima() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1., 5., 2., 2., 3., 0., 7., 1.]).unwrap();
        let (y, arg) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5., 7.]);
        // ties resolve to the first element in scan order
        assert_eq!(arg, vec![1, 6]);
    }
}
