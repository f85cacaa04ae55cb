//! Pure compute kernels shared by the autodiff graph and the eval-mode
//! forward paths, so that both routes run literally the same arithmetic.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DIV_FLOOR: f64 = 1e-12;

pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub fn conv2d_dims<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if x.shape().len() != 4 || k.shape().len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("need 4-D input and kernel, got {:?} and {:?}", x.shape(), k.shape()),
        ));
    }
    let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if kc != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {} input channels, input has {}", kc, c_in),
        ));
    }
    if b.numel() != c_out {
        return Err(Error::shape(
            "conv2d",
            format!("bias has {} entries for {} output channels", b.numel(), c_out),
        ));
    }
    if stride < 1 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad),
        ));
    }
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims { n, c_in, h, w, c_out, kh, kw, h_out, w_out })
}

/// Cross-correlation with zero padding. Kernel layout `[C_out, C_in, kH, kW]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = conv2d_dims(x, k, b, stride, pad)?;
    let mut out = vec![T::zero(); d.n * d.c_out * d.h_out * d.w_out];
    let xs = x.data();
    let ks = k.data();
    let bs = b.data();
    for n in 0..d.n {
        for co in 0..d.c_out {
            let out_base = (n * d.c_out + co) * d.h_out * d.w_out;
            out[out_base..out_base + d.h_out * d.w_out].fill(bs[co]);
            for ci in 0..d.c_in {
                let in_base = (n * d.c_in + ci) * d.h * d.w;
                let k_base = (co * d.c_in + ci) * d.kh * d.kw;
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let kv = ks[k_base + kh * d.kw + kw];
                        if kv == T::zero() {
                            continue;
                        }
                        for oh in 0..d.h_out {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            let row_in = in_base + ih as usize * d.w;
                            let row_out = out_base + oh * d.w_out;
                            for ow in 0..d.w_out {
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                out[row_out + ow] = out[row_out + ow] + kv * xs[row_in + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.c_out, d.h_out, d.w_out], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel, and bias.
/// Any of the output slots may be `None` to skip that computation.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    pad: usize,
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (n_, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, _, kh_, kw_) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let h_out = (h + 2 * pad - kh_) / stride + 1;
    let w_out = (w + 2 * pad - kw_) / stride + 1;
    let xs = x.data();
    let ks = k.data();
    for n in 0..n_ {
        for co in 0..c_out {
            let out_base = (n * c_out + co) * h_out * w_out;
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let g = grad_out[out_base + oh * w_out + ow];
                    if let Some(db) = db.as_deref_mut() {
                        db[co] = db[co] + g;
                    }
                    if dx.is_none() && dk.is_none() {
                        continue;
                    }
                    for ci in 0..c_in {
                        let in_base = (n * c_in + ci) * h * w;
                        let k_base = (co * c_in + ci) * kh_ * kw_;
                        for kh in 0..kh_ {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kw in 0..kw_ {
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let xi = in_base + ih as usize * w + iw as usize;
                                let kidx = k_base + kh * kw_ + kw;
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] = dx[xi] + g * ks[kidx];
                                }
                                if let Some(dk) = dk.as_deref_mut() {
                                    dk[kidx] = dk[kidx] + g * xs[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_transpose_dims<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if x.shape().len() != 4 || k.shape().len() != 4 {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("need 4-D input and kernel, got {:?} and {:?}", x.shape(), k.shape()),
        ));
    }
    let (n, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kc_in, c_out, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if kc_in != c_in {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("kernel expects {} input channels, input has {}", kc_in, c_in),
        ));
    }
    if b.numel() != c_out {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("bias has {} entries for {} output channels", b.numel(), c_out),
        ));
    }
    if stride < 1 {
        return Err(Error::invalid("conv2d_transpose stride must be >= 1"));
    }
    let h_full = (h - 1) * stride + kh;
    let w_full = (w - 1) * stride + kw;
    if h_full < 2 * pad + 1 || w_full < 2 * pad + 1 {
        return Err(Error::shape("conv2d_transpose", "padding consumes entire output"));
    }
    let h_out = h_full - 2 * pad;
    let w_out = w_full - 2 * pad;
    Ok(ConvDims { n, c_in, h, w, c_out, kh, kw, h_out, w_out })
}

/// Transposed convolution (adjoint of [`conv2d`]). Kernel layout
/// `[C_in, C_out, kH, kW]`, output spatial size `(H-1)*stride - 2*pad + kH`.
pub fn conv2d_transpose<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let d = conv2d_transpose_dims(x, k, b, stride, pad)?;
    let mut out = vec![T::zero(); d.n * d.c_out * d.h_out * d.w_out];
    let xs = x.data();
    let ks = k.data();
    let bs = b.data();
    for n in 0..d.n {
        for co in 0..d.c_out {
            let base = (n * d.c_out + co) * d.h_out * d.w_out;
            out[base..base + d.h_out * d.w_out].fill(bs[co]);
        }
        for ci in 0..d.c_in {
            let in_base = (n * d.c_in + ci) * d.h * d.w;
            for ih in 0..d.h {
                for iw in 0..d.w {
                    let v = xs[in_base + ih * d.w + iw];
                    if v == T::zero() {
                        continue;
                    }
                    for co in 0..d.c_out {
                        let out_base = (n * d.c_out + co) * d.h_out * d.w_out;
                        let k_base = (ci * d.c_out + co) * d.kh * d.kw;
                        for kh in 0..d.kh {
                            let oh = (ih * stride + kh) as isize - pad as isize;
                            if oh < 0 || oh >= d.h_out as isize {
                                continue;
                            }
                            let row = out_base + oh as usize * d.w_out;
                            for kw in 0..d.kw {
                                let ow = (iw * stride + kw) as isize - pad as isize;
                                if ow < 0 || ow >= d.w_out as isize {
                                    continue;
                                }
                                out[row + ow as usize] =
                                    out[row + ow as usize] + v * ks[k_base + kh * d.kw + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.c_out, d.h_out, d.w_out], out)
}

/// Gradients of [`conv2d_transpose`].
pub fn conv2d_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    pad: usize,
    mut dx: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (n_, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (_, c_out, kh_, kw_) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let h_out = (h - 1) * stride + kh_ - 2 * pad;
    let w_out = (w - 1) * stride + kw_ - 2 * pad;
    let xs = x.data();
    let ks = k.data();
    if let Some(db) = db {
        for n in 0..n_ {
            for co in 0..c_out {
                let base = (n * c_out + co) * h_out * w_out;
                for g in &grad_out[base..base + h_out * w_out] {
                    db[co] = db[co] + *g;
                }
            }
        }
    }
    if dx.is_none() && dk.is_none() {
        return;
    }
    for n in 0..n_ {
        for ci in 0..c_in {
            let in_base = (n * c_in + ci) * h * w;
            for ih in 0..h {
                for iw in 0..w {
                    let xi = in_base + ih * w + iw;
                    let xv = xs[xi];
                    let mut acc = T::zero();
                    for co in 0..c_out {
                        let out_base = (n * c_out + co) * h_out * w_out;
                        let k_base = (ci * c_out + co) * kh_ * kw_;
                        for kh in 0..kh_ {
                            let oh = (ih * stride + kh) as isize - pad as isize;
                            if oh < 0 || oh >= h_out as isize {
                                continue;
                            }
                            let row = out_base + oh as usize * w_out;
                            for kw in 0..kw_ {
                                let ow = (iw * stride + kw) as isize - pad as isize;
                                if ow < 0 || ow >= w_out as isize {
                                    continue;
                                }
                                let g = grad_out[row + ow as usize];
                                let kidx = k_base + kh * kw_ + kw;
                                acc = acc + g * ks[kidx];
                                if let Some(dk) = dk.as_deref_mut() {
                                    dk[kidx] = dk[kidx] + g * xv;
                                }
                            }
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[xi] = dx[xi] + acc;
                    }
                }
            }
        }
    }
}

/// Sum or mean over `axes` with 64-bit accumulation in flat input order.
pub fn reduce<T: Scalar>(x: &Tensor<T>, mean: bool, axes: &[usize]) -> Result<Tensor<T>> {
    let shape = x.shape();
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::invalid(format!("reduce axis {} out of range for {:?}", a, shape)));
        }
    }
    let mut reduced = vec![false; shape.len()];
    for &a in axes {
        reduced[a] = true;
    }
    let out_shape: Vec<usize> =
        shape.iter().enumerate().filter(|(i, _)| !reduced[*i]).map(|(_, &s)| s).collect();
    let out_len: usize = out_shape.iter().product::<usize>().max(1);
    let mut acc = vec![0.0f64; out_len];

    // strides of the output index within the input coordinate walk
    let mut out_strides = vec![0usize; shape.len()];
    {
        let mut s = 1usize;
        for i in (0..shape.len()).rev() {
            if !reduced[i] {
                out_strides[i] = s;
                s *= shape[i];
            }
        }
    }
    let mut coords = vec![0usize; shape.len()];
    for &v in x.data() {
        let mut oi = 0usize;
        for (i, &c) in coords.iter().enumerate() {
            if !reduced[i] {
                oi += c * out_strides[i];
            }
        }
        acc[oi] += v.to64();
        for i in (0..shape.len()).rev() {
            coords[i] += 1;
            if coords[i] < shape[i] {
                break;
            }
            coords[i] = 0;
        }
    }
    let count: usize = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| reduced[*i])
        .map(|(_, &s)| s)
        .product::<usize>()
        .max(1);
    let data: Vec<T> = acc
        .into_iter()
        .map(|a| T::of(if mean { a / count as f64 } else { a }))
        .collect();
    Tensor::new(out_shape, data)
}

/// Per-channel broadcast helper: channel index of flat position `i` in a
/// tensor whose axis 1 has length `c` and trailing dims multiply to `inner`.
#[inline]
pub fn chan_of(i: usize, c: usize, inner: usize) -> usize {
    (i / inner) % c
}

/// Validate an elementwise pairing: shapes equal, or `rhs` is a vector that
/// broadcasts over axis 1 of `lhs`. Returns `(c, inner)` for the broadcast
/// case, `None` for the equal-shape case.
pub fn broadcast_info(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Option<(usize, usize)>> {
    if lhs == rhs {
        return Ok(None);
    }
    if rhs.len() == 1 && lhs.len() >= 2 && lhs[1] == rhs[0] {
        let inner: usize = lhs[2..].iter().product();
        return Ok(Some((rhs[0], inner)));
    }
    Err(Error::shape(op, format!("incompatible shapes {:?} and {:?}", lhs, rhs)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Quadruple-loop reference convolution, kept deliberately naive.
    fn conv2d_oracle(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n_, ci_, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co_, _, kh_, kw_) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let ho = (h + 2 * pad - kh_) / stride + 1;
        let wo = (w + 2 * pad - kw_) / stride + 1;
        let mut out = Tensor::zeros(vec![n_, co_, ho, wo]);
        for n in 0..n_ {
            for co in 0..co_ {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..ci_ {
                            for kh in 0..kh_ {
                                for kw in 0..kw_ {
                                    let ih = (oh * stride + kh) as isize - pad as isize;
                                    let iw = (ow * stride + kw) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                        acc += x.data()[((n * ci_ + ci) * h + ih as usize) * w + iw as usize]
                                            * k.data()[((co * ci_ + ci) * kh_ + kh) * kw_ + kw];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * co_ + co) * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_sums_to_nine() {
        let x = t(&[1, 1, 3, 3], &[1.0; 9]);
        let k = t(&[1, 1, 3, 3], &[1.0; 9]);
        let b = t(&[1], &[0.0]);
        let y = conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = crate::rng::Rng::new(5);
        let x = Tensor::from_f64(vec![1, 2, 4, 4], &(0..32).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();
        let k = Tensor::from_f64(vec![3, 2, 3, 3], &(0..54).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();
        let b = Tensor::from_f64(vec![3], &[0.1, -0.2, 0.3]).unwrap();
        let fast = conv2d(&x, &k, &b, 2, 1).unwrap();
        let slow = conv2d_oracle(&x, &k, &b, 2, 1);
        assert_eq!(fast.shape(), slow.shape());
        for (a, o) in fast.data().iter().zip(slow.data()) {
            assert!((a - o).abs() <= 1e-6);
        }
    }

    #[test]
    fn transpose_identity_and_stamping() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d_transpose(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());

        // each input pixel stamped as a 2x2 block of ones
        let x = t(&[1, 1, 2, 2], &[1.0; 4]);
        let k = t(&[1, 1, 2, 2], &[1.0; 4]);
        let y = conv2d_transpose(&x, &k, &b, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(a,k), g> == <a, conv_transpose(g,k)> on random instances;
        // cases chosen so (H + 2p - kH) divides the stride and the adjoint
        // covers the full input
        let mut rng = crate::rng::Rng::new(6);
        for &(stride, pad, ks) in &[(1usize, 0usize, 3usize), (2, 1, 4), (2, 0, 4), (1, 1, 3)] {
            let a = Tensor::<f64>::from_f64(vec![2, 3, 6, 6], &(0..216).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();
            let k = Tensor::from_f64(vec![4, 3, ks, ks], &(0..4 * 3 * ks * ks).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();
            let b0 = Tensor::zeros(vec![4]);
            let y = conv2d(&a, &k, &b0, stride, pad).unwrap();
            let g = Tensor::from_f64(y.shape().to_vec(), &(0..y.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();
            let b1 = Tensor::zeros(vec![3]);
            let back = conv2d_transpose(&g, &k, &b1, stride, pad).unwrap();
            // conv_transpose output can only cover the input region when
            // (H + 2p - kH) % stride == 0; these cases satisfy that.
            assert_eq!(back.shape(), a.shape());
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(p, q)| p * q).sum();
            let rhs: f64 = a.data().iter().zip(back.data()).map(|(p, q)| p * q).sum();
            assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0), "stride {} pad {}", stride, pad);
        }
    }

    #[test]
    fn reduce_examples() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        assert_eq!(reduce(&x, false, &[0]).unwrap().item(), 6.0);
        let x = t(&[2, 1], &[4.0, 7.0]);
        let m = reduce(&x, true, &[1]).unwrap();
        assert_eq!(m.data(), &[4.0, 7.0]);
    }

    #[test]
    fn reduce_accumulates_in_f64() {
        let x = Tensor::<f64>::full(vec![1_000_000], 1e-3);
        let s = reduce(&x, false, &[0]).unwrap().item();
        assert!((s - 1000.0).abs() <= 1e-6, "sum {}", s);
    }

    #[test]
    fn reduce_over_axis_subset() {
        let x = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let s = reduce(&x, false, &[0, 2]).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[1.0 + 2.0 + 5.0 + 6.0, 3.0 + 4.0 + 7.0 + 8.0]);
    }
}
