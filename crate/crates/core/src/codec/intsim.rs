//! Bit-exact integer inference simulation.
//!
//! Executes a calibrated, quantized model with integer tensors: convolutions
//! accumulate in i64 on the `s_in · s_w` grid with integer-folded biases,
//! every edge requantizes with round-half-to-even using scale products
//! evaluated in f64, and GDN divisions happen in real arithmetic on integer
//! operands, mirroring the fake-quant float simulation within one LSB per
//! layer.

use crate::error::{Error, Result};
use crate::gdn::ClipParams;
use crate::kernels;
use crate::quant::{QuantSpec, Signedness};
use crate::scalar::{round_half_even, Scalar};
use crate::tensor::Tensor;

use super::model::{kernel_max_abs, EdgeQuant, LayerKind, Model, LATENT_BITS};

/// Integer values observed at one requantization point.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub id: String,
    pub q: Vec<i64>,
    pub scale: f64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct IntInference<T: Scalar> {
    pub recon: Tensor<T>,
    pub rate_bits: f64,
    pub traces: Vec<LayerTrace>,
}

/// Value flowing between stages: integers on a (possibly per-channel) grid,
/// or post-division reals awaiting the next requantization.
enum State {
    Int { q: Vec<i64>, scales: Vec<f64> },
    Real(Vec<f64>),
}

fn chan(i: usize, c: usize, inner: usize) -> usize {
    (i / inner) % c
}

fn scale_at(scales: &[f64], i: usize, c: usize, inner: usize) -> f64 {
    if scales.len() == 1 {
        scales[0]
    } else {
        scales[chan(i, c, inner)]
    }
}

/// Requantize onto a per-tensor grid with optional clip bounds.
fn requant(
    state: &State,
    shape: &[usize],
    s_target: f64,
    qmin: i64,
    qmax: i64,
    clip: Option<(f64, f64)>,
) -> Vec<i64> {
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let (mut lo, mut hi) = (qmin, qmax);
    if let Some((cl, ch)) = clip {
        lo = lo.max(round_half_even(cl / s_target) as i64);
        hi = hi.min(round_half_even(ch / s_target) as i64);
    }
    match state {
        State::Int { q, scales } => q
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let m = scale_at(scales, i, c, inner) / s_target;
                (round_half_even(v as f64 * m) as i64).clamp(lo, hi)
            })
            .collect(),
        State::Real(v) => v
            .iter()
            .map(|&x| (round_half_even(x / s_target) as i64).clamp(lo, hi))
            .collect(),
    }
}

fn edge_clip_bounds<T: Scalar>(edge: &EdgeQuant<T>) -> Option<(f64, f64)> {
    edge.clip.as_ref().map(ClipParams::bounds)
}

fn quantize_to_i64<T: Scalar>(x: &Tensor<T>, spec: &QuantSpec<T>) -> Result<Vec<i64>> {
    Ok(spec.quantize(x)?.data.into_iter().map(|v| v as i64).collect())
}

struct ConvInts {
    q_w: Vec<i64>,
    q_b: Vec<i64>,
    out_scales: Vec<f64>,
}

fn conv_ints<T: Scalar>(
    w: &Tensor<T>,
    b: &Tensor<T>,
    bits: u8,
    axis: usize,
    s_in: f64,
) -> Result<ConvInts> {
    let spec = QuantSpec::<T>::per_channel_symmetric(&kernel_max_abs(w, axis), bits, axis)?;
    let q_w = quantize_to_i64(w, &spec)?;
    let scales = spec.scales();
    let c_out = b.numel();
    let mut q_b = Vec::with_capacity(c_out);
    let mut out_scales = Vec::with_capacity(c_out);
    for co in 0..c_out {
        let s = s_in * scales[co].to64();
        q_b.push(round_half_even(b.data()[co].to64() / s) as i64);
        out_scales.push(s);
    }
    Ok(ConvInts { q_w, q_b, out_scales })
}

/// Run the integer datapath over one image. Every layer must carry its
/// quantization binding (post-calibration / post-search); the error names
/// the first unbound layer.
pub fn int_infer<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<IntInference<T>> {
    if image.shape().len() != 4 {
        return Err(Error::shape("int_infer", format!("expected NCHW image, got {:?}", image.shape())));
    }
    let mut traces: Vec<LayerTrace> = Vec::new();
    let mut state = State::Real(image.data().iter().map(|v| v.to64()).collect());
    let mut shape = image.shape().to_vec();
    let mut rate_bits = 0.0f64;
    let mut recon: Option<Tensor<T>> = None;

    for (idx, layer) in model.layers.iter().enumerate() {
        let is_latent_input = idx == model.latent_index + 1;
        let mut s_in = 1.0f64;

        if !is_latent_input {
            let edge = layer.in_edge.as_ref().ok_or_else(|| {
                Error::NotCalibrated(format!("layer '{}' has no bound quantization spec", layer.id))
            })?;
            let spec = edge.spec()?;
            let s_edge = edge.scale()?;
            let q = requant(
                &state,
                &shape,
                s_edge,
                spec.qmin() as i64,
                spec.qmax() as i64,
                edge_clip_bounds(edge),
            );
            traces.push(LayerTrace { id: layer.id.clone(), q: q.clone(), scale: s_edge, shape: shape.clone() });
            state = State::Int { q, scales: vec![s_edge] };
            s_in = s_edge;
        }

        match &layer.kind {
            LayerKind::Conv { w, b, stride, pad } => {
                let ints = conv_ints(w, b, layer.w_bits, 0, s_in)?;
                let q_in = match &state {
                    State::Int { q, .. } => q,
                    State::Real(_) => unreachable!("conv input is always requantized"),
                };
                let (acc, out_shape) = int_conv2d(q_in, &shape, &ints.q_w, w.shape(), &ints.q_b, *stride, *pad);
                shape = out_shape;
                state = State::Int { q: acc, scales: ints.out_scales };
            }
            LayerKind::Tconv { w, b, stride, pad } => {
                let ints = conv_ints(w, b, layer.w_bits, 1, s_in)?;
                let q_in = match &state {
                    State::Int { q, .. } => q,
                    State::Real(_) => unreachable!("tconv input is always requantized"),
                };
                let (acc, out_shape) =
                    int_conv2d_transpose(q_in, &shape, &ints.q_w, w.shape(), &ints.q_b, *stride, *pad);
                shape = out_shape;
                state = State::Int { q: acc, scales: ints.out_scales };
            }
            LayerKind::ClippedRelu { theta } => {
                if let State::Int { q, scales } = &mut state {
                    let s = scales[0];
                    let hi = if theta.to64().is_infinite() {
                        i64::MAX
                    } else {
                        round_half_even(theta.to64() / s) as i64
                    };
                    for v in q.iter_mut() {
                        *v = (*v).clamp(0, hi);
                    }
                }
            }
            LayerKind::Gdn { p, inverse, slim } => {
                let edge = layer.in_edge.as_ref().expect("checked above");
                let s_x = edge.scale()?;
                let q_x = match &state {
                    State::Int { q, .. } => q.clone(),
                    State::Real(_) => unreachable!("gdn input is always requantized"),
                };
                let gamma = p.gamma();
                let beta = p.beta();
                let c = p.channels();
                let spec_g = QuantSpec::<T>::per_channel_symmetric(
                    &kernel_max_abs(&gamma, 0),
                    layer.w_bits,
                    0,
                )?;
                let q_g = quantize_to_i64(&gamma, &spec_g)?;
                let bmax = beta.max_abs();
                let spec_b = QuantSpec::<T>::make_spec(-bmax, bmax, layer.w_bits, Signedness::Signed)?;
                let beta_fq = spec_b.fake_apply(&beta)?;
                // fold the (already fake-quantized) beta onto the
                // accumulator grid s_x * s_gamma[i]
                let sg = spec_g.scales();
                let q_beta: Vec<i64> = (0..c)
                    .map(|i| {
                        let s = s_x * sg[i].to64();
                        round_half_even(beta_fq.data()[i].to64() / s) as i64
                    })
                    .collect();
                let inner: usize = shape[2..].iter().product();
                let n = shape[0];
                let mut out = vec![0.0f64; q_x.len()];
                let a_fq: Option<Tensor<T>> = match slim {
                    Some(s) => {
                        let amax = s.a.max_abs();
                        let spec_a =
                            QuantSpec::<T>::make_spec(-amax, amax, layer.w_bits, Signedness::Signed)?;
                        Some(spec_a.fake_apply(&s.a)?)
                    }
                    None => None,
                };
                for ni in 0..n {
                    for i in 0..c {
                        let s_acc = s_x * sg[i].to64();
                        for pix in 0..inner {
                            // integer depthwise-style channel mix on |q_x|
                            let mut d_int = q_beta[i];
                            for j in 0..c {
                                d_int += q_g[i * c + j] * q_x[(ni * c + j) * inner + pix].abs();
                            }
                            let d_real = d_int as f64 * s_acc;
                            let xi = (ni * c + i) * inner + pix;
                            let num = q_x[xi] as f64 * s_x;
                            let mut z = if *inverse {
                                num * d_real
                            } else {
                                if d_real.abs() < kernels::DIV_FLOOR {
                                    return Err(Error::Numeric {
                                        op: "int_infer/gdn",
                                        detail: format!("denominator underflow in '{}'", layer.id),
                                    });
                                }
                                num / d_real
                            };
                            if let (Some(a), Some(s)) = (&a_fq, slim.as_ref()) {
                                z = a.data()[i].to64() * z + s.b.data()[i].to64();
                            }
                            out[xi] = z;
                        }
                    }
                }
                state = State::Real(out);
            }
            LayerKind::QuantStub => {
                // already requantized at the edge; materialize reconstruction
                if let State::Int { q, scales } = &state {
                    let data: Vec<T> = q.iter().map(|&v| T::of(v as f64 * scales[0])).collect();
                    recon = Some(Tensor::new(shape.clone(), data)?);
                }
            }
        }

        if idx == model.latent_index {
            let qmax = (1i64 << (LATENT_BITS - 1)) - 1;
            let q = requant(&state, &shape, 1.0, -qmax, qmax, None);
            let y_tensor: Tensor<T> =
                Tensor::new(shape.clone(), q.iter().map(|&v| T::of(v as f64)).collect())?;
            rate_bits = model.entropy.rate_bits(&y_tensor)?;
            traces.push(LayerTrace { id: "latent".into(), q: q.clone(), scale: 1.0, shape: shape.clone() });
            state = State::Int { q, scales: vec![1.0] };
        }
    }

    let recon = recon.ok_or_else(|| Error::Graph("model has no output quant stub".into()))?;
    Ok(IntInference { recon, rate_bits, traces })
}

fn int_conv2d(
    q_in: &[i64],
    in_shape: &[usize],
    q_w: &[i64],
    w_shape: &[usize],
    q_b: &[i64],
    stride: usize,
    pad: usize,
) -> (Vec<i64>, Vec<usize>) {
    let (n_, c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (c_out, _, kh_, kw_) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let h_out = (h + 2 * pad - kh_) / stride + 1;
    let w_out = (w + 2 * pad - kw_) / stride + 1;
    let mut out = vec![0i64; n_ * c_out * h_out * w_out];
    for n in 0..n_ {
        for co in 0..c_out {
            let base = (n * c_out + co) * h_out * w_out;
            out[base..base + h_out * w_out].fill(q_b[co]);
            for ci in 0..c_in {
                let in_base = (n * c_in + ci) * h * w;
                let k_base = (co * c_in + ci) * kh_ * kw_;
                for kh in 0..kh_ {
                    for kw in 0..kw_ {
                        let kv = q_w[k_base + kh * kw_ + kw];
                        if kv == 0 {
                            continue;
                        }
                        for oh in 0..h_out {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let row_in = in_base + ih as usize * w;
                            let row_out = base + oh * w_out;
                            for ow in 0..w_out {
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                out[row_out + ow] += kv * q_in[row_in + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, vec![n_, c_out, h_out, w_out])
}

fn int_conv2d_transpose(
    q_in: &[i64],
    in_shape: &[usize],
    q_w: &[i64],
    w_shape: &[usize],
    q_b: &[i64],
    stride: usize,
    pad: usize,
) -> (Vec<i64>, Vec<usize>) {
    let (n_, c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (_, c_out, kh_, kw_) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let h_out = (h - 1) * stride + kh_ - 2 * pad;
    let w_out = (w - 1) * stride + kw_ - 2 * pad;
    let mut out = vec![0i64; n_ * c_out * h_out * w_out];
    for n in 0..n_ {
        for co in 0..c_out {
            let base = (n * c_out + co) * h_out * w_out;
            out[base..base + h_out * w_out].fill(q_b[co]);
        }
        for ci in 0..c_in {
            let in_base = (n * c_in + ci) * h * w;
            for ih in 0..h {
                for iw in 0..w {
                    let v = q_in[in_base + ih * w + iw];
                    if v == 0 {
                        continue;
                    }
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
                                out[row + ow as usize] += v * q_w[k_base + kh * kw_ + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, vec![n_, c_out, h_out, w_out])
}
