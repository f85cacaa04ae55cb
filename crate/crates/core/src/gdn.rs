//! GDN-family layers: plain GDN, its multiplicative inverse (IGDN), the
//! slimmable variant with a channel-wise affine tail, and the quantized GDN
//! pipeline with a calibrated two-sided input clip.
//!
//! All forward functions are graph compositions so gradients come for free.
//! The denominator β_i + Σ_j γ_ij |x_j| is realized as a 1x1 channel-mixing
//! convolution on |x| with γ as the kernel and β as the bias; a direct
//! loop-based evaluation is provided as the cross-check route.

use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, Var};
use crate::quant::QuantSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA_FLOOR: f64 = 1e-6;

/// Raw (reparameterized) GDN parameters: β = softplus(r_β) + β_floor,
/// γ = softplus(r_γ), so positivity is structural. `r_gamma` is stored as a
/// `[C, C, 1, 1]` tensor, ready to act as a 1x1 conv kernel.
#[derive(Debug, Clone)]
pub struct GdnParams<T: Scalar> {
    pub r_beta: Tensor<T>,
    pub r_gamma: Tensor<T>,
}

/// Inverse of y = softplus(r): r = ln(e^y - 1), clamped for tiny targets.
pub fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-9);
    if y > 30.0 {
        y
    } else {
        (y.exp_m1()).ln()
    }
}

impl<T: Scalar> GdnParams<T> {
    /// β = beta_init on every channel, γ = gamma_diag·I.
    pub fn init(channels: usize, beta_init: f64, gamma_diag: f64) -> Self {
        let r_beta = Tensor::full(vec![channels], T::of(softplus_inv(beta_init - BETA_FLOOR)));
        let mut r_gamma = Tensor::full(
            vec![channels, channels, 1, 1],
            T::of(softplus_inv(1e-9)),
        );
        for c in 0..channels {
            r_gamma.data_mut()[c * channels + c] = T::of(softplus_inv(gamma_diag));
        }
        let mut p = GdnParams { r_beta, r_gamma };
        p.r_beta.requires_grad = true;
        p.r_gamma.requires_grad = true;
        p
    }

    pub fn channels(&self) -> usize {
        self.r_beta.numel()
    }

    /// Effective β vector (plain values, not graph nodes).
    pub fn beta(&self) -> Tensor<T> {
        self.r_beta.map(|r| T::of(softplus(r.to64()) + BETA_FLOOR))
    }

    /// Effective γ as a `[C, C, 1, 1]` kernel.
    pub fn gamma(&self) -> Tensor<T> {
        self.r_gamma.map(|r| T::of(softplus(r.to64())))
    }

    /// Put β and γ on the graph (softplus of the raw leaves).
    pub fn materialize(&self, g: &mut ComputeGraph<T>) -> Result<GdnVars> {
        let r_beta = g.leaf(&self.r_beta);
        let r_gamma = g.leaf(&self.r_gamma);
        let sp_b = g.softplus(r_beta)?;
        let beta = g.add_scalar(sp_b, T::of(BETA_FLOOR))?;
        let gamma = g.softplus(r_gamma)?;
        Ok(GdnVars { beta, gamma, r_beta, r_gamma })
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Graph handles for a materialized GDN parameter set.
#[derive(Debug, Clone, Copy)]
pub struct GdnVars {
    pub beta: Var,
    pub gamma: Var,
    pub r_beta: Var,
    pub r_gamma: Var,
}

/// Channel-wise affine tail of a slimmable GDN.
#[derive(Debug, Clone)]
pub struct SlimAffine<T: Scalar> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> SlimAffine<T> {
    pub fn identity(channels: usize) -> Self {
        let mut a = Tensor::full(vec![channels], T::one());
        let mut b = Tensor::zeros(vec![channels]);
        a.requires_grad = true;
        b.requires_grad = true;
        SlimAffine { a, b }
    }
}

/// Clipping bounds for an activation edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipParams<T: Scalar> {
    /// ClippedReLU bound: max(0, min(x, θ)), θ > 0.
    OneSided { theta: T },
    /// Two-sided clip: max(lo, min(x, hi)), lo < hi.
    TwoSided { lo: T, hi: T },
}

impl<T: Scalar> ClipParams<T> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ClipParams::OneSided { theta } => {
                if !(theta > T::zero()) {
                    return Err(Error::invalid(format!("theta {} must be > 0", theta)));
                }
            }
            ClipParams::TwoSided { lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::invalid(format!("clip bounds lo {} >= hi {}", lo, hi)));
                }
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            ClipParams::OneSided { theta } => (0.0, theta.to64()),
            ClipParams::TwoSided { lo, hi } => (lo.to64(), hi.to64()),
        }
    }
}

/// The GDN denominator d_i = β_i + Σ_j γ_ij |x_j| as a 1x1 channel-mixing
/// convolution over |x|.
pub fn gdn_denominator_as_conv<T: Scalar>(
    g: &mut ComputeGraph<T>,
    x: Var,
    beta: Var,
    gamma: Var,
) -> Result<Var> {
    let ax = g.abs(x)?;
    g.conv2d(ax, gamma, beta, 1, 0)
}

/// Direct loop evaluation of the denominator (the cross-check route; also
/// the reference the integer simulator mirrors).
pub fn gdn_denominator_direct<T: Scalar>(
    x: &Tensor<T>,
    beta: &Tensor<T>,
    gamma: &Tensor<T>,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape("gdn", format!("need NCHW input, got {:?}", shape)));
    }
    let (n_, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if beta.numel() != c || gamma.numel() != c * c {
        return Err(Error::shape(
            "gdn",
            format!("params for {} channels do not match input {:?}", beta.numel(), shape),
        ));
    }
    let mut out = Tensor::zeros(shape.to_vec());
    let hw = h * w;
    for n in 0..n_ {
        for i in 0..c {
            for p in 0..hw {
                let mut acc = beta.data()[i].to64();
                for j in 0..c {
                    let xv = x.data()[(n * c + j) * hw + p].to64().abs();
                    acc += gamma.data()[i * c + j].to64() * xv;
                }
                out.data_mut()[(n * c + i) * hw + p] = T::of(acc);
            }
        }
    }
    Ok(out)
}

/// z_i = x_i / (β_i + Σ_j γ_ij |x_j|).
pub fn gdn_forward<T: Scalar>(g: &mut ComputeGraph<T>, x: Var, beta: Var, gamma: Var) -> Result<Var> {
    let d = gdn_denominator_as_conv(g, x, beta, gamma)?;
    g.div(x, d)
}

/// Multiplicative counterpart: z_i = x_i · (β_i + Σ_j γ_ij |x_j|).
pub fn igdn_forward<T: Scalar>(g: &mut ComputeGraph<T>, x: Var, beta: Var, gamma: Var) -> Result<Var> {
    let d = gdn_denominator_as_conv(g, x, beta, gamma)?;
    g.mul(x, d)
}

/// z*_i = a_i · gdn(x)_i + b_i.
pub fn slim_gdn_forward<T: Scalar>(
    g: &mut ComputeGraph<T>,
    x: Var,
    beta: Var,
    gamma: Var,
    a: Var,
    b: Var,
) -> Result<Var> {
    let z = gdn_forward(g, x, beta, gamma)?;
    let az = g.mul(z, a)?;
    g.add(az, b)
}

/// Quantized GDN: clip(x) -> fake-quant once -> numerator x_q, denominator
/// from |x_q| with fake-quantized γ (per-channel) and β. The division stays
/// in real arithmetic; the integer datapath lives in the codec simulator.
#[allow(clippy::too_many_arguments)]
pub fn quantized_gdn_forward<T: Scalar>(
    g: &mut ComputeGraph<T>,
    x: Var,
    beta: Var,
    gamma: Var,
    spec_x: &QuantSpec<T>,
    spec_gamma: &QuantSpec<T>,
    spec_beta: &QuantSpec<T>,
    clip: Option<&ClipParams<T>>,
    slim: Option<(Var, Var)>,
) -> Result<Var> {
    let clip = clip.ok_or_else(|| {
        Error::NotCalibrated(
            "quantized GDN needs calibrated clip bounds; run activation calibration first".into(),
        )
    })?;
    clip.validate()?;
    let (lo, hi) = clip.bounds();
    let xc = g.clip(x, T::of(lo), T::of(hi))?;
    let xq = g.fake_quant(xc, spec_x.clone())?;
    let gq = g.fake_quant(gamma, spec_gamma.clone())?;
    let bq = g.fake_quant(beta, spec_beta.clone())?;
    let ax = g.abs(xq)?;
    let d = g.conv2d(ax, gq, bq, 1, 0)?;
    let z = g.div(xq, d)?;
    match slim {
        None => Ok(z),
        Some((a, b)) => {
            let az = g.mul(z, a)?;
            g.add(az, b)
        }
    }
}
