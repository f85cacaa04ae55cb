//! Per-layer FLOPs accounting.
//!
//! conv/tconv: 2·H_out·W_out·C_out·C_in·kH·kW plus H_out·W_out·C_out for the
//! bias. GDN: the 1x1 channel-mix conv for the denominator plus 2·C·H·W for
//! abs and divide (slim adds the per-element affine). Clip-like layers cost
//! one op per element.

use crate::codec::model::{LayerKind, Model, IMAGE_CHANNELS};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub per_layer: Vec<(String, u64)>,
    pub total: u64,
    pub per_pixel: f64,
}

pub fn flops_count<T: Scalar>(model: &Model<T>, input_hw: (usize, usize)) -> Result<FlopsReport> {
    let (mut h, mut w) = input_hw;
    let mut c = IMAGE_CHANNELS;
    let mut per_layer = Vec::new();
    let mut total: u64 = 0;
    for layer in &model.layers {
        let f: u64 = match &layer.kind {
            LayerKind::Conv { w: kw, stride, pad, .. } => {
                let (c_out, c_in, kh, kwid) =
                    (kw.shape()[0], kw.shape()[1], kw.shape()[2], kw.shape()[3]);
                let ho = (h + 2 * pad - kh) / stride + 1;
                let wo = (w + 2 * pad - kwid) / stride + 1;
                let f = 2 * (ho * wo * c_out * c_in * kh * kwid) as u64 + (ho * wo * c_out) as u64;
                c = c_out;
                h = ho;
                w = wo;
                f
            }
            LayerKind::Tconv { w: kw, stride, pad, .. } => {
                let (c_in, c_out, kh, kwid) =
                    (kw.shape()[0], kw.shape()[1], kw.shape()[2], kw.shape()[3]);
                let ho = (h - 1) * stride + kh - 2 * pad;
                let wo = (w - 1) * stride + kwid - 2 * pad;
                let f = 2 * (ho * wo * c_out * c_in * kh * kwid) as u64 + (ho * wo * c_out) as u64;
                c = c_out;
                h = ho;
                w = wo;
                f
            }
            LayerKind::ClippedRelu { .. } | LayerKind::QuantStub => (c * h * w) as u64,
            LayerKind::Gdn { slim, .. } => {
                let mix = 2 * (h * w * c * c) as u64 + (h * w * c) as u64;
                let absdiv = 2 * (c * h * w) as u64;
                let affine = if slim.is_some() { 2 * (c * h * w) as u64 } else { 0 };
                mix + absdiv + affine
            }
        };
        per_layer.push((layer.id.clone(), f));
        total += f;
    }
    let pixels = (input_hw.0 * input_hw.1) as f64;
    Ok(FlopsReport { per_layer, total, per_pixel: total as f64 / pixels })
}
