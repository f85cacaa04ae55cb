//! Per-layer bit-width plans and the memory-footprint-weighted equivalent
//! bit-width metric, computed in exact rational arithmetic.

use crate::codec::model::{LayerKind, Model};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use num_rational::Ratio;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 16;

/// Assignment of a bit width to every quantized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BitWidthPlan {
    /// (layer id, bits), in model order.
    pub entries: Vec<(String, u8)>,
    pub frozen: Vec<bool>,
    pub epsilon: f64,
    /// Reference loss the tolerance is measured against.
    pub baseline_loss: f64,
}

impl BitWidthPlan {
    pub fn uniform(layers: &[String], bits: u8) -> Self {
        BitWidthPlan {
            entries: layers.iter().map(|l| (l.clone(), bits)).collect(),
            frozen: vec![false; layers.len()],
            epsilon: 0.0,
            baseline_loss: f64::NAN,
        }
    }

    pub fn bits_of(&self, layer: &str) -> Option<u8> {
        self.entries.iter().find(|(l, _)| l == layer).map(|&(_, b)| b)
    }

    pub fn set(&mut self, layer: &str, bits: u8) {
        if let Some(e) = self.entries.iter_mut().find(|(l, _)| l == layer) {
            e.1 = bits;
        }
    }

    pub fn widths(&self) -> Vec<u8> {
        self.entries.iter().map(|&(_, b)| b).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (l, b) in &self.entries {
            if !(MIN_BITS..=MAX_BITS).contains(b) {
                return Err(Error::invalid(format!("layer '{}' width {} outside 2..=16", l, b)));
            }
        }
        Ok(())
    }
}

/// Layers that participate in bit-width plans: every layer carrying
/// quantized weights or a searchable activation edge (fixed-format image,
/// latent, and output edges are interface contracts, not plan entries).
pub fn plannable_layers<T: Scalar>(model: &Model<T>) -> Vec<String> {
    model
        .layers
        .iter()
        .enumerate()
        .filter(|(i, l)| {
            l.kind.has_weights()
                || matches!(
                    model.edge_policy(*i),
                    crate::codec::model::EdgePolicy::Calibrated { .. }
                )
        })
        .map(|(_, l)| l.id.clone())
        .collect()
}

/// Apply a plan: each entry sets the layer's weight bits and its input
/// edge's activation bits (fixed edges keep their width).
pub fn apply_plan<T: Scalar>(model: &mut Model<T>, plan: &BitWidthPlan) -> Result<()> {
    plan.validate()?;
    for (layer, bits) in &plan.entries {
        let idx = model.layer_index(layer)?;
        model.layers[idx].w_bits = *bits;
        if let Some(edge) = &mut model.layers[idx].in_edge {
            if !edge.fixed_bits {
                edge.bits = *bits;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FootprintMode {
    /// Output feature-map element counts, normalized.
    ElementCount,
    /// The literal (8, 4, 2, 1)/15 coefficients of a 4-layer synthesis stack.
    PaperSynthesis,
}

/// Per-layer memory weights, positive and summing to exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FootprintModel {
    /// (layer id, weight) aligned with plan entries.
    pub weights: Vec<(String, Ratio<u64>)>,
}

impl FootprintModel {
    pub fn validate(&self) -> Result<()> {
        let sum: Ratio<u64> = self.weights.iter().map(|(_, w)| *w).sum();
        if sum != Ratio::from_integer(1) {
            return Err(Error::invalid(format!("footprint weights sum to {}, not 1", sum)));
        }
        if self.weights.iter().any(|(_, w)| *w.numer() == 0) {
            return Err(Error::invalid("footprint weights must be positive"));
        }
        Ok(())
    }
}

/// Feature-map element counts per plannable layer for `input` spatial dims.
fn element_counts<T: Scalar>(model: &Model<T>, input_hw: (usize, usize)) -> Vec<(String, u64)> {
    let plannable = plannable_layers(model);
    let (mut h, mut w) = input_hw;
    let mut c = crate::codec::model::IMAGE_CHANNELS;
    let mut out = Vec::new();
    for layer in &model.layers {
        match &layer.kind {
            LayerKind::Conv { w: kw, stride, pad, .. } => {
                c = kw.shape()[0];
                h = (h + 2 * pad - kw.shape()[2]) / stride + 1;
                w = (w + 2 * pad - kw.shape()[3]) / stride + 1;
            }
            LayerKind::Tconv { w: kw, stride, pad, .. } => {
                c = kw.shape()[1];
                h = (h - 1) * stride + kw.shape()[2] - 2 * pad;
                w = (w - 1) * stride + kw.shape()[3] - 2 * pad;
            }
            _ => {}
        }
        if plannable.contains(&layer.id) {
            out.push((layer.id.clone(), (c * h * w) as u64));
        }
    }
    out
}

/// Build a [`FootprintModel`] for the model's plannable layers.
pub fn footprint_from_graph<T: Scalar>(
    model: &Model<T>,
    input_hw: (usize, usize),
    mode: FootprintMode,
) -> Result<FootprintModel> {
    match mode {
        FootprintMode::ElementCount => {
            let counts = element_counts(model, input_hw);
            let total: u64 = counts.iter().map(|&(_, c)| c).sum();
            if total == 0 {
                return Err(Error::invalid("model has no plannable layers"));
            }
            Ok(FootprintModel {
                weights: counts
                    .into_iter()
                    .map(|(l, c)| (l, Ratio::new(c, total)))
                    .collect(),
            })
        }
        FootprintMode::PaperSynthesis => {
            let layers = plannable_layers(model);
            if layers.len() != 4 {
                return Err(Error::invalid(format!(
                    "paper_synthesis footprint needs exactly 4 layers, model has {}",
                    layers.len()
                )));
            }
            let coeffs = [8u64, 4, 2, 1];
            Ok(FootprintModel {
                weights: layers
                    .into_iter()
                    .zip(coeffs)
                    .map(|(l, c)| (l, Ratio::new(c, 15)))
                    .collect(),
            })
        }
    }
}

/// Literal (8,4,2,1)/15 footprint over arbitrary layer names.
pub fn paper_synthesis_footprint(layers: &[String]) -> Result<FootprintModel> {
    if layers.len() != 4 {
        return Err(Error::invalid(format!(
            "paper_synthesis footprint needs exactly 4 layers, got {}",
            layers.len()
        )));
    }
    let coeffs = [8u64, 4, 2, 1];
    Ok(FootprintModel {
        weights: layers.iter().cloned().zip(coeffs).map(|(l, c)| (l, Ratio::new(c, 15))).collect(),
    })
}

/// P_m = Σ w_l · P_l, exact.
pub fn equivalent_bitwidth_exact(plan: &BitWidthPlan, fp: &FootprintModel) -> Result<Ratio<u64>> {
    fp.validate()?;
    if plan.entries.len() != fp.weights.len() {
        return Err(Error::invalid(format!(
            "plan has {} layers, footprint has {}",
            plan.entries.len(),
            fp.weights.len()
        )));
    }
    let mut acc = Ratio::from_integer(0u64);
    for (layer, w) in &fp.weights {
        let bits = plan
            .bits_of(layer)
            .ok_or_else(|| Error::invalid(format!("plan misses footprint layer '{}'", layer)))?;
        acc += *w * Ratio::from_integer(bits as u64);
    }
    Ok(acc)
}

/// P_m rendered as a real number.
pub fn equivalent_bitwidth(plan: &BitWidthPlan, fp: &FootprintModel) -> Result<f64> {
    let r = equivalent_bitwidth_exact(plan, fp)?;
    Ok(*r.numer() as f64 / *r.denom() as f64)
}
