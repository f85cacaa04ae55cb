//! Dynamic range-aware quantization: calibration statistics, statistically
//! derived clip thresholds, weight-outlier percentile thresholds with a soft
//! regularization penalty, and the periodically recalibrated QAT fine-tune.

use crate::codec::model::{EdgePolicy, EdgeQuant, EdgeRange, EvalOptions, LayerKind, Model};
use crate::codec::train::{self, TrainHook, TrainOptions, TrainTrace};
use crate::error::{Error, Result};
use crate::gdn::ClipParams;
use crate::graph::{ComputeGraph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const THETA_FLOOR: f64 = 1e-6;

/// Per-edge activation statistics plus per-layer weight percentile bounds.
#[derive(Debug, Clone, Default)]
pub struct CalibStats {
    /// (consumer layer id, mean, population std, observed min, observed max)
    pub activations: Vec<ActStats>,
    /// (layer id, theta_min, theta_max)
    pub weight_thresholds: Vec<(String, f64, f64)>,
    pub sample_count: usize,
}

#[derive(Debug, Clone)]
pub struct ActStats {
    pub layer: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl CalibStats {
    pub fn act(&self, layer: &str) -> Option<&ActStats> {
        self.activations.iter().find(|a| a.layer == layer)
    }
}

#[derive(Debug, Clone)]
pub struct DraqConfig {
    /// Outlier percentile for weight thresholds.
    pub alpha: f64,
    /// Overrides the λ-derived k when set.
    pub k_override: Option<f64>,
    /// Coefficient of the outlier penalty.
    pub reg_strength: f64,
    /// Recalibration cadence in iterations.
    pub recalib_period: usize,
    pub act_bits: u8,
    pub weight_bits: u8,
}

impl Default for DraqConfig {
    fn default() -> Self {
        DraqConfig {
            alpha: 0.001,
            k_override: None,
            reg_strength: 1e-3,
            recalib_period: 100,
            act_bits: 8,
            weight_bits: 8,
        }
    }
}

impl DraqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::invalid(format!("alpha {} outside (0, 0.5)", self.alpha)));
        }
        if self.recalib_period < 1 {
            return Err(Error::invalid("recalib_period must be >= 1"));
        }
        if self.reg_strength < 0.0 {
            return Err(Error::invalid("reg_strength must be >= 0"));
        }
        Ok(())
    }
}

/// How activation quantizer ranges are derived from statistics.
#[derive(Debug, Clone)]
pub enum CalibMode {
    /// Observed min/max (the baseline QAT scheme).
    MinMax,
    /// μ ± kσ clipping intersected with the observed min/max.
    Draq { lambda: f64, k_override: Option<f64> },
}

/// k = 625λ + 2.
pub fn k_from_lambda(lambda: f64) -> f64 {
    625.0 * lambda + 2.0
}

/// Activation statistics over a calibration set: per monitored edge, the
/// mean/population-std/min/max of every element across all images, with
/// 64-bit accumulation in a fixed order. Also computes weight percentile
/// thresholds for every conv/tconv layer.
pub fn collect_activation_stats<T: Scalar>(
    model: &Model<T>,
    calib: &[Tensor<T>],
    alpha: f64,
    quant: bool,
) -> Result<CalibStats> {
    if calib.is_empty() {
        return Err(Error::invalid("calibration set is empty"));
    }
    struct Acc {
        layer: String,
        sum: f64,
        sumsq: f64,
        n: f64,
        min: f64,
        max: f64,
    }
    let mut accs: Vec<Acc> = Vec::new();
    for img in calib {
        let out = model.forward_eval(
            img,
            EvalOptions { quant, collect_raw: true, collect_grid: false },
        )?;
        for (layer, tensor) in &out.edges_raw {
            let slot = match accs.iter_mut().find(|a| &a.layer == layer) {
                Some(s) => s,
                None => {
                    accs.push(Acc {
                        layer: layer.clone(),
                        sum: 0.0,
                        sumsq: 0.0,
                        n: 0.0,
                        min: f64::INFINITY,
                        max: f64::NEG_INFINITY,
                    });
                    accs.last_mut().expect("just pushed")
                }
            };
            for &v in tensor.data() {
                let x = v.to64();
                slot.sum += x;
                slot.sumsq += x * x;
                slot.n += 1.0;
                if x < slot.min {
                    slot.min = x;
                }
                if x > slot.max {
                    slot.max = x;
                }
            }
        }
    }
    let activations = accs
        .into_iter()
        .map(|a| {
            let mean = a.sum / a.n;
            let var = (a.sumsq / a.n - mean * mean).max(0.0);
            ActStats { layer: a.layer, mean, std: var.sqrt(), min: a.min, max: a.max }
        })
        .collect();

    let mut weight_thresholds = Vec::new();
    for layer in &model.layers {
        if let LayerKind::Conv { w, .. } | LayerKind::Tconv { w, .. } = &layer.kind {
            let vals: Vec<f64> = w.data().iter().map(|v| v.to64()).collect();
            let (lo, hi) = weight_thresholds_of(&vals, alpha)?;
            weight_thresholds.push((layer.id.clone(), lo, hi));
        }
    }
    Ok(CalibStats { activations, weight_thresholds, sample_count: calib.len() })
}

/// Type-7 quantile (linear interpolation between closest order statistics).
fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Empirical (α, 1-α) percentile thresholds of a weight sample.
pub fn weight_thresholds_of(weights: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if weights.is_empty() {
        return Err(Error::invalid("weight threshold of empty tensor"));
    }
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::invalid(format!("alpha {} outside (0, 0.5)", alpha)));
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    Ok((quantile_type7(&sorted, alpha), quantile_type7(&sorted, 1.0 - alpha)))
}

/// Clip parameters per Eqs. θ = μ + kσ (one-sided) and (a, b) = μ ∓ kσ
/// (two-sided), with the θ floor on degenerate layers.
pub fn clip_thresholds<T: Scalar>(
    stats: &ActStats,
    lambda: f64,
    k_override: Option<f64>,
    one_sided: bool,
) -> ClipParams<T> {
    let k = k_override.unwrap_or_else(|| k_from_lambda(lambda));
    if one_sided {
        let theta = (stats.mean + k * stats.std).max(THETA_FLOOR);
        ClipParams::OneSided { theta: T::of(theta) }
    } else {
        let mut a = stats.mean - k * stats.std;
        let mut b = stats.mean + k * stats.std;
        if !(b - a > THETA_FLOOR) {
            a -= THETA_FLOOR;
            b += THETA_FLOOR;
        }
        ClipParams::TwoSided { lo: T::of(a), hi: T::of(b) }
    }
}

/// Install activation quantization bindings on every edge: fixed image /
/// latent / output edges plus statistics-derived ranges elsewhere. The
/// quantizer range never widens beyond the observed min/max.
pub fn calibrate_model<T: Scalar>(
    model: &mut Model<T>,
    calib: &[Tensor<T>],
    mode: &CalibMode,
    act_bits: u8,
    weight_bits: u8,
) -> Result<CalibStats> {
    // statistics come from the quantized forward once bindings exist
    // (recalibration case); the first pass uses the FP forward
    let quant = model.is_calibrated();
    let alpha = 0.001; // thresholds recomputed by the caller when it regularizes
    let stats = collect_activation_stats(model, calib, alpha, quant)?;
    apply_calibration(model, &stats, mode, act_bits, weight_bits)?;
    Ok(stats)
}

/// Bind edges from precomputed statistics (no forward pass).
pub fn apply_calibration<T: Scalar>(
    model: &mut Model<T>,
    stats: &CalibStats,
    mode: &CalibMode,
    act_bits: u8,
    weight_bits: u8,
) -> Result<()> {
    for idx in 0..model.layers.len() {
        let policy = model.edge_policy(idx);
        let keep_bits = model.layers[idx].in_edge.as_ref().map(|e| e.bits);
        match policy {
            EdgePolicy::Latent => {
                model.layers[idx].in_edge = None;
            }
            EdgePolicy::FixedImage => {
                model.layers[idx].in_edge = Some(EdgeQuant::image_input());
            }
            EdgePolicy::FixedOutput => {
                model.layers[idx].in_edge = Some(EdgeQuant::<T>::reconstruction_output());
            }
            EdgePolicy::Calibrated { unsigned, gdn_input } => {
                let id = model.layers[idx].id.clone();
                let st = stats.act(&id).ok_or_else(|| {
                    Error::NotCalibrated(format!("no activation statistics for layer '{}'", id))
                })?;
                let (mut lo, mut hi, clip) = match mode {
                    CalibMode::MinMax => (st.min, st.max, None),
                    CalibMode::Draq { lambda, k_override } => {
                        let cp = clip_thresholds::<T>(st, *lambda, *k_override, false);
                        let (a, b) = cp.bounds();
                        // never widen beyond the observed min/max
                        let lo = a.max(st.min);
                        let hi = b.min(st.max);
                        let clip = if gdn_input {
                            Some(ClipParams::TwoSided { lo: T::of(lo), hi: T::of(hi.max(lo + THETA_FLOOR)) })
                        } else {
                            None
                        };
                        (lo, hi, clip)
                    }
                };
                if unsigned {
                    lo = 0.0;
                    hi = hi.max(0.0);
                }
                if let LayerKind::ClippedRelu { theta } = &mut model.layers[idx].kind {
                    // one-sided threshold for the activation itself
                    let cp = match mode {
                        CalibMode::MinMax => None,
                        CalibMode::Draq { lambda, k_override } => {
                            Some(clip_thresholds::<T>(st, *lambda, *k_override, true))
                        }
                    };
                    if let Some(ClipParams::OneSided { theta: th }) = cp {
                        *theta = th;
                    } else {
                        *theta = T::infinity();
                    }
                }
                model.layers[idx].in_edge = Some(EdgeQuant {
                    clip,
                    range: EdgeRange::Range { lo, hi, signed: !unsigned },
                    bits: keep_bits.unwrap_or(act_bits),
                    fixed_bits: false,
                });
            }
        }
        if model.layers[idx].kind.has_weights() && keep_bits.is_none() {
            model.layers[idx].w_bits = weight_bits;
        }
    }
    Ok(())
}

/// Graph node for the outlier penalty of one weight tensor:
/// Σ relu(w − θmax) + Σ relu(θmin − w).
fn outlier_penalty<T: Scalar>(
    g: &mut ComputeGraph<T>,
    w: Var,
    theta_min: f64,
    theta_max: f64,
) -> Result<Var> {
    let over = g.add_scalar(w, T::of(-theta_max))?;
    let over = g.relu(over)?;
    let over = g.sum_all(over)?;
    let neg = g.neg(w)?;
    let under = g.add_scalar(neg, T::of(theta_min))?;
    let under = g.relu(under)?;
    let under = g.sum_all(under)?;
    g.add(over, under)
}

/// reg_strength · Σ_layers outlier penalty, as a graph node over the forward
/// pass's weight leaves. Zero when every weight lies inside its thresholds.
pub fn weight_reg_loss<T: Scalar>(
    g: &mut ComputeGraph<T>,
    params: &[(String, Var)],
    thresholds: &[(String, f64, f64)],
    reg_strength: f64,
) -> Result<Option<Var>> {
    if reg_strength == 0.0 || thresholds.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for (layer, lo, hi) in thresholds {
        let name = format!("{}.w", layer);
        let var = params
            .iter()
            .find(|(n, _)| n == &name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::NotCalibrated(format!("no weight leaf for '{}'", name)))?;
        let pen = outlier_penalty(g, var, *lo, *hi)?;
        total = Some(match total {
            None => pen,
            Some(t) => g.add(t, pen)?,
        });
    }
    match total {
        None => Ok(None),
        Some(t) => Ok(Some(g.mul_scalar(t, T::of(reg_strength))?)),
    }
}

/// Fraction of weights outside the per-layer thresholds.
pub fn outlier_fraction<T: Scalar>(model: &Model<T>, thresholds: &[(String, f64, f64)]) -> f64 {
    let mut outside = 0usize;
    let mut total = 0usize;
    for (layer, lo, hi) in thresholds {
        if let Ok(idx) = model.layer_index(layer) {
            if let LayerKind::Conv { w, .. } | LayerKind::Tconv { w, .. } = &model.layers[idx].kind
            {
                for &v in w.data() {
                    let x = v.to64();
                    total += 1;
                    if x < *lo || x > *hi {
                        outside += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        outside as f64 / total as f64
    }
}

/// The DRAQ fine-tuning hook: adds the outlier penalty and periodically
/// recomputes weight thresholds and activation clip ranges from a fixed
/// calibration subset.
pub struct DraqHook<T: Scalar> {
    pub cfg: DraqConfig,
    pub mode: CalibMode,
    pub calib: Vec<Tensor<T>>,
    pub thresholds: Vec<(String, f64, f64)>,
}

impl<T: Scalar> DraqHook<T> {
    pub fn new(cfg: DraqConfig, mode: CalibMode, calib: Vec<Tensor<T>>) -> Self {
        DraqHook { cfg, mode, calib, thresholds: Vec::new() }
    }
}

impl<T: Scalar> TrainHook<T> for DraqHook<T> {
    fn extra_loss(
        &mut self,
        g: &mut ComputeGraph<T>,
        params: &[(String, Var)],
    ) -> Result<Option<Var>> {
        weight_reg_loss(g, params, &self.thresholds, self.cfg.reg_strength)
    }

    fn periodic(&mut self, model: &mut Model<T>, _iter: usize) -> Result<()> {
        let stats = collect_activation_stats(model, &self.calib, self.cfg.alpha, model.is_calibrated())?;
        apply_calibration(model, &stats, &self.mode, self.cfg.act_bits, self.cfg.weight_bits)?;
        self.thresholds = stats.weight_thresholds;
        Ok(())
    }

    fn period(&self) -> usize {
        self.cfg.recalib_period
    }
}

/// DRAQ fine-tuning: QAT with calibrated clipping and outlier
/// regularization, recalibrated every `recalib_period` iterations. The
/// calibration subset is the first `calib_count` images of the dataset.
pub fn draq_finetune<T: Scalar>(
    model: &mut Model<T>,
    dataset: &[Tensor<T>],
    cfg: DraqConfig,
    mode: CalibMode,
    opts: TrainOptions,
    calib_count: usize,
) -> Result<(TrainTrace, CalibStats)> {
    cfg.validate()?;
    let calib: Vec<Tensor<T>> = dataset.iter().take(calib_count.max(1)).cloned().collect();
    let mut hook = DraqHook::new(cfg, mode, calib);
    let opts = TrainOptions { quant: true, ..opts };
    let trace = train::train(model, dataset, opts, &mut hook)?;
    let stats = CalibStats {
        activations: Vec::new(),
        weight_thresholds: hook.thresholds.clone(),
        sample_count: hook.calib.len(),
    };
    Ok((trace, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::model::{build_model, Activation, ModelConfig};
    use crate::rng::Rng;

    #[test]
    fn k_heuristic_values() {
        assert!((k_from_lambda(0.0018) - 3.125).abs() < 1e-12);
        assert!((k_from_lambda(0.025) - 17.625).abs() < 1e-12);
        assert!((k_from_lambda(1e-12) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn clip_threshold_arithmetic() {
        let st = ActStats { layer: "l".into(), mean: 1.0, std: 2.0, min: -10.0, max: 10.0 };
        match clip_thresholds::<f64>(&st, 0.0018, None, true) {
            ClipParams::OneSided { theta } => assert!((theta - 7.25).abs() < 1e-12),
            _ => panic!("expected one-sided"),
        }
        let st = ActStats { layer: "l".into(), mean: 0.0, std: 1.0, min: -10.0, max: 10.0 };
        match clip_thresholds::<f64>(&st, 0.0, Some(3.0), false) {
            ClipParams::TwoSided { lo, hi } => {
                assert!((lo + 3.0).abs() < 1e-12);
                assert!((hi - 3.0).abs() < 1e-12);
            }
            _ => panic!("expected two-sided"),
        }
        // degenerate sigma floors instead of crashing
        let st = ActStats { layer: "l".into(), mean: 0.0, std: 0.0, min: 0.0, max: 0.0 };
        let cp = clip_thresholds::<f64>(&st, 0.0018, None, false);
        let (a, b) = cp.bounds();
        assert!(b > a);
        match clip_thresholds::<f64>(&st, 0.0018, None, true) {
            ClipParams::OneSided { theta } => assert_eq!(theta, THETA_FLOOR),
            _ => panic!(),
        }
    }

    #[test]
    fn percentiles_match_hand_interpolation() {
        let (lo, hi) = weight_thresholds_of(&[1.0, 2.0, 3.0, 4.0], 0.25).unwrap();
        assert!((lo - 1.75).abs() < 1e-12);
        assert!((hi - 3.25).abs() < 1e-12);
    }

    #[test]
    fn percentiles_hit_extreme_order_stats() {
        let weights: Vec<f64> = (1..=1000).map(|v| v as f64).collect();
        let (lo, hi) = weight_thresholds_of(&weights, 0.001).unwrap();
        assert!(lo < 3.0, "lo = {}", lo);
        assert!(hi > 998.0, "hi = {}", hi);
    }

    #[test]
    fn percentiles_symmetric_sample() {
        let mut rng = Rng::new(7);
        let mut w: Vec<f64> = (0..999).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for i in 0..999 {
            // force exact symmetry
            if i % 2 == 1 {
                w[i] = -w[i - 1];
            }
        }
        w[998] = 0.0;
        let (lo, hi) = weight_thresholds_of(&w, 0.01).unwrap();
        assert!((lo + hi).abs() < 1e-9, "lo {} hi {}", lo, hi);
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let model = build_model::<f64>(
            ModelConfig { n: 8, m: 12, depth: 2, activation: Activation::Gdn, slim: false },
            3,
        )
        .unwrap();
        let mut rng = Rng::new(4);
        let imgs: Vec<Tensor<f64>> = (0..3)
            .map(|_| {
                Tensor::from_f64(
                    vec![1, 3, 16, 16],
                    &(0..768).map(|_| rng.uniform01()).collect::<Vec<_>>(),
                )
                .unwrap()
            })
            .collect();
        let stats = collect_activation_stats(&model, &imgs, 0.01, false).unwrap();

        // two-pass oracle on one monitored edge
        let target = &stats.activations[0];
        let mut values: Vec<f64> = Vec::new();
        for img in &imgs {
            let out = model
                .forward_eval(img, EvalOptions { quant: false, collect_raw: true, collect_grid: false })
                .unwrap();
            for (layer, t) in &out.edges_raw {
                if layer == &target.layer {
                    values.extend(t.data().iter().map(|v| v.to64()));
                }
            }
        }
        let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
        let var: f64 =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        let std = var.sqrt();
        assert!((mean - target.mean).abs() <= 1e-9 * mean.abs().max(1.0));
        assert!((std - target.std).abs() <= 1e-9 * std.abs().max(1.0));
    }

    #[test]
    fn constant_activations_have_zero_std() {
        // hand check of the accumulation formulas
        let vals = [2.0f64, 2.0, 2.0];
        let mean = vals.iter().sum::<f64>() / 3.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert_eq!(mean, 2.0);
        assert_eq!(var, 0.0);
        let two = [0.0f64, 2.0];
        let m = two.iter().sum::<f64>() / 2.0;
        let v = two.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 2.0;
        assert_eq!(m, 1.0);
        assert_eq!(v.sqrt(), 1.0);
    }

    #[test]
    fn empty_calibration_set_rejected() {
        let model = build_model::<f64>(
            ModelConfig { n: 8, m: 12, depth: 2, activation: Activation::Gdn, slim: false },
            3,
        )
        .unwrap();
        assert!(collect_activation_stats(&model, &[], 0.01, false).is_err());
    }

    #[test]
    fn reg_loss_zero_inside_and_linear_outside() {
        let mut g = ComputeGraph::<f64>::new();
        let mut w = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        w.requires_grad = true;
        let wv = g.leaf(&w);
        let params = vec![("l.w".to_string(), wv)];
        let thr = vec![("l".to_string(), -0.5, 0.5)];
        let none = weight_reg_loss(&mut g, &params, &thr, 0.5).unwrap().unwrap();
        assert_eq!(g.value(none).item(), 0.0);

        // one weight at theta_max + 1 with strength 0.5 -> penalty 0.5
        let mut g = ComputeGraph::<f64>::new();
        let mut w = Tensor::new(vec![2], vec![1.5, 0.0]).unwrap();
        w.requires_grad = true;
        let wv = g.leaf(&w);
        let params = vec![("l.w".to_string(), wv)];
        let pen = weight_reg_loss(&mut g, &params, &thr, 0.5).unwrap().unwrap();
        assert!((g.value(pen).item() - 0.5).abs() < 1e-12);
        g.backward(pen).unwrap();
        let grad = g.grad(wv).unwrap();
        assert!((grad[0] - 0.5).abs() < 1e-12); // +reg_strength on the outlier
        assert_eq!(grad[1], 0.0);
    }

    #[test]
    fn reg_gradient_matches_finite_differences() {
        let w = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        crate::gradcheck::assert_gradients(
            &[w],
            |g, vars| {
                let params = vec![("l.w".to_string(), vars[0])];
                let thr = vec![("l".to_string(), -0.5, 0.5)];
                Ok(weight_reg_loss(g, &params, &thr, 0.25)?.expect("nonzero"))
            },
            1e-5,
        );
    }

    #[test]
    fn monotone_in_lambda() {
        let st = ActStats { layer: "l".into(), mean: 0.3, std: 1.7, min: -100.0, max: 100.0 };
        let mut last = f64::NEG_INFINITY;
        for lambda in [0.0018, 0.0035, 0.0067, 0.013, 0.025] {
            let (lo, hi) = clip_thresholds::<f64>(&st, lambda, None, false).bounds();
            let width = hi - lo;
            assert!(width > last);
            last = width;
        }
    }

    #[test]
    fn calibration_never_widens_beyond_minmax() {
        let mut model = build_model::<f64>(
            ModelConfig { n: 8, m: 12, depth: 2, activation: Activation::Gdn, slim: false },
            9,
        )
        .unwrap();
        let mut rng = Rng::new(10);
        let imgs: Vec<Tensor<f64>> = (0..4)
            .map(|_| {
                Tensor::from_f64(
                    vec![1, 3, 16, 16],
                    &(0..768).map(|_| rng.uniform01()).collect::<Vec<_>>(),
                )
                .unwrap()
            })
            .collect();
        // huge k: the draq bounds exceed min/max and must be intersected
        let stats = calibrate_model(
            &mut model,
            &imgs,
            &CalibMode::Draq { lambda: 0.0018, k_override: Some(1e9) },
            8,
            8,
        )
        .unwrap();
        for (idx, layer) in model.layers.iter().enumerate() {
            if let (EdgePolicy::Calibrated { .. }, Some(edge)) =
                (model.edge_policy(idx), &layer.in_edge)
            {
                if let EdgeRange::Range { lo, hi, .. } = edge.range {
                    let st = stats.act(&layer.id).unwrap();
                    assert!(lo >= st.min - 1e-12);
                    assert!(hi <= st.max + 1e-12);
                }
            }
        }
    }
}
