//! GDN slimming: L1-regularized channel scales and structured pruning.
//!
//! Training adds η·‖a‖₁ over the slim-GDN scale vectors; pruning removes
//! channels whose |a_i| falls below a threshold, together with the
//! producing filters of the preceding conv and the consuming slices of the
//! succeeding conv. A pruned channel's constant contribution b_i is folded
//! into the succeeding conv's bias via the spatial kernel sums.

use crate::codec::model::{LayerKind, Model};
use crate::codec::train::{self, TrainHook, TrainOptions, TrainTrace};
use crate::error::{Error, Result};
use crate::gdn::{GdnParams, SlimAffine};
use crate::graph::{ComputeGraph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::flops::flops_count;

/// Adds η·Σ|a_i| over every slim scale vector.
pub struct SlimHook {
    pub eta: f64,
}

impl<T: Scalar> TrainHook<T> for SlimHook {
    fn extra_loss(
        &mut self,
        g: &mut ComputeGraph<T>,
        params: &[(String, Var)],
    ) -> Result<Option<Var>> {
        if self.eta == 0.0 {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for (name, var) in params {
            if name.ends_with(".a") {
                let a = g.abs(*var)?;
                let s = g.sum_all(a)?;
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
            }
        }
        match total {
            None => Err(Error::invalid("slim training needs slim_gdn layers")),
            Some(t) => Ok(Some(g.mul_scalar(t, T::of(self.eta))?)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlimTrainOutput {
    pub trace: TrainTrace,
    /// Per slim layer: (layer id, |a_i| values in channel order).
    pub scale_histogram: Vec<(String, Vec<f64>)>,
}

/// Train with the slimming L1 term and report the resulting |a| profile.
pub fn slim_train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &[Tensor<T>],
    eta: f64,
    opts: TrainOptions,
) -> Result<SlimTrainOutput> {
    if eta < 0.0 {
        return Err(Error::invalid("eta must be >= 0"));
    }
    if !model
        .layers
        .iter()
        .any(|l| matches!(&l.kind, LayerKind::Gdn { slim: Some(_), .. }))
    {
        return Err(Error::invalid("slim training needs slim_gdn layers"));
    }
    let mut hook = SlimHook { eta };
    let trace = if eta == 0.0 {
        train::train(model, dataset, opts, &mut train::NoHook)?
    } else {
        train::train(model, dataset, opts, &mut hook)?
    };
    Ok(SlimTrainOutput { trace, scale_histogram: scale_histogram(model) })
}

pub fn scale_histogram<T: Scalar>(model: &Model<T>) -> Vec<(String, Vec<f64>)> {
    model
        .layers
        .iter()
        .filter_map(|l| match &l.kind {
            LayerKind::Gdn { slim: Some(s), .. } => {
                Some((l.id.clone(), s.a.data().iter().map(|v| v.to64().abs()).collect()))
            }
            _ => None,
        })
        .collect()
}

/// Sum of |a_i| over all slim layers.
pub fn l1_of_scales<T: Scalar>(model: &Model<T>) -> f64 {
    scale_histogram(model).iter().flat_map(|(_, v)| v.iter()).sum()
}

#[derive(Debug, Clone)]
pub struct PrunedLayerReport {
    pub layer: String,
    pub kept: Vec<usize>,
    pub before: usize,
    pub after: usize,
    /// Set when every channel fell below the threshold and the strongest
    /// one was retained instead.
    pub kept_max_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct PruneReport {
    pub layers: Vec<PrunedLayerReport>,
    pub epsilon_p: f64,
    pub flops_before: u64,
    pub flops_after: u64,
}

impl PruneReport {
    pub fn channels_before(&self) -> usize {
        self.layers.iter().map(|l| l.before).sum()
    }

    pub fn channels_after(&self) -> usize {
        self.layers.iter().map(|l| l.after).sum()
    }
}

fn slice_rows<T: Scalar>(t: &Tensor<T>, kept: &[usize], row_len: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(kept.len() * row_len);
    for &k in kept {
        data.extend_from_slice(&t.data()[k * row_len..(k + 1) * row_len]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = kept.len();
    let mut out = Tensor::new(shape, data).expect("slice shapes agree");
    out.requires_grad = t.requires_grad;
    out
}

fn slice_vec<T: Scalar>(t: &Tensor<T>, kept: &[usize]) -> Tensor<T> {
    let data: Vec<T> = kept.iter().map(|&k| t.data()[k]).collect();
    let mut out = Tensor::new(vec![kept.len()], data).expect("vector slice");
    out.requires_grad = t.requires_grad;
    out
}

/// Remove channels with |a_i| < ε_p from every slim GDN layer (always
/// keeping at least the strongest channel), shrink the neighboring convs,
/// and fold pruned constants into the succeeding conv's bias.
pub fn prune<T: Scalar>(
    model: &Model<T>,
    epsilon_p: f64,
    input_hw: (usize, usize),
) -> Result<(Model<T>, PruneReport)> {
    if !model
        .layers
        .iter()
        .any(|l| matches!(&l.kind, LayerKind::Gdn { slim: Some(_), .. }))
    {
        return Err(Error::invalid("prune needs a slim-trained model"));
    }
    let flops_before = flops_count(model, input_hw)?.total;
    let mut out = model.clone();
    let mut reports = Vec::new();

    for idx in 0..out.layers.len() {
        let (kept, fallback, slim_b) = match &out.layers[idx].kind {
            LayerKind::Gdn { slim: Some(s), inverse: false, .. } => {
                let a: Vec<f64> = s.a.data().iter().map(|v| v.to64().abs()).collect();
                let mut kept: Vec<usize> =
                    (0..a.len()).filter(|&i| a[i] >= epsilon_p).collect();
                let mut fallback = false;
                if kept.is_empty() {
                    let argmax = a
                        .iter()
                        .enumerate()
                        .max_by(|x, y| x.1.partial_cmp(y.1).expect("finite scales"))
                        .map(|(i, _)| i)
                        .expect("nonempty scale vector");
                    kept = vec![argmax];
                    fallback = true;
                }
                (kept, fallback, s.b.data().iter().map(|v| v.to64()).collect::<Vec<f64>>())
            }
            _ => continue,
        };
        let before = slim_b.len();
        if idx == 0 || idx + 1 >= out.layers.len() {
            return Err(Error::invalid(format!(
                "slim layer '{}' has no neighboring convs",
                out.layers[idx].id
            )));
        }

        // shrink the GDN parameters (rows and columns of gamma)
        if let LayerKind::Gdn { p, slim: Some(s), .. } = &mut out.layers[idx].kind {
            let c = p.channels();
            let rb = slice_vec(&p.r_beta, &kept);
            let rows = slice_rows(&p.r_gamma, &kept, c);
            let mut data = Vec::with_capacity(kept.len() * kept.len());
            for r in 0..kept.len() {
                for &kc in &kept {
                    data.push(rows.data()[r * c + kc]);
                }
            }
            let mut rg = Tensor::new(vec![kept.len(), kept.len(), 1, 1], data)?;
            rg.requires_grad = p.r_gamma.requires_grad;
            *p = GdnParams { r_beta: rb, r_gamma: rg };
            *s = SlimAffine { a: slice_vec(&s.a, &kept), b: slice_vec(&s.b, &kept) };
        }

        // preceding conv loses output filters
        match &mut out.layers[idx - 1].kind {
            LayerKind::Conv { w, b, .. } => {
                let row = w.shape()[1] * w.shape()[2] * w.shape()[3];
                *w = slice_rows(w, &kept, row);
                *b = slice_vec(b, &kept);
            }
            _ => {
                return Err(Error::invalid(format!(
                    "layer before '{}' is not a conv",
                    out.layers[idx].id
                )))
            }
        }

        // succeeding conv loses input slices; pruned constants fold into
        // its bias: b[co] += sum_removed b_i * sum_kh_kw W[co, i, :, :]
        match &mut out.layers[idx + 1].kind {
            LayerKind::Conv { w, b, .. } => {
                let (c_out, c_in, kh, kw) =
                    (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                let removed: Vec<usize> =
                    (0..c_in).filter(|i| !kept.contains(i)).collect();
                for co in 0..c_out {
                    let mut fold = 0.0f64;
                    for &i in &removed {
                        let mut ksum = 0.0f64;
                        for k in 0..kh * kw {
                            ksum += w.data()[(co * c_in + i) * kh * kw + k].to64();
                        }
                        fold += slim_b[i] * ksum;
                    }
                    let cur = b.data()[co].to64();
                    b.data_mut()[co] = T::of(cur + fold);
                }
                // drop the input slices
                let mut data = Vec::with_capacity(c_out * kept.len() * kh * kw);
                for co in 0..c_out {
                    for &i in &kept {
                        data.extend_from_slice(
                            &w.data()[(co * c_in + i) * kh * kw..(co * c_in + i + 1) * kh * kw],
                        );
                    }
                }
                let mut nw = Tensor::new(vec![c_out, kept.len(), kh, kw], data)?;
                nw.requires_grad = w.requires_grad;
                *w = nw;
            }
            _ => {
                return Err(Error::invalid(format!(
                    "layer after '{}' is not a conv",
                    out.layers[idx].id
                )))
            }
        }

        reports.push(PrunedLayerReport {
            layer: out.layers[idx].id.clone(),
            kept: kept.clone(),
            before,
            after: kept.len(),
            kept_max_fallback: fallback,
        });
    }

    let flops_after = flops_count(&out, input_hw)?.total;
    Ok((
        out,
        PruneReport { layers: reports, epsilon_p, flops_before, flops_after },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::model::{build_model, Activation, ModelConfig};
    use crate::codec::EvalOptions;
    use crate::rng::Rng;

    fn slim_model(seed: u64) -> Model<f64> {
        build_model(
            ModelConfig { n: 8, m: 12, depth: 2, activation: Activation::Gdn, slim: true },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn threshold_membership() {
        let mut model = slim_model(3);
        if let LayerKind::Gdn { slim: Some(s), .. } = &mut model.layers[1].kind {
            for (i, v) in [0.5, 1e-9, 0.3, 1e-9, 0.4, 1e-9, 0.2, 0.6].iter().enumerate() {
                s.a.data_mut()[i] = *v;
            }
        }
        let (_, report) = prune(&model, 1e-6, (16, 16)).unwrap();
        assert_eq!(report.layers[0].kept, vec![0, 2, 4, 6, 7]);
        assert!(report.flops_after < report.flops_before);
    }

    #[test]
    fn all_below_threshold_keeps_strongest() {
        let mut model = slim_model(3);
        if let LayerKind::Gdn { slim: Some(s), .. } = &mut model.layers[1].kind {
            for i in 0..8 {
                s.a.data_mut()[i] = 1e-9 * (i + 1) as f64;
            }
        }
        let (_, report) = prune(&model, 1e-4, (16, 16)).unwrap();
        assert_eq!(report.layers[0].kept, vec![7]);
        assert!(report.layers[0].kept_max_fallback);
    }

    #[test]
    fn exact_equivalence_with_dead_channels() {
        // channels with a_i = 0 and zero gamma columns, and a pad-0
        // succeeding conv: pruned output must match the original.
        let mut model = slim_model(11);
        let dead = [1usize, 4, 6];
        if let LayerKind::Gdn { p, slim: Some(s), .. } = &mut model.layers[1].kind {
            let c = p.channels();
            for &i in &dead {
                s.a.data_mut()[i] = 0.0;
                s.b.data_mut()[i] = 0.3 + i as f64 * 0.1;
                for r in 0..c {
                    // gamma column j=i must vanish so kept denominators match
                    p.r_gamma.data_mut()[r * c + i] = crate::gdn::softplus_inv(1e-12);
                }
            }
        }
        if let LayerKind::Conv { pad, .. } = &mut model.layers[2].kind {
            *pad = 0;
        }
        let mut rng = Rng::new(5);
        let x = Tensor::from_f64(
            vec![1, 3, 16, 16],
            &(0..768).map(|_| rng.uniform01()).collect::<Vec<_>>(),
        )
        .unwrap();
        let orig = model.forward_eval(&x, EvalOptions::default()).unwrap();
        let (pruned, report) = prune(&model, 1e-6, (16, 16)).unwrap();
        assert_eq!(report.layers[0].after, 5);
        let pr = pruned.forward_eval(&x, EvalOptions::default()).unwrap();
        for (a, b) in orig.recon.data().iter().zip(pr.recon.data()) {
            assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn flops_reduction_matches_closed_form() {
        let mut model = slim_model(7);
        if let LayerKind::Gdn { slim: Some(s), .. } = &mut model.layers[1].kind {
            for i in 0..4 {
                s.a.data_mut()[i] = 0.0;
            }
        }
        let before = flops_count(&model, (16, 16)).unwrap();
        let (pruned, report) = prune(&model, 1e-6, (16, 16)).unwrap();
        let after = flops_count(&pruned, (16, 16)).unwrap();
        assert_eq!(report.flops_before, before.total);
        assert_eq!(report.flops_after, after.total);

        // closed form: conv1 8->4 output channels at 8x8, conv2 loses 4
        // input slices at 4x4, gdn shrinks from 8 to 4 channels at 8x8
        let k2 = 16;
        let conv1_delta = 2 * (8 * 8 * 4 * 3 * k2) as u64 + (8 * 8 * 4) as u64;
        let conv2_delta = 2 * (4 * 4 * 12 * 4 * k2) as u64;
        let gdn_before = 2 * (8 * 8 * 8 * 8) as u64 + (8 * 8 * 8) as u64 + 4 * (8 * 8 * 8) as u64;
        let gdn_after = 2 * (8 * 8 * 4 * 4) as u64 + (8 * 8 * 4) as u64 + 4 * (8 * 8 * 4) as u64;
        let expected = conv1_delta + conv2_delta + (gdn_before - gdn_after);
        assert_eq!(before.total - after.total, expected);
    }

    #[test]
    fn prune_requires_slim_model() {
        let model = build_model::<f64>(
            ModelConfig { n: 8, m: 12, depth: 2, activation: Activation::Gdn, slim: false },
            3,
        )
        .unwrap();
        assert!(prune(&model, 1e-4, (16, 16)).is_err());
    }
}
