//! Progressive mixed-precision bit-width search.
//!
//! Phase 1 establishes the reference loss at the starting precision and
//! descends uniformly until the tolerance breaks; phase 2 descends one layer
//! at a time (most sensitive first) and freezes each layer at the lowest
//! conforming width. The returned plan is re-asserted against the tolerance.

use crate::codec::model::Model;
use crate::codec::train::{self, TrainOptions};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::plan::{apply_plan, plannable_layers, BitWidthPlan, MAX_BITS, MIN_BITS};

/// Deterministic loss oracle over bit-width plans.
pub trait PlanEvaluator {
    /// Loss after the evaluator's fine-tune budget. Must be deterministic
    /// given the plan.
    fn evaluate(&mut self, plan: &BitWidthPlan) -> Result<f64>;

    /// Loss without fine-tuning (sensitivity probes).
    fn probe(&mut self, plan: &BitWidthPlan) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchOrder {
    BySensitivity { probe_bits: u8 },
    Given,
}

/// One row of the search step log.
#[derive(Debug, Clone)]
pub struct SearchStep {
    pub step: usize,
    pub layer: String,
    pub width: u8,
    pub loss: f64,
    pub accepted: bool,
}

/// Rank layers by the loss increase when that layer alone drops to
/// `probe_bits` (no fine-tuning); descending, ties by model order.
pub fn sensitivity_rank(
    layers: &[String],
    ev: &mut dyn PlanEvaluator,
    probe_bits: u8,
    start_bits: u8,
) -> Result<Vec<String>> {
    let base = BitWidthPlan::uniform(layers, start_bits);
    let base_loss = ev.probe(&base)?;
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let mut plan = base.clone();
        plan.set(layer, probe_bits);
        let loss = ev.probe(&plan)?;
        scored.push((i, loss - base_loss));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, _)| layers[i].clone()).collect())
}

/// Run the two-phase search. Returns the plan and the step log.
pub fn progressive_search(
    layers: &[String],
    ev: &mut dyn PlanEvaluator,
    epsilon: f64,
    order: SearchOrder,
    start_bits: u8,
    floor_bits: u8,
) -> Result<(BitWidthPlan, Vec<SearchStep>)> {
    if layers.is_empty() {
        return Err(Error::invalid("no layers to search"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon {} must be > 0", epsilon)));
    }
    if !(MIN_BITS..=MAX_BITS).contains(&start_bits)
        || !(MIN_BITS..=MAX_BITS).contains(&floor_bits)
        || floor_bits > start_bits
    {
        return Err(Error::invalid(format!(
            "invalid widths: start {} floor {}",
            start_bits, floor_bits
        )));
    }
    let mut log: Vec<SearchStep> = Vec::new();
    let mut step = 0usize;
    let mut record = |log: &mut Vec<SearchStep>, layer: &str, width: u8, loss: f64, accepted: bool| {
        log.push(SearchStep { step, layer: layer.to_string(), width, loss, accepted });
        step += 1;
    };

    // reference loss; double evaluation guards against nondeterminism
    let start_plan = BitWidthPlan::uniform(layers, start_bits);
    let l_ref = ev.evaluate(&start_plan)?;
    let l_ref2 = ev.evaluate(&start_plan)?;
    if l_ref != l_ref2 {
        return Err(Error::Numeric {
            op: "progressive_search",
            detail: format!("evaluator is nondeterministic: {} vs {}", l_ref, l_ref2),
        });
    }
    let budget = l_ref + epsilon;
    record(&mut log, "*", start_bits, l_ref, true);

    // phase 1: uniform descent
    let mut baseline_bits = start_bits;
    let mut w = start_bits;
    while w > floor_bits {
        w -= 1;
        let plan = BitWidthPlan::uniform(layers, w);
        let loss = ev.evaluate(&plan)?;
        let ok = loss <= budget;
        record(&mut log, "*", w, loss, ok);
        if !ok {
            break;
        }
        baseline_bits = w;
    }

    // phase 2: layer-wise descent in sensitivity order
    let ordered = match order {
        SearchOrder::Given => layers.to_vec(),
        SearchOrder::BySensitivity { probe_bits } => {
            sensitivity_rank(layers, ev, probe_bits.max(floor_bits), baseline_bits)?
        }
    };
    let mut plan = BitWidthPlan::uniform(layers, baseline_bits);
    plan.epsilon = epsilon;
    plan.baseline_loss = l_ref;
    for layer in &ordered {
        let mut best = plan.bits_of(layer).expect("ordered layers come from the plan");
        let mut w = best;
        while w > floor_bits {
            w -= 1;
            let mut cand = plan.clone();
            cand.set(layer, w);
            let loss = ev.evaluate(&cand)?;
            let ok = loss <= budget;
            record(&mut log, layer, w, loss, ok);
            if !ok {
                break;
            }
            best = w;
        }
        plan.set(layer, best);
        let idx = layers.iter().position(|l| l == layer).expect("layer from this plan");
        plan.frozen[idx] = true;
    }

    // post-hoc soundness assertion
    let final_loss = ev.evaluate(&plan)?;
    record(&mut log, "final", 0, final_loss, final_loss <= budget);
    if final_loss > budget {
        return Err(Error::Numeric {
            op: "progressive_search",
            detail: format!("returned plan violates tolerance: {} > {}", final_loss, budget),
        });
    }
    Ok((plan, log))
}

/// The real evaluator: clone the base model, apply the plan, fine-tune for a
/// fixed budget, measure the eval RD loss. Deterministic given the plan.
pub struct ModelPlanEvaluator<'a, T: Scalar> {
    pub base: &'a Model<T>,
    pub dataset: &'a [Tensor<T>],
    pub eval_images: &'a [Tensor<T>],
    pub lambda: f64,
    pub finetune: TrainOptions,
}

impl<'a, T: Scalar> ModelPlanEvaluator<'a, T> {
    fn run(&mut self, plan: &BitWidthPlan, finetune: bool) -> Result<f64> {
        let mut model = self.base.clone();
        apply_plan(&mut model, plan)?;
        if finetune && self.finetune.iters > 0 {
            let opts = TrainOptions { quant: true, ..self.finetune };
            train::train(&mut model, self.dataset, opts, &mut train::NoHook)?;
        }
        train::eval_rd_loss(&model, self.eval_images, self.lambda, true)
    }
}

impl<'a, T: Scalar> PlanEvaluator for ModelPlanEvaluator<'a, T> {
    fn evaluate(&mut self, plan: &BitWidthPlan) -> Result<f64> {
        self.run(plan, true)
    }

    fn probe(&mut self, plan: &BitWidthPlan) -> Result<f64> {
        self.run(plan, false)
    }
}

/// Search wrapper over a concrete model.
pub fn search_model<T: Scalar>(
    model: &Model<T>,
    dataset: &[Tensor<T>],
    eval_images: &[Tensor<T>],
    lambda: f64,
    epsilon: f64,
    order: SearchOrder,
    start_bits: u8,
    floor_bits: u8,
    finetune: TrainOptions,
) -> Result<(BitWidthPlan, Vec<SearchStep>)> {
    let layers = plannable_layers(model);
    let mut ev = ModelPlanEvaluator { base: model, dataset, eval_images, lambda, finetune };
    progressive_search(&layers, &mut ev, epsilon, order, start_bits, floor_bits)
}
