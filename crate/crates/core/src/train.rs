//! Shared training-loop plumbing and the plain supervised stage used for the
//! source-only baseline.

use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::data::{DomainData, DomainSampler, LabelMap};
use crate::error::{arg_err, Error, Result};
use crate::model::{BoundModel, SegModel};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// Optimisation settings shared by every stage.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageSchedule {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl StageSchedule {
    pub fn optimizer_for(&self, model: &SegModel) -> OptimizerState {
        OptimizerState::new(model, self.optimizer.clone().scheduled(self.steps))
    }
}

/// Differentiable `CE(softmax(logits), onehot)` weighted per pixel, in the
/// summed form.
pub fn pixel_ce(tape: &mut Tape, logits: Var, target: Tensor, weights: Tensor) -> Result<Var> {
    let axis = tape.value(logits).ndim() - 1;
    let probs = tape.softmax(logits, axis)?;
    tape.weighted_cross_entropy(probs, target, weights)
}

/// Summed CE of `model(image)` against a label map (weights all one).
pub fn supervised_ce(
    tape: &mut Tape,
    model: &SegModel,
    bound: &BoundModel,
    image: &Tensor,
    label: &LabelMap,
) -> Result<Var> {
    let fv = model.forward(tape, bound, image)?;
    let ones = Tensor::full(&[label.height(), label.width()], 1.0);
    pixel_ce(tape, fv.logits, label.onehot(model.classes()), ones)
}

/// Adds up a list of scalar vars (`None` for an empty list).
pub(crate) fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Option<Var>> {
    let mut it = vars.iter().copied();
    let Some(mut acc) = it.next() else { return Ok(None) };
    for v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(acc))
}

/// Backpropagates `loss`, checks finiteness and applies one optimiser step.
pub(crate) fn apply_step(
    tape: &Tape,
    loss: Var,
    model: &mut SegModel,
    bound: &BoundModel,
    opt: &mut OptimizerState,
) -> Result<()> {
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Training(alloc::format!("non-finite loss {}", value)));
    }
    let grads = tape.backward(loss)?;
    opt.step(model, &bound.grads(&grads))
}

/// Loss record of one supervised step (per-pixel mean CE).
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SupervisedLog {
    pub step: u64,
    pub loss: f64,
}

/// Plain supervised training on labelled domains (source-only baseline or a
/// target oracle).
pub fn supervised_stage(
    model: &mut SegModel,
    domains: &[DomainData],
    schedule: &StageSchedule,
    rng: &mut DetRng,
) -> Result<Vec<SupervisedLog>> {
    if domains.iter().all(|d| d.samples.is_empty()) {
        return Err(arg_err!("supervised stage needs labelled samples"));
    }
    let mut sampler = DomainSampler::new(domains, rng);
    let mut opt = schedule.optimizer_for(model);
    let mut logs = Vec::with_capacity(schedule.steps as usize);
    for step in 0..schedule.steps {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut terms = Vec::with_capacity(schedule.batch_size);
        let mut pixels = 0usize;
        for _ in 0..schedule.batch_size {
            let (d, i) = sampler.next(rng);
            let s = &domains[d].samples[i];
            let label = s.label.as_ref().ok_or_else(|| arg_err!("unlabelled sample in {}", domains[d].name))?;
            pixels += label.data().len();
            terms.push(supervised_ce(&mut tape, model, &bound, &s.image, label)?);
        }
        let Some(total) = sum_vars(&mut tape, &terms)? else { break };
        let loss = tape.scale(total, 1.0 / pixels as f64);
        logs.push(SupervisedLog { step, loss: tape.value(loss).item() });
        apply_step(&tape, loss, model, &bound, &mut opt)?;
    }
    Ok(logs)
}
