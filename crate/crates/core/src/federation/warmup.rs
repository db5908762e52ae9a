//! Warm start before federated training: modality-specific expert warm-up and
//! gate pre-training on a small shared pool.
//!
//! With `top_k = 1` the routing weight of the single selected expert is
//! identically 1, so the gate receives no gradient through top-K routing.
//! Gate pre-training therefore routes densely (`top_k = M`) while only the
//! gate is trained.

use crate::data::{CorrelationMap, Sample};
use crate::error::{Error, Result};
use crate::moe::{ExpertMask, MoeParams, Trainable};

use super::local_step;

/// Train each expert on the shared samples of the modalities it is correlated
/// with, routing forced to that expert alone.
pub fn warm_experts(
    params: &mut MoeParams,
    shared: &[Sample],
    correlation: &CorrelationMap,
    steps: usize,
    eta: f64,
) -> Result<()> {
    let experts = params.config.experts;
    for m in 0..experts {
        let batch: Vec<&Sample> = shared
            .iter()
            .filter(|s| {
                correlation
                    .experts_of_modality
                    .get(s.modality)
                    .is_some_and(|es| es.contains(&m))
            })
            .collect();
        if batch.is_empty() {
            continue;
        }
        let mask = ExpertMask::new([m], experts)?;
        let trainable = Trainable::experts([m]);
        for _ in 0..steps {
            local_step(params, &batch, &trainable, Some(&mask), eta, 0.0, None)?;
        }
    }
    Ok(())
}

/// Gate-only descent on the shared pool with dense routing. The model's
/// `top_k` is restored afterwards.
pub fn pretrain_gate(params: &mut MoeParams, shared: &[Sample], steps: usize, eta: f64) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    if shared.is_empty() {
        return Err(Error::Argument("gate pre-training needs shared samples".into()));
    }
    let top_k = params.config.top_k;
    params.config.top_k = params.config.experts;
    let result = (0..steps)
        .try_for_each(|_| local_step(params, shared, &Trainable::gate_only(), None, 0.0, eta, None).map(|_| ()));
    params.config.top_k = top_k;
    result
}
