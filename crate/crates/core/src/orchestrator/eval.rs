//! Evaluation modes.
//!
//! Subnet evaluation masks parameters and applies the scaling hooks; full
//! model evaluation runs the dense parameters directly with neither. Subnet
//! losses across workers are combined by plain averaging.

use crate::blueprint::SubnetSpec;
use crate::error::Result;
use crate::model::{forward_loss, ModelConfig};
use crate::orchestrator::data::eval_batches;
use crate::tensor::ParameterStore;

#[derive(Clone, Copy, Debug)]
pub struct EvalResult {
    pub loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Mean token cross-entropy and perplexity over a token split.
pub fn evaluate(
    store: &ParameterStore,
    cfg: &ModelConfig,
    spec: Option<&SubnetSpec>,
    tokens: &[u32],
    batch_size: usize,
    seq: usize,
) -> Result<EvalResult> {
    let batches = eval_batches(tokens, batch_size, seq)?;
    let mut loss_sum = 0.0f64;
    let mut token_count = 0usize;
    for batch in &batches {
        let (pass, loss) = forward_loss(store, cfg, batch, spec)?;
        let l = pass.tape.value(loss).data()[0] as f64;
        loss_sum += l * batch.tokens() as f64;
        token_count += batch.tokens();
    }
    let loss = loss_sum / token_count as f64;
    Ok(EvalResult {
        loss,
        perplexity: loss.exp(),
        tokens: token_count,
    })
}

/// Evaluate each worker's subnet independently and average the losses.
pub fn evaluate_subnets_avg(
    store: &ParameterStore,
    cfg: &ModelConfig,
    specs: &[SubnetSpec],
    tokens: &[u32],
    batch_size: usize,
    seq: usize,
) -> Result<(f64, Vec<EvalResult>)> {
    let mut results = Vec::with_capacity(specs.len());
    for spec in specs {
        results.push(evaluate(store, cfg, Some(spec), tokens, batch_size, seq)?);
    }
    let mean = results.iter().map(|r| r.loss).sum::<f64>() / results.len().max(1) as f64;
    Ok((mean, results))
}
