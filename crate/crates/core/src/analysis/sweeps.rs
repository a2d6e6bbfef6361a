//! Subnet quality sweeps: loss distributions over random deployment subnets
//! (stability) and train/eval ratio mismatch grids (robustness).

use rayon::prelude::*;

use crate::blueprint::{deployment_spec, Ratio, Scope, SubnetSpec};
use crate::error::{Result, TwistError};
use crate::model::ModelConfig;
use crate::orchestrator::evaluate;
use crate::tensor::{ParameterStore, Rng};

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub train_ratio: Ratio,
    pub eval_ratio: Ratio,
    pub scope: Scope,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    /// "loss" or "ppl".
    pub metric: String,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, train: Ratio, eval: Ratio) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.train_ratio == train && c.eval_ratio == eval)
    }
}

fn stats(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

/// Evaluate `n_subnets` random deployment subnets per ratio on a checkpoint.
/// The same specs (same seed) are used for every checkpoint passed through
/// this function with identical config, making paired comparisons exact.
#[allow(clippy::too_many_arguments)]
pub fn subnet_loss_distribution(
    store: &ParameterStore,
    cfg: &ModelConfig,
    label: Ratio,
    ratios: &[Ratio],
    n_subnets: usize,
    scope: Scope,
    tokens: &[u32],
    batch_size: usize,
    seq: usize,
    seed: u64,
) -> Result<SweepResult> {
    let root = Rng::new(seed, 0xD3_B0);
    let mut cells = Vec::with_capacity(ratios.len());
    for (ri, &ratio) in ratios.iter().enumerate() {
        let losses: Vec<Result<f64>> = (0..n_subnets)
            .into_par_iter()
            .map(|i| {
                let mut r = root.substream_n(&[ri as u64, i as u64]);
                let spec = deployment_spec(cfg, ratio, scope, &mut r)?;
                let res = evaluate(store, cfg, Some(&spec), tokens, batch_size, seq)?;
                Ok(res.loss)
            })
            .collect();
        let losses: Vec<f64> = losses.into_iter().collect::<Result<_>>()?;
        let (mean, std, min, max) = stats(&losses);
        cells.push(SweepCell {
            train_ratio: label,
            eval_ratio: ratio,
            scope,
            n: n_subnets,
            mean,
            std,
            min,
            max,
        });
    }
    Ok(SweepResult {
        metric: "loss".into(),
        cells,
    })
}

/// Paired stability comparison of two checkpoints sharing one ModelConfig.
#[allow(clippy::too_many_arguments)]
pub fn stability_sweep(
    twist: (&ParameterStore, &ModelConfig),
    baseline: (&ParameterStore, &ModelConfig),
    train_label_twist: Ratio,
    ratios: &[Ratio],
    n_subnets: usize,
    scope: Scope,
    tokens: &[u32],
    batch_size: usize,
    seq: usize,
    seed: u64,
) -> Result<(SweepResult, SweepResult)> {
    if twist.1 != baseline.1 {
        return Err(TwistError::InvalidInput(
            "stability sweep needs both checkpoints to share a ModelConfig".into(),
        ));
    }
    let full = Ratio::new(twist.1.heads as u32, twist.1.heads as u32).unwrap();
    let a = subnet_loss_distribution(
        twist.0,
        twist.1,
        train_label_twist,
        ratios,
        n_subnets,
        scope,
        tokens,
        batch_size,
        seq,
        seed,
    )?;
    let b = subnet_loss_distribution(
        baseline.0,
        baseline.1,
        full,
        ratios,
        n_subnets,
        scope,
        tokens,
        batch_size,
        seq,
        seed,
    )?;
    Ok((a, b))
}

/// Mean eval perplexity per (train ratio, eval ratio) cell.
#[allow(clippy::too_many_arguments)]
pub fn robustness_grid(
    checkpoints: &[(Ratio, &ParameterStore)],
    cfg: &ModelConfig,
    eval_ratios: &[Ratio],
    n_per_cell: usize,
    scope: Scope,
    tokens: &[u32],
    batch_size: usize,
    seq: usize,
    seed: u64,
) -> Result<SweepResult> {
    let root = Rng::new(seed, 0x6B1D);
    let mut cells = Vec::new();
    for (train_ratio, store) in checkpoints {
        for (ei, &eval_ratio) in eval_ratios.iter().enumerate() {
            let ppls: Vec<Result<f64>> = (0..n_per_cell)
                .into_par_iter()
                .map(|i| {
                    let mut r = root.substream_n(&[ei as u64, i as u64]);
                    let spec = deployment_spec(cfg, eval_ratio, scope, &mut r)?;
                    let res = evaluate(store, cfg, Some(&spec), tokens, batch_size, seq)?;
                    Ok(res.perplexity)
                })
                .collect();
            let ppls: Vec<f64> = ppls.into_iter().collect::<Result<_>>()?;
            let (mean, std, min, max) = stats(&ppls);
            cells.push(SweepCell {
                train_ratio: *train_ratio,
                eval_ratio,
                scope,
                n: n_per_cell,
                mean,
                std,
                min,
                max,
            });
        }
    }
    Ok(SweepResult {
        metric: "ppl".into(),
        cells,
    })
}

/// Mean degradation of downward cells (train wide, eval narrow) and upward
/// cells, each measured against the matched-diagonal cell at the same eval
/// ratio. Returns None when the grid has no off-diagonal cells.
pub fn grid_asymmetry(grid: &SweepResult) -> Option<(f64, f64)> {
    let diag = |eval: Ratio| -> Option<f64> {
        grid.cells
            .iter()
            .find(|c| c.train_ratio == eval && c.eval_ratio == eval)
            .map(|c| c.mean)
    };
    let mut down = Vec::new();
    let mut up = Vec::new();
    for c in &grid.cells {
        if c.train_ratio == c.eval_ratio {
            continue;
        }
        let Some(base) = diag(c.eval_ratio) else {
            continue;
        };
        let degradation = c.mean - base;
        if c.train_ratio.value() > c.eval_ratio.value() {
            down.push(degradation);
        } else {
            up.push(degradation);
        }
    }
    if down.is_empty() || up.is_empty() {
        return None;
    }
    Some((
        down.iter().sum::<f64>() / down.len() as f64,
        up.iter().sum::<f64>() / up.len() as f64,
    ))
}
