//! Block-prune baseline: rank blocks by diagonal empirical Fisher
//! information (squared gradients accumulated over one full data pass) and
//! keep the top blocks per layer.

use std::collections::HashMap;

use crate::blueprint::{Ratio, Scope, SubnetMode, SubnetSpec};
use crate::error::{Result, TwistError};
use crate::model::{forward_loss, names, ModelConfig, TokenBatch};
use crate::tensor::ParameterStore;

/// Per-layer, per-block squared-gradient mass.
#[derive(Clone, Debug, Default)]
pub struct FisherScores {
    /// [layer][head]
    pub attn: Vec<Vec<f64>>,
    /// [layer][chunk]
    pub ffn: Vec<Vec<f64>>,
    pub batches: usize,
}

/// Accumulate block Fisher over the given batches (one pass, full model,
/// no masking).
pub fn fisher_scores(
    store: &ParameterStore,
    cfg: &ModelConfig,
    batches: &[TokenBatch],
) -> Result<FisherScores> {
    if batches.is_empty() {
        return Err(TwistError::InvalidInput(
            "fisher pass needs at least one batch".into(),
        ));
    }
    let mut scores = FisherScores {
        attn: vec![vec![0.0; cfg.heads]; cfg.layers],
        ffn: vec![vec![0.0; cfg.ffn_blocks]; cfg.layers],
        batches: batches.len(),
    };
    for batch in batches {
        let (mut pass, loss) = forward_loss(store, cfg, batch, None)?;
        pass.tape.backward(loss)?;
        let grads: HashMap<&str, &[f32]> = pass
            .leaves
            .iter()
            .filter_map(|(n, v)| pass.tape.grad(*v).map(|g| (n.as_str(), g)))
            .collect();

        for l in 0..cfg.layers {
            let dh = cfg.d_head;
            let aw = cfg.attn_width();
            for h in 0..cfg.heads {
                let mut acc = 0.0f64;
                for name in [names::wq(l), names::wk(l), names::wv(l)] {
                    if let Some(g) = grads.get(name.as_str()) {
                        acc += col_band_sq(g, cfg.d_model, aw, h * dh, dh);
                    }
                }
                for name in [names::bq(l), names::bk(l), names::bv(l)] {
                    if let Some(g) = grads.get(name.as_str()) {
                        acc += g[h * dh..(h + 1) * dh]
                            .iter()
                            .map(|v| (*v as f64) * (*v as f64))
                            .sum::<f64>();
                    }
                }
                if let Some(g) = grads.get(names::c_attn(l).as_str()) {
                    acc += row_band_sq(g, cfg.d_model, h * dh, dh);
                }
                scores.attn[l][h] += acc;
            }
            let chunk = cfg.ffn_chunk();
            for rblk in 0..cfg.ffn_blocks {
                let mut acc = 0.0f64;
                if let Some(g) = grads.get(names::w_in(l).as_str()) {
                    acc += col_band_sq(g, cfg.d_model, cfg.d_inner, rblk * chunk, chunk);
                }
                if let Some(g) = grads.get(names::b_in(l).as_str()) {
                    acc += g[rblk * chunk..(rblk + 1) * chunk]
                        .iter()
                        .map(|v| (*v as f64) * (*v as f64))
                        .sum::<f64>();
                }
                if let Some(g) = grads.get(names::c_out(l).as_str()) {
                    acc += row_band_sq(g, cfg.d_model, rblk * chunk, chunk);
                }
                scores.ffn[l][rblk] += acc;
            }
        }
    }
    Ok(scores)
}

fn col_band_sq(g: &[f32], rows: usize, cols: usize, start: usize, len: usize) -> f64 {
    let mut acc = 0.0f64;
    for i in 0..rows {
        for v in &g[i * cols + start..i * cols + start + len] {
            acc += (*v as f64) * (*v as f64);
        }
    }
    acc
}

fn row_band_sq(g: &[f32], cols: usize, start_row: usize, len: usize) -> f64 {
    g[start_row * cols..(start_row + len) * cols]
        .iter()
        .map(|v| (*v as f64) * (*v as f64))
        .sum()
}

/// Keep the highest-Fisher blocks per layer; ties break toward the lower
/// block index. Deterministic given dataset order.
pub fn fisher_block_prune(
    store: &ParameterStore,
    cfg: &ModelConfig,
    batches: &[TokenBatch],
    ratio: Ratio,
    scope: Scope,
) -> Result<SubnetSpec> {
    let scores = fisher_scores(store, cfg, batches)?;
    let mut spec = SubnetSpec::full(cfg);
    spec.mode = SubnetMode::Masked;
    spec.scope = scope;
    spec.scale_correction = cfg.scale_correction;
    for l in 0..cfg.layers {
        if cfg.is_shared_layer(l) {
            continue;
        }
        if scope.includes_attn() {
            spec.attn_kept[l] = top_blocks(&scores.attn[l], ratio, cfg.heads)?;
        }
        if scope.includes_ffn() {
            spec.ffn_kept[l] = top_blocks(&scores.ffn[l], ratio, cfg.ffn_blocks)?;
        }
    }
    Ok(spec)
}

fn top_blocks(scores: &[f64], ratio: Ratio, n_full: usize) -> Result<Vec<usize>> {
    let keep = ratio.kept_count(n_full);
    if keep == 0 {
        return Err(TwistError::InvalidRatio(format!(
            "ratio {ratio} keeps zero of {n_full} blocks"
        )));
    }
    let mut order: Vec<usize> = (0..n_full).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}
