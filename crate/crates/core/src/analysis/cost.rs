//! Parameter, memory, and communication accounting.
//!
//! Counts per piece:
//!
//! ```text
//! N_embd  = vocab · d_model
//! N_attn  = 4·d_attn·d_model + 3·d_attn + d_model     (d_attn = α·H·d_head)
//! N_ffn   = 2·d_ffn·d_model + d_ffn + d_model         (d_ffn  = β·d_inner)
//! N_ln    = 2·d_model
//! N_layer = 2·N_ln + α-scaled N_attn + β-scaled N_ffn
//! N_model = N_embd + Σ_l N_layer + N_proj
//! ```
//!
//! A pre-layernorm layer carries two layernorms, hence the 2·N_ln term.
//! N_model excludes the learned positional table; it is counted separately
//! and included in memory/communication figures (the materialized store
//! holds it). N_proj is zero with tied weights.

use serde::{Deserialize, Serialize};

use crate::blueprint::SubnetSpec;
use crate::error::{Result, TwistError};
use crate::model::{Activation, ModelConfig};

pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostReport {
    pub n_embd: u64,
    /// Positional table, reported separately from the N_model formula.
    pub n_pos: u64,
    pub n_ln: u64,
    pub n_attn: Vec<u64>,
    pub n_ffn: Vec<u64>,
    pub n_layer: Vec<u64>,
    pub n_proj: u64,
    pub n_model: u64,
    pub n_model_with_pos: u64,
    /// Block-owned linear terms only (weights plus per-block biases); the
    /// part of a layer that scales exactly with sparsity.
    pub n_partitioned_linear: u64,
    pub bytes_per_param: u64,
    pub memory_bytes: u64,
}

fn attn_piece(d_attn: u64, d_model: u64) -> u64 {
    4 * d_attn * d_model + 3 * d_attn + d_model
}

fn ffn_piece(d_ffn: u64, d_model: u64) -> u64 {
    2 * d_ffn * d_model + d_ffn + d_model
}

/// Exact integer sparsity resolution: α·H (and β·R) must land on whole
/// blocks.
fn scaled_blocks(frac: f64, blocks: usize, what: &str, layer: usize) -> Result<u64> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(TwistError::InvalidInput(format!(
            "{what} sparsity {frac} for layer {layer} outside (0, 1]"
        )));
    }
    let scaled = frac * blocks as f64;
    let rounded = scaled.round();
    if (scaled - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(TwistError::InvalidInput(format!(
            "invalid sparsity: {what} fraction {frac} of {blocks} blocks is not integral (layer {layer})"
        )));
    }
    Ok(rounded as u64)
}

/// Parameter counts for per-layer attention sparsity α and FFN sparsity β.
pub fn count_params(cfg: &ModelConfig, alpha: &[f64], beta: &[f64]) -> Result<CostReport> {
    cfg.validate()?;
    if alpha.len() != cfg.layers || beta.len() != cfg.layers {
        return Err(TwistError::InvalidInput(format!(
            "need {} per-layer sparsities, got {}/{}",
            cfg.layers,
            alpha.len(),
            beta.len()
        )));
    }
    let d = cfg.d_model as u64;
    let n_embd = cfg.vocab as u64 * d;
    let n_pos = cfg.context as u64 * d;
    let n_ln = 2 * d;
    let mut n_attn = Vec::with_capacity(cfg.layers);
    let mut n_ffn = Vec::with_capacity(cfg.layers);
    let mut n_layer = Vec::with_capacity(cfg.layers);
    let mut n_part_linear = 0u64;
    for l in 0..cfg.layers {
        let heads = scaled_blocks(alpha[l], cfg.heads, "attention", l)?;
        let chunks = scaled_blocks(beta[l], cfg.ffn_blocks, "ffn", l)?;
        let d_attn = heads * cfg.d_head as u64;
        let d_ffn = chunks * cfg.ffn_chunk() as u64;
        let a = attn_piece(d_attn, d);
        let f = ffn_piece(d_ffn, d);
        n_attn.push(a);
        n_ffn.push(f);
        n_layer.push(2 * n_ln + a + f);
        n_part_linear += 4 * d_attn * d + 3 * d_attn + 2 * d_ffn * d + d_ffn;
    }
    let n_proj = if cfg.tie_projection {
        0
    } else {
        d * cfg.vocab as u64
    };
    let n_model = n_embd + n_layer.iter().sum::<u64>() + n_proj;
    let n_model_with_pos = n_model + n_pos;
    Ok(CostReport {
        n_embd,
        n_pos,
        n_ln,
        n_attn,
        n_ffn,
        n_layer,
        n_proj,
        n_model,
        n_model_with_pos,
        n_partitioned_linear: n_part_linear,
        bytes_per_param: BYTES_PER_PARAM,
        memory_bytes: BYTES_PER_PARAM * n_model_with_pos,
    })
}

/// Uniform-sparsity convenience wrapper: shared layers stay dense.
pub fn count_params_uniform(cfg: &ModelConfig, alpha: f64, beta: f64) -> Result<CostReport> {
    let a: Vec<f64> = (0..cfg.layers)
        .map(|l| if cfg.is_shared_layer(l) { 1.0 } else { alpha })
        .collect();
    let b: Vec<f64> = (0..cfg.layers)
        .map(|l| if cfg.is_shared_layer(l) { 1.0 } else { beta })
        .collect();
    count_params(cfg, &a, &b)
}

/// Appendix-style count for an arbitrary subnet spec, including the
/// positional table — the formula route that must agree with manifest
/// byte accounting.
pub fn subnet_params_formula(cfg: &ModelConfig, spec: &SubnetSpec) -> u64 {
    let d = cfg.d_model as u64;
    let mut total = cfg.vocab as u64 * d + cfg.context as u64 * d;
    for l in 0..cfg.layers {
        let d_attn = (spec.attn_kept[l].len() * cfg.d_head) as u64;
        let d_ffn = (spec.ffn_kept[l].len() * cfg.ffn_chunk()) as u64;
        total += 2 * (2 * d) + attn_piece(d_attn, d) + ffn_piece(d_ffn, d);
    }
    if !cfg.tie_projection {
        total += d * cfg.vocab as u64;
    }
    total
}

/// Total communication bytes for a schedule of rounds: every parameter of
/// every worker's subnet is sent to and from the worker.
pub fn comm_volume(cfg: &ModelConfig, schedule: &[Vec<SubnetSpec>]) -> u64 {
    let mut bytes = 0u64;
    for round in schedule {
        for spec in round {
            bytes += 2 * BYTES_PER_PARAM * subnet_params_formula(cfg, spec);
        }
    }
    bytes
}

/// GPT-2 family presets (canonical published dimensions).
pub fn gpt2_preset(name: &str) -> Option<ModelConfig> {
    let (layers, d_model, heads, d_inner) = match name {
        "gpt2-small" | "gpt2" => (12, 768, 12, 3072),
        "gpt2-medium" => (24, 1024, 16, 4096),
        "gpt2-large" => (36, 1280, 20, 5120),
        "gpt2-xl" => (48, 1600, 25, 6400),
        _ => return None,
    };
    Some(ModelConfig {
        layers,
        d_model,
        heads,
        d_head: d_model / heads,
        d_inner,
        ffn_blocks: 12,
        vocab: 50257,
        context: 1024,
        shared_layers: [0, 1, layers - 2, layers - 1].into_iter().collect(),
        activation: Activation::Gelu,
        tie_projection: true,
        scale_correction: true,
    })
}

pub const GPT2_FAMILY: [&str; 4] = ["gpt2-small", "gpt2-medium", "gpt2-large", "gpt2-xl"];

/// Subnet/full memory ratio across a model family for a given block
/// fraction (all layers partitioned, N_proj tied). Shared parameters keep
/// the ratio above the block fraction; it decays toward it as models grow.
pub fn memory_ratio_curve(family: &[ModelConfig], fraction: f64) -> Result<Vec<(u64, f64)>> {
    let mut out = Vec::with_capacity(family.len());
    for cfg in family {
        let mut all_part = cfg.clone();
        all_part.shared_layers = Default::default();
        let full = count_params(&all_part, &vec![1.0; cfg.layers], &vec![1.0; cfg.layers])?;
        let sub = count_params(
            &all_part,
            &vec![fraction; cfg.layers],
            &vec![fraction; cfg.layers],
        )?;
        out.push((full.n_model, sub.n_model as f64 / full.n_model as f64));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appendix_pieces_for_gpt2_small() {
        let cfg = gpt2_preset("gpt2-small").unwrap();
        let r = count_params(&cfg, &vec![1.0; 12], &vec![1.0; 12]).unwrap();
        // N_ln = 2·d_model = 1536
        assert_eq!(r.n_ln, 1536);
        // N_attn at d_attn = 768: 4·768·768 + 3·768 + 768 = 2,362,368
        assert_eq!(r.n_attn[0], 2_362_368);
        assert_eq!(r.n_ffn[0], 2 * 3072 * 768 + 3072 + 768);
    }

    #[test]
    fn gpt2_small_lands_near_124m() {
        let cfg = gpt2_preset("gpt2-small").unwrap();
        let r = count_params(&cfg, &vec![1.0; 12], &vec![1.0; 12]).unwrap();
        let err = (r.n_model_with_pos as f64 - 124e6).abs() / 124e6;
        assert!(err < 0.02, "{} vs 124M ({err:.3})", r.n_model_with_pos);
        // The paper's pure N_model (no positional) is also within 2%.
        let err2 = (r.n_model as f64 - 124e6).abs() / 124e6;
        assert!(err2 < 0.02);
    }

    #[test]
    fn ratio_curve_decreases_toward_half() {
        let family: Vec<ModelConfig> = GPT2_FAMILY
            .iter()
            .map(|n| gpt2_preset(n).unwrap())
            .collect();
        let curve = memory_ratio_curve(&family, 0.5).unwrap();
        for (_, ratio) in &curve {
            assert!(*ratio > 0.5 && *ratio < 1.0, "ratio {ratio}");
        }
        for pair in curve.windows(2) {
            assert!(pair[1].1 < pair[0].1, "not strictly decreasing: {curve:?}");
        }
    }

    #[test]
    fn zero_shared_limit_is_exactly_half() {
        // Block-owned linear terms alone scale exactly with the fraction.
        let cfg = gpt2_preset("gpt2-small").unwrap();
        let mut all_part = cfg.clone();
        all_part.shared_layers = Default::default();
        let full = count_params(&all_part, &vec![1.0; 12], &vec![1.0; 12]).unwrap();
        let half = count_params(&all_part, &vec![0.5; 12], &vec![0.5; 12]).unwrap();
        assert_eq!(half.n_partitioned_linear * 2, full.n_partitioned_linear);
    }

    #[test]
    fn non_integral_sparsity_is_rejected() {
        let cfg = gpt2_preset("gpt2-small").unwrap(); // 12 heads
        let mut a = vec![1.0; 12];
        a[3] = 0.4; // 4.8 heads
        let err = count_params(&cfg, &a, &vec![1.0; 12]).unwrap_err();
        assert!(matches!(err, TwistError::InvalidInput(_)));
    }

    #[test]
    fn comm_volume_counts_both_directions() {
        let cfg = ModelConfig::desk_default(64);
        let full = SubnetSpec::full(&cfg);
        let bytes = comm_volume(&cfg, &[vec![full.clone()]]);
        assert_eq!(bytes, 2 * 4 * subnet_params_formula(&cfg, &full));
    }
}
