//! Block masks and physical subnet extraction.
//!
//! A block is one attention head's Wq/Wk/Wv columns plus the matching
//! C_attn rows (and the head's slice of the q/k/v biases), or one of R equal
//! FFN neuron chunks (W_in columns, b_in slice, C_out rows). Output-side
//! biases (c_proj_b, c_out_b) are shared, matching the parameter-count
//! accounting.

use crate::blueprint::SubnetSpec;
use crate::error::{Result, TwistError};
use crate::model::{names, ModelConfig};
use crate::tensor::{ParameterStore, Tensor};

/// 0/1 mask over the concatenated head dimension (length H·d_head).
pub fn head_mask_vec(kept: &[usize], heads: usize, d_head: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; heads * d_head];
    for &h in kept {
        m[h * d_head..(h + 1) * d_head].fill(1.0);
    }
    m
}

/// 0/1 mask over FFN activations (length d_inner), constant within each of
/// the R chunks.
pub fn ffn_mask_vec(kept: &[usize], blocks: usize, d_inner: usize) -> Vec<f32> {
    let chunk = d_inner / blocks;
    let mut m = vec![0.0f32; d_inner];
    for &r in kept {
        m[r * chunk..(r + 1) * chunk].fill(1.0);
    }
    m
}

fn block_col_ranges(kept: &[usize], width: usize) -> Vec<std::ops::Range<usize>> {
    kept.iter().map(|&b| b * width..(b + 1) * width).collect()
}

fn slice_cols(t: &Tensor, ranges: &[std::ops::Range<usize>]) -> Tensor {
    let (rows, cols) = t.dims2().expect("2-D tensor");
    let kept_cols: usize = ranges.iter().map(|r| r.len()).sum();
    let mut out = Tensor::zeros(&[rows, kept_cols]);
    {
        let src = t.data();
        let dst = out.data_mut();
        for i in 0..rows {
            let mut o = i * kept_cols;
            for r in ranges {
                let s = i * cols + r.start;
                dst[o..o + r.len()].copy_from_slice(&src[s..s + r.len()]);
                o += r.len();
            }
        }
    }
    out.requires_grad = t.requires_grad;
    out
}

fn slice_rows(t: &Tensor, ranges: &[std::ops::Range<usize>]) -> Tensor {
    let (_, cols) = t.dims2().expect("2-D tensor");
    let kept_rows: usize = ranges.iter().map(|r| r.len()).sum();
    let mut out = Tensor::zeros(&[kept_rows, cols]);
    {
        let src = t.data();
        let dst = out.data_mut();
        let mut o = 0;
        for r in ranges {
            let s = r.start * cols;
            let len = r.len() * cols;
            dst[o..o + len].copy_from_slice(&src[s..s + len]);
            o += len;
        }
    }
    out.requires_grad = t.requires_grad;
    out
}

fn slice_elems(t: &Tensor, ranges: &[std::ops::Range<usize>]) -> Tensor {
    let kept: usize = ranges.iter().map(|r| r.len()).sum();
    let mut out = Tensor::zeros(&[kept]);
    {
        let src = t.data();
        let dst = out.data_mut();
        let mut o = 0;
        for r in ranges {
            dst[o..o + r.len()].copy_from_slice(&src[r.start..r.end]);
            o += r.len();
        }
    }
    out.requires_grad = t.requires_grad;
    out
}

/// Materialize a physically smaller store holding only the kept blocks.
/// Shared parameters (embeddings, layernorms, output-side biases) and layers
/// in `shared_layers` are copied whole.
pub fn extract_physical_subnet(
    store: &ParameterStore,
    cfg: &ModelConfig,
    spec: &SubnetSpec,
) -> Result<ParameterStore> {
    spec.validate(cfg)?;
    let mut out = ParameterStore::new();
    let copy = |out: &mut ParameterStore, name: &str, store: &ParameterStore| -> Result<()> {
        out.insert(name, store.expect(name)?.clone())
    };

    copy(&mut out, names::TOKEN_EMBED, store)?;
    copy(&mut out, names::POS_EMBED, store)?;

    for l in 0..cfg.layers {
        let attn_all = spec.attn_kept[l].len() == cfg.heads;
        let ffn_all = spec.ffn_kept[l].len() == cfg.ffn_blocks;
        let head_ranges = block_col_ranges(&spec.attn_kept[l], cfg.d_head);
        let ffn_ranges = block_col_ranges(&spec.ffn_kept[l], cfg.ffn_chunk());

        copy(&mut out, &names::ln_attn_gamma(l), store)?;
        copy(&mut out, &names::ln_attn_beta(l), store)?;
        for (w, bias) in [
            (names::wq(l), names::bq(l)),
            (names::wk(l), names::bk(l)),
            (names::wv(l), names::bv(l)),
        ] {
            if attn_all {
                copy(&mut out, &w, store)?;
                copy(&mut out, &bias, store)?;
            } else {
                out.insert(&w, slice_cols(store.expect(&w)?, &head_ranges))?;
                out.insert(&bias, slice_elems(store.expect(&bias)?, &head_ranges))?;
            }
        }
        if attn_all {
            copy(&mut out, &names::c_attn(l), store)?;
        } else {
            out.insert(&names::c_attn(l), slice_rows(store.expect(&names::c_attn(l))?, &head_ranges))?;
        }
        copy(&mut out, &names::c_attn_b(l), store)?;

        copy(&mut out, &names::ln_ffn_gamma(l), store)?;
        copy(&mut out, &names::ln_ffn_beta(l), store)?;
        if ffn_all {
            copy(&mut out, &names::w_in(l), store)?;
            copy(&mut out, &names::b_in(l), store)?;
            copy(&mut out, &names::c_out(l), store)?;
        } else {
            out.insert(&names::w_in(l), slice_cols(store.expect(&names::w_in(l))?, &ffn_ranges))?;
            out.insert(&names::b_in(l), slice_elems(store.expect(&names::b_in(l))?, &ffn_ranges))?;
            out.insert(&names::c_out(l), slice_rows(store.expect(&names::c_out(l))?, &ffn_ranges))?;
        }
        copy(&mut out, &names::c_out_b(l), store)?;
    }

    if !cfg.tie_projection {
        copy(&mut out, names::PROJ, store)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blueprint::{Scope, SubnetMode};
    use crate::model::init_params;
    use crate::tensor::Rng;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::desk_default(32);
        c.layers = 3;
        c.d_model = 16;
        c.heads = 4;
        c.d_head = 4;
        c.d_inner = 24;
        c.ffn_blocks = 4;
        c.context = 16;
        c.shared_layers = [0].into_iter().collect();
        c
    }

    #[test]
    fn keep_all_is_a_deep_copy() {
        let cfg = cfg();
        let store = init_params(&cfg, &mut Rng::new(3, 0)).unwrap();
        let spec = SubnetSpec::full(&cfg);
        let sub = extract_physical_subnet(&store, &cfg, &spec).unwrap();
        assert!(sub.bitwise_eq(&store));
    }

    #[test]
    fn kept_head_slice_equals_original_columns() {
        let cfg = cfg();
        let store = init_params(&cfg, &mut Rng::new(4, 0)).unwrap();
        let mut spec = SubnetSpec::full(&cfg);
        spec.attn_kept[1] = vec![0];
        spec.scope = Scope::Attn;
        let sub = extract_physical_subnet(&store, &cfg, &spec).unwrap();

        let orig = store.get(&names::wq(1)).unwrap();
        let sliced = sub.get(&names::wq(1)).unwrap();
        assert_eq!(sliced.shape(), &[cfg.d_model, cfg.d_head]);
        let (_, cols) = orig.dims2().unwrap();
        for r in 0..cfg.d_model {
            for c in 0..cfg.d_head {
                assert_eq!(sliced.data()[r * cfg.d_head + c], orig.data()[r * cols + c]);
            }
        }
        // c_attn keeps matching rows
        let csl = sub.get(&names::c_attn(1)).unwrap();
        assert_eq!(csl.shape(), &[cfg.d_head, cfg.d_model]);
    }

    #[test]
    fn head_and_ffn_masks() {
        // heads {0,2} of 4 -> per-head mask [1,0,1,0] expanded by d_head
        let m = head_mask_vec(&[0, 2], 4, 2);
        assert_eq!(m, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        // R=12 chunks, keep {5}: exactly d_inner/12 ones, contiguous
        let f = ffn_mask_vec(&[5], 12, 24);
        assert_eq!(f.iter().filter(|&&v| v == 1.0).count(), 2);
        assert_eq!(&f[10..12], &[1.0, 1.0]);
    }

    #[test]
    fn empty_kept_set_is_rejected() {
        let cfg = cfg();
        let store = init_params(&cfg, &mut Rng::new(5, 0)).unwrap();
        let mut spec = SubnetSpec::full(&cfg);
        spec.ffn_kept[2] = vec![];
        spec.mode = SubnetMode::Physical;
        let err = extract_physical_subnet(&store, &cfg, &spec).unwrap_err();
        assert!(matches!(err, TwistError::InvalidSpec(_)));
    }
}
