//! Decoder forward pass on the tape.
//!
//! Per layer: ln → attention → residual, ln → ffn → residual, with causal
//! masking. A subnet spec masks inactive blocks (masked mode) or simply
//! matches a physically sliced store (physical mode); in either case the
//! active sublayer output is multiplied by √(N_full/N_sub) immediately
//! before its residual addition when scale correction is on. With no spec
//! the pass applies no mask and no scaling.

use crate::blueprint::{SubnetMode, SubnetSpec};
use crate::error::{Result, TwistError};
use crate::model::{names, ModelConfig, TokenBatch};
use crate::tensor::kernels::axpy;
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

/// A completed forward pass: the tape, the logits node, and the parameter
/// leaves for gradient readback.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    pub leaves: Vec<(String, Var)>,
}

impl ForwardPass {
    pub fn logits_tensor(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    /// Add tape gradients onto the store's gradient buffers.
    pub fn accumulate_grads(&self, store: &mut ParameterStore) {
        for (name, var) in &self.leaves {
            if let Some(g) = self.tape.grad(*var) {
                let t = store.get_mut(name).expect("leaf name in store");
                axpy(1.0, g, t.grad_mut());
            }
        }
    }
}

struct PassBuilder<'a> {
    tape: Tape,
    store: &'a ParameterStore,
    leaves: Vec<(String, Var)>,
}

impl<'a> PassBuilder<'a> {
    fn leaf(&mut self, name: &str) -> Result<Var> {
        let t = self.store.expect(name)?;
        let var = self.tape.leaf(t.clone());
        self.leaves.push((name.to_string(), var));
        Ok(var)
    }
}

/// Run the decoder over `b` sequences of length `n` (flattened row-major).
pub fn forward(
    store: &ParameterStore,
    cfg: &ModelConfig,
    tokens: &[u32],
    b: usize,
    n: usize,
    subnet: Option<&SubnetSpec>,
) -> Result<ForwardPass> {
    if n > cfg.context {
        return Err(TwistError::InvalidInput(format!(
            "sequence length {n} exceeds context {}",
            cfg.context
        )));
    }
    if let Some(spec) = subnet {
        spec.validate(cfg)?;
    }
    let mut pb = PassBuilder {
        tape: Tape::new(),
        store,
        leaves: Vec::with_capacity(store.len()),
    };

    let tok_table = pb.leaf(names::TOKEN_EMBED)?;
    let pos_table = pb.leaf(names::POS_EMBED)?;
    let mut x = pb.tape.embed(tok_table, pos_table, tokens, n)?;

    for l in 0..cfg.layers {
        x = layer_forward(&mut pb, cfg, l, x, b, n, subnet)?;
    }

    let logits = if cfg.tie_projection {
        pb.tape.matmul_nt(x, tok_table)?
    } else {
        let proj = pb.leaf(names::PROJ)?;
        pb.tape.matmul(x, proj)?
    };

    Ok(ForwardPass {
        tape: pb.tape,
        logits,
        leaves: pb.leaves,
    })
}

/// Forward plus mean token cross-entropy on the batch targets.
pub fn forward_loss(
    store: &ParameterStore,
    cfg: &ModelConfig,
    batch: &TokenBatch,
    subnet: Option<&SubnetSpec>,
) -> Result<(ForwardPass, Var)> {
    let mut pass = forward(store, cfg, &batch.inputs, batch.batch, batch.seq, subnet)?;
    let loss = pass.tape.cross_entropy(pass.logits, &batch.targets)?;
    Ok((pass, loss))
}

#[allow(clippy::too_many_arguments)]
fn layer_forward(
    pb: &mut PassBuilder,
    cfg: &ModelConfig,
    l: usize,
    x: Var,
    b: usize,
    n: usize,
    subnet: Option<&SubnetSpec>,
) -> Result<Var> {
    let dh = cfg.d_head;
    let wq = pb.leaf(&names::wq(l))?;
    let heads_present = pb.tape.value(wq).dims2()?.1 / dh;

    // Masked mode zeroes inactive block activations on a full-width store;
    // physical mode expects the store already sliced to the kept blocks.
    let (head_mask, ffn_mask, attn_scale, ffn_scale) = match subnet {
        None => (None, None, 1.0, 1.0),
        Some(spec) => {
            let masked = spec.mode == SubnetMode::Masked;
            if masked && heads_present != cfg.heads {
                return Err(TwistError::InvalidSpec(format!(
                    "masked forward expects a full store, layer {l} has {heads_present} heads"
                )));
            }
            if !masked && heads_present != spec.attn_kept[l].len() {
                return Err(TwistError::InvalidSpec(format!(
                    "physical store layer {l} has {heads_present} heads, spec keeps {}",
                    spec.attn_kept[l].len()
                )));
            }
            let hm = if masked && spec.attn_kept[l].len() != cfg.heads {
                Some(super::subnet::head_mask_vec(
                    &spec.attn_kept[l],
                    cfg.heads,
                    dh,
                ))
            } else {
                None
            };
            let fm = if masked && spec.ffn_kept[l].len() != cfg.ffn_blocks {
                Some(super::subnet::ffn_mask_vec(
                    &spec.ffn_kept[l],
                    cfg.ffn_blocks,
                    cfg.d_inner,
                ))
            } else {
                None
            };
            (hm, fm, spec.attn_scale(cfg, l), spec.ffn_scale(cfg, l))
        }
    };

    // Attention sublayer.
    let g1 = pb.leaf(&names::ln_attn_gamma(l))?;
    let b1 = pb.leaf(&names::ln_attn_beta(l))?;
    let normed = pb.tape.layer_norm(x, g1, b1)?;

    let bq = pb.leaf(&names::bq(l))?;
    let wk = pb.leaf(&names::wk(l))?;
    let bk = pb.leaf(&names::bk(l))?;
    let wv = pb.leaf(&names::wv(l))?;
    let bv = pb.leaf(&names::bv(l))?;

    let q = pb.tape.matmul(normed, wq)?;
    let q = pb.tape.add_bias_row(q, bq)?;
    let k = pb.tape.matmul(normed, wk)?;
    let k = pb.tape.add_bias_row(k, bk)?;
    let v = pb.tape.matmul(normed, wv)?;
    let v = pb.tape.add_bias_row(v, bv)?;

    let h = heads_present;
    let qh = pb.tape.split_heads(q, b, n, h, dh)?;
    let kh = pb.tape.split_heads(k, b, n, h, dh)?;
    let vh = pb.tape.split_heads(v, b, n, h, dh)?;
    let scores = pb.tape.attn_scores(qh, kh, b, h, n, dh);
    let probs = pb.tape.softmax_causal(scores, b, h, n);
    let ctx = pb.tape.attn_context(probs, vh, b, h, n, dh);
    let merged = pb.tape.merge_heads(ctx, b, n, h, dh)?;

    let merged = match head_mask {
        Some(m) => pb.tape.mul_row_vec(merged, m)?,
        None => merged,
    };

    let c_attn = pb.leaf(&names::c_attn(l))?;
    let c_attn_b = pb.leaf(&names::c_attn_b(l))?;
    let attn_out = pb.tape.matmul(merged, c_attn)?;
    let attn_out = pb.tape.add_bias_row(attn_out, c_attn_b)?;
    let attn_out = if attn_scale != 1.0 {
        pb.tape.scale(attn_out, attn_scale)
    } else {
        attn_out
    };
    let x = pb.tape.add(x, attn_out)?;

    // FFN sublayer.
    let g2 = pb.leaf(&names::ln_ffn_gamma(l))?;
    let b2 = pb.leaf(&names::ln_ffn_beta(l))?;
    let normed2 = pb.tape.layer_norm(x, g2, b2)?;

    let w_in = pb.leaf(&names::w_in(l))?;
    let b_in = pb.leaf(&names::b_in(l))?;
    let pre = pb.tape.matmul(normed2, w_in)?;
    let pre = pb.tape.add_bias_row(pre, b_in)?;
    let act = match cfg.activation {
        super::Activation::Relu => pb.tape.relu(pre),
        super::Activation::Gelu => pb.tape.gelu(pre),
    };
    let act = match ffn_mask {
        Some(m) => pb.tape.mul_row_vec(act, m)?,
        None => act,
    };

    let c_out = pb.leaf(&names::c_out(l))?;
    let c_out_b = pb.leaf(&names::c_out_b(l))?;
    let ffn_out = pb.tape.matmul(act, c_out)?;
    let ffn_out = pb.tape.add_bias_row(ffn_out, c_out_b)?;
    let ffn_out = if ffn_scale != 1.0 {
        pb.tape.scale(ffn_out, ffn_scale)
    } else {
        ffn_out
    };
    pb.tape.add(x, ffn_out)
}
