//! GPT-style pre-layernorm decoder whose attention heads and FFN neuron
//! chunks are addressable as blocks.

pub mod checkpoint;
pub mod forward;
pub mod init;
pub mod subnet;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use forward::{forward, forward_loss, ForwardPass};
pub use init::init_params;
pub use subnet::{extract_physical_subnet, ffn_mask_vec, head_mask_vec};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TwistError};

/// Activation for the FFN sublayer. The initialization-scaling theorems are
/// stated for relu, which is the default; gelu is available for GPT-2
/// fidelity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Architecture hyperparameters plus the sharing/scaling policy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_inner: usize,
    /// FFN block count R per layer; d_inner must divide evenly.
    pub ffn_blocks: usize,
    pub vocab: usize,
    pub context: usize,
    /// Layers never partitioned (first/last few by default).
    pub shared_layers: BTreeSet<usize>,
    pub activation: Activation,
    /// Tie the output projection to the token embedding (N_proj = 0).
    pub tie_projection: bool,
    /// Multiply subnet sublayer outputs by √(N_full/N_sub) before the
    /// residual add.
    pub scale_correction: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: ~1.6M parameters, four partitioned layers.
    pub fn desk_default(vocab: usize) -> Self {
        Self {
            layers: 8,
            d_model: 128,
            heads: 8,
            d_head: 16,
            d_inner: 512,
            ffn_blocks: 8,
            vocab,
            context: 128,
            shared_layers: [0, 1, 6, 7].into_iter().collect(),
            activation: Activation::Relu,
            tie_projection: true,
            scale_correction: true,
        }
    }

    pub fn attn_width(&self) -> usize {
        self.heads * self.d_head
    }

    pub fn ffn_chunk(&self) -> usize {
        self.d_inner / self.ffn_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.d_model < 2
            || self.heads == 0
            || self.d_head == 0
            || self.d_inner == 0
            || self.ffn_blocks == 0
            || self.vocab == 0
            || self.context == 0
        {
            return Err(TwistError::InvalidConfig(
                "all architecture extents must be positive (d_model >= 2)".into(),
            ));
        }
        if self.d_inner % self.ffn_blocks != 0 {
            return Err(TwistError::InvalidConfig(format!(
                "d_inner {} not divisible by ffn_blocks {}",
                self.d_inner, self.ffn_blocks
            )));
        }
        if let Some(&bad) = self.shared_layers.iter().find(|&&l| l >= self.layers) {
            return Err(TwistError::InvalidConfig(format!(
                "shared layer {bad} out of range 0..{}",
                self.layers
            )));
        }
        Ok(())
    }

    pub fn is_shared_layer(&self, l: usize) -> bool {
        self.shared_layers.contains(&l)
    }

    pub fn partitioned_layers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.layers).filter(|l| !self.shared_layers.contains(l))
    }
}

/// Parameter names for one layer, in store order.
pub mod names {
    pub fn ln_attn_gamma(l: usize) -> String {
        format!("layers.{l}.ln_attn.gamma")
    }
    pub fn ln_attn_beta(l: usize) -> String {
        format!("layers.{l}.ln_attn.beta")
    }
    pub fn wq(l: usize) -> String {
        format!("layers.{l}.attn.wq")
    }
    pub fn bq(l: usize) -> String {
        format!("layers.{l}.attn.bq")
    }
    pub fn wk(l: usize) -> String {
        format!("layers.{l}.attn.wk")
    }
    pub fn bk(l: usize) -> String {
        format!("layers.{l}.attn.bk")
    }
    pub fn wv(l: usize) -> String {
        format!("layers.{l}.attn.wv")
    }
    pub fn bv(l: usize) -> String {
        format!("layers.{l}.attn.bv")
    }
    pub fn c_attn(l: usize) -> String {
        format!("layers.{l}.attn.c_proj")
    }
    pub fn c_attn_b(l: usize) -> String {
        format!("layers.{l}.attn.c_proj_b")
    }
    pub fn ln_ffn_gamma(l: usize) -> String {
        format!("layers.{l}.ln_ffn.gamma")
    }
    pub fn ln_ffn_beta(l: usize) -> String {
        format!("layers.{l}.ln_ffn.beta")
    }
    pub fn w_in(l: usize) -> String {
        format!("layers.{l}.ffn.w_in")
    }
    pub fn b_in(l: usize) -> String {
        format!("layers.{l}.ffn.b_in")
    }
    pub fn c_out(l: usize) -> String {
        format!("layers.{l}.ffn.c_out")
    }
    pub fn c_out_b(l: usize) -> String {
        format!("layers.{l}.ffn.c_out_b")
    }

    pub const TOKEN_EMBED: &str = "embed.token";
    pub const POS_EMBED: &str = "embed.pos";
    pub const PROJ: &str = "proj.weight";
}

/// A flattened batch of `batch` sequences, each `seq` tokens, with next-token
/// targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(inputs: Vec<u32>, targets: Vec<u32>, batch: usize, seq: usize) -> Result<Self> {
        if inputs.len() != batch * seq || targets.len() != batch * seq {
            return Err(TwistError::InvalidInput(format!(
                "batch of {batch}x{seq} needs {} tokens, got {}/{}",
                batch * seq,
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self {
            inputs,
            targets,
            batch,
            seq,
        })
    }

    pub fn tokens(&self) -> usize {
        self.inputs.len()
    }
}
