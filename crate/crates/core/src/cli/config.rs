//! Layered run configuration: defaults ← config file ← command-line flags.
//! The fully resolved config is echoed into the run manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blueprint::{Ratio, Scope};
use crate::error::{Result, TwistError};
use crate::model::{Activation, ModelConfig};
use crate::orchestrator::{BackendKind, TokenizerKind, TrainConfig};
use crate::partition::Variant;

/// Optional model fields; unset fields fall back to the desk-scale defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub d_head: Option<usize>,
    pub d_inner: Option<usize>,
    pub ffn_blocks: Option<usize>,
    pub context: Option<usize>,
    /// Fixed vocabulary size; normally left unset and taken from the corpus.
    pub vocab: Option<usize>,
    pub shared_layers: Option<Vec<usize>>,
    pub activation: Option<Activation>,
    pub tie_projection: Option<bool>,
    pub scale_correction: Option<bool>,
}

impl ModelSection {
    pub fn merge_over(&mut self, over: &ModelSection) {
        macro_rules! take {
            ($($f:ident),*) => { $( if over.$f.is_some() { self.$f = over.$f.clone(); } )* };
        }
        take!(
            layers,
            d_model,
            heads,
            d_head,
            d_inner,
            ffn_blocks,
            context,
            vocab,
            shared_layers,
            activation,
            tie_projection,
            scale_correction
        );
    }

    pub fn resolve(&self, corpus_vocab: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk_default(self.vocab.unwrap_or(corpus_vocab));
        if let Some(v) = self.layers {
            cfg.layers = v;
            // Recompute the default sharing policy for a non-default depth
            // unless the file pins it explicitly below.
            cfg.shared_layers = if v >= 4 {
                [0, 1, v - 2, v - 1].into_iter().collect()
            } else {
                Default::default()
            };
        }
        if let Some(v) = self.d_model {
            cfg.d_model = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.d_head {
            cfg.d_head = v;
        }
        if let Some(v) = self.d_inner {
            cfg.d_inner = v;
        }
        if let Some(v) = self.ffn_blocks {
            cfg.ffn_blocks = v;
        }
        if let Some(v) = self.context {
            cfg.context = v;
        }
        if let Some(v) = &self.shared_layers {
            cfg.shared_layers = v.iter().copied().collect();
        }
        if let Some(v) = self.activation {
            cfg.activation = v;
        }
        if let Some(v) = self.tie_projection {
            cfg.tie_projection = v;
        }
        if let Some(v) = self.scale_correction {
            cfg.scale_correction = v;
        }
        cfg
    }
}

/// Optional training fields mirroring `TrainConfig`, plus dataset location.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub backend: Option<String>,
    pub workers: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seq_len: Option<usize>,
    pub lr: Option<f32>,
    pub repartition_interval: Option<usize>,
    pub scope: Option<String>,
    pub ratio: Option<String>,
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub threads: Option<usize>,
    pub common_blocks: Option<Vec<usize>>,
    pub data: Option<PathBuf>,
    pub tokenizer: Option<String>,
}

impl TrainSection {
    pub fn merge_over(&mut self, over: &TrainSection) {
        macro_rules! take {
            ($($f:ident),*) => { $( if over.$f.is_some() { self.$f = over.$f.clone(); } )* };
        }
        take!(
            backend,
            workers,
            epochs,
            batch_size,
            seq_len,
            lr,
            repartition_interval,
            scope,
            ratio,
            variant,
            seed,
            eval_every,
            threads,
            common_blocks,
            data,
            tokenizer
        );
    }

    pub fn resolve(&self) -> Result<(TrainConfig, Option<PathBuf>, TokenizerKind)> {
        let mut tc = TrainConfig::desk_default();
        if let Some(v) = &self.backend {
            tc.backend = v.parse::<BackendKind>()?;
        }
        if let Some(v) = self.workers {
            tc.workers = v;
        }
        if let Some(v) = self.epochs {
            tc.epochs = v;
        }
        if let Some(v) = self.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = self.seq_len {
            tc.seq_len = v;
        }
        if let Some(v) = self.lr {
            tc.lr = v;
        }
        if let Some(v) = self.repartition_interval {
            tc.repartition_interval = v;
        }
        if let Some(v) = &self.scope {
            tc.scope = v.parse::<Scope>()?;
        }
        if let Some(v) = &self.ratio {
            tc.ratio = v.parse::<Ratio>()?;
        }
        if let Some(v) = &self.variant {
            tc.variant = v.parse::<Variant>()?;
        }
        if let Some(v) = self.seed {
            tc.seed = v;
        }
        if let Some(v) = self.eval_every {
            tc.eval_every = v;
        }
        if let Some(v) = self.threads {
            tc.threads = v;
        }
        if let Some(v) = &self.common_blocks {
            tc.common_blocks = v.clone();
        }
        let tokenizer = match &self.tokenizer {
            Some(t) => t.parse::<TokenizerKind>()?,
            None => TokenizerKind::Char,
        };
        Ok((tc, self.data.clone(), tokenizer))
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: ModelSection,
    pub train: TrainSection,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        TwistError::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
    })?;
    toml::from_str(&text)
        .map_err(|e| TwistError::InvalidConfig(format!("bad config {}: {e}", path.display())))
}

/// Output directory resolution: flag value, else `TWIST_OUT_DIR`, else
/// `./runs`.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("TWIST_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags_precedence() {
        let file: FileConfig = toml::from_str(
            r#"
            [model]
            layers = 4
            d_model = 64
            [train]
            ratio = "6/8"
            seed = 11
            "#,
        )
        .unwrap();
        let mut model = file.model.clone();
        let mut train = file.train.clone();
        let flags = TrainSection {
            seed: Some(42),
            ..Default::default()
        };
        train.merge_over(&flags);
        model.merge_over(&ModelSection::default());

        let cfg = model.resolve(97);
        assert_eq!(cfg.layers, 4);
        assert_eq!(cfg.d_model, 64);
        assert_eq!(cfg.vocab, 97);
        let (tc, _, _) = train.resolve().unwrap();
        assert_eq!(tc.seed, 42); // flag wins
        assert_eq!(tc.ratio.to_string(), "6/8"); // file wins over default
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad: std::result::Result<FileConfig, _> = toml::from_str("[train]\nbogus = 3\n");
        assert!(bad.is_err());
    }
}
