//! Training backends: the repartition → scatter → local steps → gather →
//! aggregate loop, and the synchronous data-parallel baseline.

pub mod data;
pub mod ddp;
pub mod eval;
pub mod twist;

pub use data::{corpus_from_text, load_corpus, Corpus, TokenizerKind};
pub use ddp::train_data_parallel;
pub use eval::{evaluate, evaluate_subnets_avg, EvalResult};
pub use twist::train_twist;

use serde::{Deserialize, Serialize};

use crate::blueprint::{min_feasible_n_sub, Ratio, Scope};
use crate::error::{Result, TwistError};
use crate::model::ModelConfig;
use crate::partition::Variant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Twist,
    DataParallel,
}

impl std::str::FromStr for BackendKind {
    type Err = TwistError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "twist" => Ok(BackendKind::Twist),
            "ddp" | "data_parallel" => Ok(BackendKind::DataParallel),
            other => Err(TwistError::InvalidInput(format!(
                "unknown backend {other:?} (expected twist or data_parallel)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backend: BackendKind,
    pub workers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f32,
    /// Batches between blueprint redraws (one communication round).
    pub repartition_interval: usize,
    pub scope: Scope,
    pub ratio: Ratio,
    pub variant: Variant,
    pub seed: u64,
    /// Evaluate the central model every this many rounds (0 = only at the
    /// start and end).
    pub eval_every: usize,
    /// Rayon pool size; 0 uses the default. Results are identical at any
    /// setting.
    pub threads: usize,
    /// Common block set C shared by every subnet (empty by default).
    pub common_blocks: Vec<usize>,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        Self {
            backend: BackendKind::Twist,
            workers: 4,
            epochs: 3,
            batch_size: 8,
            seq_len: 128,
            lr: 1e-3,
            repartition_interval: 15,
            scope: Scope::Both,
            ratio: Ratio { kept: 4, of: 8 },
            variant: Variant::Physical,
            seed: 7,
            eval_every: 20,
            threads: 0,
            common_blocks: Vec::new(),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.workers == 0
            || self.epochs == 0
            || self.batch_size == 0
            || self.seq_len == 0
            || self.repartition_interval == 0
        {
            return Err(TwistError::InvalidConfig(
                "workers, epochs, batch_size, seq_len, repartition_interval must be >= 1".into(),
            ));
        }
        if self.seq_len > cfg.context {
            return Err(TwistError::InvalidConfig(format!(
                "seq_len {} exceeds model context {}",
                self.seq_len, cfg.context
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TwistError::InvalidConfig("lr must be positive".into()));
        }
        if self.backend == BackendKind::Twist {
            let c = self.common_blocks.len();
            if self.scope.includes_attn() {
                let n_sub = self.ratio.kept_count(cfg.heads);
                let lo = min_feasible_n_sub(cfg.heads, self.workers, c);
                if n_sub < lo {
                    return Err(TwistError::Infeasible(format!(
                        "ratio {} keeps {n_sub} of {} attention blocks, below the bound {lo}",
                        self.ratio, cfg.heads
                    )));
                }
            }
            if self.scope.includes_ffn() {
                let n_sub = self.ratio.kept_count(cfg.ffn_blocks);
                let lo = min_feasible_n_sub(cfg.ffn_blocks, self.workers, c);
                if n_sub < lo {
                    return Err(TwistError::Infeasible(format!(
                        "ratio {} keeps {n_sub} of {} ffn blocks, below the bound {lo}",
                        self.ratio, cfg.ffn_blocks
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-worker traffic and loss for one round (round-log CSV row).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorkerRound {
    pub worker: usize,
    pub loss: f64,
    pub bytes_out: u64,
    pub bytes_in: u64,
    pub blocks_attn: usize,
    pub blocks_ffn: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub workers: Vec<WorkerRound>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalPoint {
    pub round: usize,
    pub loss: f64,
    pub perplexity: f64,
}

/// Outcome of a training run. Byte counters are cumulative and monotone;
/// wall clock is measured, communication and memory are modeled from
/// parameter counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub backend: BackendKind,
    pub rounds: Vec<RoundStats>,
    pub evals: Vec<EvalPoint>,
    pub cumulative_bytes: u64,
    pub peak_worker_param_bytes: u64,
    pub wall_seconds: f64,
    pub initial_eval: EvalPoint,
    pub final_eval: EvalPoint,
}

impl RunRecord {
    pub fn mean_losses(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.mean_train_loss).collect()
    }
}

/// Build the rayon pool a run executes under.
pub(crate) fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if threads > 0 {
        b = b.num_threads(threads);
    }
    b.build()
        .map_err(|e| TwistError::InvalidConfig(format!("rayon pool: {e}")))
}
