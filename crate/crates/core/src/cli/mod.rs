//! Command implementations behind the `twist` binary: configuration
//! loading, run persistence, and CSV emission. The binary maps errors to
//! exit codes (2 config/input, 3 verification failure, 4 training abort).

pub mod config;
pub mod csvio;

pub use config::{load_file_config, resolve_out_dir, FileConfig, ModelSection, TrainSection};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, grid_asymmetry, robustness_grid, stability_sweep, CostReport, ScalingTable, SweepResult,
};
use crate::blueprint::{deployment_spec, Ratio, Scope, SubnetMode};
use crate::error::{Result, TwistError};
use crate::model::{
    extract_physical_subnet, load_checkpoint, save_checkpoint, CheckpointMeta, ModelConfig,
};
use crate::orchestrator::{
    evaluate, load_corpus, train_data_parallel, train_twist, BackendKind, EvalResult, RunRecord,
    TokenizerKind, TrainConfig,
};
use crate::tensor::{ParameterStore, Rng};

/// Everything needed to reconstruct a run. Written before training begins
/// and finalized (finish timestamp, artifact list) on success.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: PathBuf,
    pub tokenizer: TokenizerKind,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| TwistError::Format(format!("json: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub record: RunRecord,
}

/// Run a training backend and persist manifest, loss/eval/round CSVs, the
/// run record, and the final checkpoint under a deterministic run directory.
pub fn cmd_train(
    model: &ModelSection,
    train: &TrainSection,
    out_dir: &Path,
    run_name: Option<String>,
) -> Result<TrainOutcome> {
    let (tc, data, tokenizer) = train.resolve()?;
    let data = data.ok_or_else(|| TwistError::InvalidInput("dataset not found: no data path configured".into()))?;
    let corpus = load_corpus(&data, tokenizer)?;
    let cfg = model.resolve(corpus.vocab_size());
    cfg.validate()?;
    tc.validate(&cfg)?;

    let backend_tag = match tc.backend {
        BackendKind::Twist => format!("twist-{}-{}", tc.scope, tc.ratio),
        BackendKind::DataParallel => "ddp".to_string(),
    };
    let name = run_name.unwrap_or_else(|| {
        format!("{}-s{}-seed{}", backend_tag.replace('/', "of"), tc.workers, tc.seed)
    });
    let run_dir = out_dir.join(name);
    std::fs::create_dir_all(&run_dir)?;

    let mut manifest = RunManifest {
        command: "train".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: tc.seed,
        model: cfg.clone(),
        train: tc.clone(),
        data: data.clone(),
        tokenizer,
        artifacts: BTreeMap::new(),
        started_unix: now_unix(),
        finished_unix: None,
    };
    let manifest_path = run_dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;

    let (store, record) = match tc.backend {
        BackendKind::Twist => train_twist(&tc, &cfg, &corpus)?,
        BackendKind::DataParallel => train_data_parallel(&tc, &cfg, &corpus)?,
    };

    let checkpoint = run_dir.join("model.twst");
    save_checkpoint(
        &checkpoint,
        &CheckpointMeta {
            config: cfg.clone(),
            subnet: None,
        },
        &store,
    )?;
    csvio::write_csv(&run_dir.join("losses.csv"), &csvio::losses_csv(&record))?;
    csvio::write_csv(&run_dir.join("evals.csv"), &csvio::evals_csv(&record))?;
    csvio::write_csv(&run_dir.join("rounds.csv"), &csvio::rounds_csv(&record))?;
    write_json(&run_dir.join("record.json"), &record)?;

    for (k, p) in [
        ("checkpoint", checkpoint.clone()),
        ("losses", run_dir.join("losses.csv")),
        ("evals", run_dir.join("evals.csv")),
        ("rounds", run_dir.join("rounds.csv")),
        ("record", run_dir.join("record.json")),
    ] {
        manifest.artifacts.insert(k.to_string(), p);
    }
    manifest.finished_unix = Some(now_unix());
    write_json(&manifest_path, &manifest)?;

    Ok(TrainOutcome {
        run_dir,
        checkpoint,
        record,
    })
}

/// Write a physically smaller checkpoint for (ratio, scope, seed).
pub fn cmd_extract(
    checkpoint: &Path,
    ratio: Ratio,
    scope: Scope,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (meta, store) = load_checkpoint(checkpoint)?;
    if meta.subnet.is_some() {
        return Err(TwistError::InvalidInput(
            "cannot extract from an already-extracted subnet checkpoint".into(),
        ));
    }
    let mut rng = Rng::new(seed, 0xE87);
    let mut spec = deployment_spec(&meta.config, ratio, scope, &mut rng)?;
    spec.mode = SubnetMode::Physical;
    let sub = extract_physical_subnet(&store, &meta.config, &spec)?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(
        out,
        &CheckpointMeta {
            config: meta.config,
            subnet: Some(spec),
        },
        &sub,
    )?;
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub tokenizer: TokenizerKind,
    pub split: String,
    /// Sample a masked deployment subnet before evaluating.
    pub subnet: Option<(Ratio, Scope, u64)>,
    pub batch_size: usize,
    pub seq_len: Option<usize>,
}

/// Loss and perplexity on a split, optionally through a subnet spec.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalResult> {
    let (meta, store) = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.data, args.tokenizer)?;
    if corpus.vocab_size() != meta.config.vocab {
        return Err(TwistError::InvalidInput(format!(
            "corpus vocab {} does not match checkpoint vocab {}",
            corpus.vocab_size(),
            meta.config.vocab
        )));
    }
    let tokens = corpus.split(&args.split)?;
    let seq = args.seq_len.unwrap_or(meta.config.context);
    let spec = match (&meta.subnet, &args.subnet) {
        (Some(s), None) => Some(s.clone()),
        (Some(_), Some(_)) => {
            return Err(TwistError::InvalidInput(
                "checkpoint is already an extracted subnet; --ratio does not apply".into(),
            ))
        }
        (None, Some((ratio, scope, seed))) => {
            let mut rng = Rng::new(*seed, 0xE87);
            Some(deployment_spec(&meta.config, *ratio, *scope, &mut rng)?)
        }
        (None, None) => None,
    };
    evaluate(
        &store,
        &meta.config,
        spec.as_ref(),
        tokens,
        args.batch_size,
        seq,
    )
}

pub struct VerifyOutcome {
    pub ffn: ScalingTable,
    pub attn: ScalingTable,
}

impl VerifyOutcome {
    pub fn pass(&self) -> bool {
        self.ffn.pass() && self.attn.pass()
    }
}

/// Monte Carlo checks of the scaling laws at the documented operating
/// points. Writes one CSV per table when an output directory is given.
pub fn cmd_verify(trials: usize, seed: u64, out_dir: Option<&Path>) -> Result<VerifyOutcome> {
    let rng = Rng::new(seed, 0xC0DE);
    let ffn = analysis::mc_verify_ffn_scaling(256, 1024, &[0.25, 0.5, 0.75], trials, &rng)?;
    let attn =
        analysis::mc_verify_attn_scaling(32, 512, 8, 64, &[2, 4, 6, 8], trials, &rng.substream(1))?;
    if let Some(dir) = out_dir {
        csvio::write_csv(&dir.join("scaling_ffn.csv"), &csvio::scaling_csv(&ffn))?;
        csvio::write_csv(&dir.join("scaling_attn.csv"), &csvio::scaling_csv(&attn))?;
    }
    Ok(VerifyOutcome { ffn, attn })
}

pub struct CostArgs {
    pub preset: Option<String>,
    pub model: ModelSection,
    pub alpha: f64,
    pub beta: f64,
    pub out: Option<PathBuf>,
}

pub fn cmd_cost(args: &CostArgs) -> Result<CostReport> {
    let cfg = match &args.preset {
        Some(name) => analysis::gpt2_preset(name).ok_or_else(|| {
            TwistError::InvalidInput(format!(
                "unknown preset {name:?} (expected one of {:?})",
                analysis::GPT2_FAMILY
            ))
        })?,
        None => args.model.resolve(args.model.vocab.unwrap_or(50257)),
    };
    let report = analysis::count_params_uniform(&cfg, args.alpha, args.beta)?;
    if let Some(path) = &args.out {
        csvio::write_csv(path, &csvio::cost_csv(&report))?;
    }
    Ok(report)
}

pub struct StabilityArgs {
    pub twist_checkpoint: PathBuf,
    pub baseline_checkpoint: PathBuf,
    pub train_ratio: Ratio,
    pub ratios: Vec<Ratio>,
    pub n_subnets: usize,
    pub scope: Scope,
    pub data: PathBuf,
    pub tokenizer: TokenizerKind,
    pub split: String,
    pub batch_size: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn cmd_sweep_stability(args: &StabilityArgs) -> Result<(SweepResult, SweepResult)> {
    let (meta_t, store_t) = load_checkpoint(&args.twist_checkpoint)?;
    let (meta_b, store_b) = load_checkpoint(&args.baseline_checkpoint)?;
    let corpus = load_corpus(&args.data, args.tokenizer)?;
    let tokens = corpus.split(&args.split)?;
    let (tw, dp) = stability_sweep(
        (&store_t, &meta_t.config),
        (&store_b, &meta_b.config),
        args.train_ratio,
        &args.ratios,
        args.n_subnets,
        args.scope,
        tokens,
        args.batch_size,
        meta_t.config.context,
        args.seed,
    )?;
    if let Some(path) = &args.out {
        let mut csv = csvio::sweep_csv(&tw);
        csv.push_str(csvio::sweep_csv(&dp).split_once('\n').map(|x| x.1).unwrap_or(""));
        csvio::write_csv(path, &csv)?;
    }
    Ok((tw, dp))
}

pub struct RobustnessArgs {
    /// (training ratio, checkpoint path) pairs.
    pub checkpoints: Vec<(Ratio, PathBuf)>,
    pub eval_ratios: Vec<Ratio>,
    pub n_per_cell: usize,
    pub scope: Scope,
    pub data: PathBuf,
    pub tokenizer: TokenizerKind,
    pub split: String,
    pub batch_size: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn cmd_sweep_robustness(args: &RobustnessArgs) -> Result<(SweepResult, Option<(f64, f64)>)> {
    let mut loaded: Vec<(Ratio, CheckpointMeta, ParameterStore)> = Vec::new();
    for (ratio, path) in &args.checkpoints {
        let (meta, store) = load_checkpoint(path)?;
        loaded.push((*ratio, meta, store));
    }
    let cfg = loaded
        .first()
        .map(|(_, m, _)| m.config.clone())
        .ok_or_else(|| TwistError::InvalidInput("no checkpoints given".into()))?;
    for (_, m, _) in &loaded {
        if m.config != cfg {
            return Err(TwistError::InvalidInput(
                "robustness grid needs checkpoints sharing one ModelConfig".into(),
            ));
        }
    }
    let corpus = load_corpus(&args.data, args.tokenizer)?;
    let tokens = corpus.split(&args.split)?;
    let refs: Vec<(Ratio, &ParameterStore)> = loaded.iter().map(|(r, _, s)| (*r, s)).collect();
    let grid = robustness_grid(
        &refs,
        &cfg,
        &args.eval_ratios,
        args.n_per_cell,
        args.scope,
        tokens,
        args.batch_size,
        cfg.context,
        args.seed,
    )?;
    if let Some(path) = &args.out {
        csvio::write_csv(path, &csvio::sweep_csv(&grid))?;
    }
    let asym = grid_asymmetry(&grid);
    Ok((grid, asym))
}
