//! The TwIST loop: every repartition interval draw fresh blueprints, scatter
//! subnets to workers, run local steps on disjoint shards, gather, and
//! aggregate into the central model.

use std::time::Instant;

use rayon::prelude::*;

use crate::aggregate::aggregate;
use crate::blueprint::SubnetMode;
use crate::error::{Result, TwistError};
use crate::model::{forward_loss, init_params, ModelConfig};
use crate::orchestrator::data::{epoch_order, make_batch, window_count, worker_shards, Corpus};
use crate::orchestrator::{
    build_pool, BackendKind, EvalPoint, RoundStats, RunRecord, TrainConfig, WorkerRound,
};
use crate::partition::{
    gather, scatter, zero_masked_grads, Materialized, RoundBlueprints, WorkerAssignment,
    WorkerResult,
};
use crate::tensor::{AdamState, ParameterStore, Rng};

pub(crate) const INIT_STREAM: u64 = 1;
pub(crate) const BLUEPRINT_STREAM: u64 = 2;
pub(crate) const DATA_STREAM: u64 = 3;

pub fn train_twist(
    tc: &TrainConfig,
    cfg: &ModelConfig,
    corpus: &Corpus,
) -> Result<(ParameterStore, RunRecord)> {
    cfg.validate()?;
    tc.validate(cfg)?;
    let pool = build_pool(tc.threads)?;
    pool.install(|| run(tc, cfg, corpus))
}

fn run(tc: &TrainConfig, cfg: &ModelConfig, corpus: &Corpus) -> Result<(ParameterStore, RunRecord)> {
    let started = Instant::now();
    let root = Rng::new(tc.seed, 0);
    let mut central = init_params(cfg, &mut root.substream(INIT_STREAM))?;

    let n_windows = window_count(corpus.train.len(), tc.seq_len);
    let shards = worker_shards(n_windows, tc.workers);
    let steps_per_epoch = shards[0].len() / tc.batch_size;
    if steps_per_epoch == 0 {
        return Err(TwistError::InvalidInput(format!(
            "shard of {} windows cannot fill a batch of {}",
            shards[0].len(),
            tc.batch_size
        )));
    }

    let eval = |store: &ParameterStore, round: usize| -> Result<EvalPoint> {
        let r = crate::orchestrator::evaluate(
            store,
            cfg,
            None,
            &corpus.valid,
            tc.batch_size,
            tc.seq_len,
        )?;
        Ok(EvalPoint {
            round,
            loss: r.loss,
            perplexity: r.perplexity,
        })
    };

    let initial_eval = eval(&central, 0)?;
    let mut evals = vec![initial_eval];
    let mut rounds: Vec<RoundStats> = Vec::new();
    let mut cumulative_bytes = 0u64;
    let mut peak_worker_bytes = 0u64;
    let mut round_id = 0usize;
    let data_rng = root.substream(DATA_STREAM);
    let bp_rng = root.substream(BLUEPRINT_STREAM);

    for epoch in 0..tc.epochs {
        let orders: Vec<Vec<usize>> = (0..tc.workers)
            .map(|w| epoch_order(&shards[w], &data_rng, epoch, w))
            .collect();
        let mut step = 0usize;
        while step < steps_per_epoch {
            let interval = tc.repartition_interval.min(steps_per_epoch - step);
            let bps = RoundBlueprints::generate(
                cfg,
                tc.scope,
                tc.ratio,
                &tc.common_blocks,
                tc.workers,
                &bp_rng.substream(round_id as u64),
            )?;
            let (assignments, mut manifests) = scatter(&central, cfg, &bps, tc.variant)?;
            for m in &manifests {
                peak_worker_bytes = peak_worker_bytes.max(m.bytes_out);
            }

            let outcomes: Vec<Result<(WorkerResult, f64)>> = assignments
                .into_par_iter()
                .map(|a| local_steps(a, tc, cfg, &central, corpus, &orders, step, interval))
                .collect();
            let mut results = Vec::with_capacity(tc.workers);
            let mut losses = Vec::with_capacity(tc.workers);
            for o in outcomes {
                let (res, loss) = o?;
                losses.push((res.worker, loss));
                results.push(res);
            }
            losses.sort_by_key(|&(w, _)| w);

            let updates = gather(&results, cfg, tc.workers, &mut manifests)?;
            central = aggregate(&central, &updates)?;

            let round_bytes: u64 = manifests.iter().map(|m| m.bytes_out + m.bytes_in).sum();
            cumulative_bytes += round_bytes;
            rounds.push(RoundStats {
                round: round_id,
                epoch,
                mean_train_loss: losses.iter().map(|&(_, l)| l).sum::<f64>() / tc.workers as f64,
                workers: manifests
                    .iter()
                    .map(|m| WorkerRound {
                        worker: m.worker,
                        loss: losses[m.worker].1,
                        bytes_out: m.bytes_out,
                        bytes_in: m.bytes_in,
                        blocks_attn: m.blocks_attn(cfg),
                        blocks_ffn: m.blocks_ffn(cfg),
                    })
                    .collect(),
            });

            round_id += 1;
            step += interval;
            if tc.eval_every > 0 && round_id % tc.eval_every == 0 {
                evals.push(eval(&central, round_id)?);
            }
        }
    }

    let final_eval = eval(&central, round_id)?;
    evals.push(final_eval);
    let record = RunRecord {
        backend: BackendKind::Twist,
        rounds,
        evals,
        cumulative_bytes,
        peak_worker_param_bytes: peak_worker_bytes,
        wall_seconds: started.elapsed().as_secs_f64(),
        initial_eval,
        final_eval,
    };
    Ok((central, record))
}

/// One worker's slice of a round: clone or adopt its payload, run
/// `interval` batches with a fresh optimizer, return the trained store.
#[allow(clippy::too_many_arguments)]
fn local_steps(
    assignment: WorkerAssignment,
    tc: &TrainConfig,
    cfg: &ModelConfig,
    central: &ParameterStore,
    corpus: &Corpus,
    orders: &[Vec<usize>],
    start_step: usize,
    interval: usize,
) -> Result<(WorkerResult, f64)> {
    let w = assignment.worker;
    let spec = assignment.spec;
    let mut store = match assignment.payload {
        Materialized::Masked(_) => central.clone(),
        Materialized::Physical(s) => s,
    };
    // Optimizer state is per-worker and re-initialized at each repartition,
    // so stale moments never bleed across block sets.
    let mut adam = AdamState::new();
    let mut loss_acc = 0.0f64;
    for s in 0..interval {
        let base = (start_step + s) * tc.batch_size;
        let windows = &orders[w][base..base + tc.batch_size];
        let batch = make_batch(&corpus.train, windows, tc.seq_len)?;
        let (mut pass, loss_var) = forward_loss(&store, cfg, &batch, Some(&spec))?;
        let loss = pass.tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(TwistError::NonFinite(format!(
                "loss {loss} on worker {w} at local step {s}"
            )));
        }
        loss_acc += loss as f64;
        pass.tape.backward(loss_var)?;
        pass.accumulate_grads(&mut store);
        if spec.mode == SubnetMode::Masked {
            zero_masked_grads(&mut store, cfg, &spec);
        }
        adam.step(&mut store, tc.lr)?;
    }
    let mean_loss = loss_acc / interval as f64;
    Ok((
        WorkerResult {
            worker: w,
            spec,
            store,
        },
        mean_loss,
    ))
}
