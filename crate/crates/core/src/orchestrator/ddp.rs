//! Data-parallel baseline: all workers hold identical parameters, gradients
//! are averaged every batch, and one synchronous optimizer step advances the
//! shared model. Communication is accounted per aggregation round (the same
//! `repartition_interval` cadence the TwIST backend uses), full model per
//! worker in each direction.

use std::time::Instant;

use rayon::prelude::*;

use crate::blueprint::SubnetSpec;
use crate::error::{Result, TwistError};
use crate::model::{forward_loss, init_params, ModelConfig};
use crate::orchestrator::data::{epoch_order, make_batch, window_count, worker_shards, Corpus};
use crate::orchestrator::twist::{DATA_STREAM, INIT_STREAM};
use crate::orchestrator::{
    build_pool, BackendKind, EvalPoint, RoundStats, RunRecord, TrainConfig, WorkerRound,
};
use crate::partition::materialized_param_count;
use crate::tensor::{AdamState, ParameterStore, Rng};

pub fn train_data_parallel(
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
    let full_bytes = 4 * materialized_param_count(cfg, &SubnetSpec::full(cfg));

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
    let mut rounds = Vec::new();
    let mut cumulative_bytes = 0u64;
    let mut adam = AdamState::new();
    let data_rng = root.substream(DATA_STREAM);
    let mut round_id = 0usize;

    // Gradient averaging buffer, reused across steps; slots follow store
    // order with a name lookup for the forward pass's leaf order.
    let mut avg: Vec<(String, Vec<f64>)> = central
        .iter()
        .map(|(n, t)| (n.to_string(), vec![0.0f64; t.numel()]))
        .collect();
    let slot_of: std::collections::HashMap<String, usize> = central
        .names()
        .enumerate()
        .map(|(i, n)| (n.to_string(), i))
        .collect();

    for epoch in 0..tc.epochs {
        let orders: Vec<Vec<usize>> = (0..tc.workers)
            .map(|w| epoch_order(&shards[w], &data_rng, epoch, w))
            .collect();
        let mut step = 0usize;
        while step < steps_per_epoch {
            let interval = tc.repartition_interval.min(steps_per_epoch - step);
            let mut worker_losses = vec![0.0f64; tc.workers];
            for s in 0..interval {
                // Each worker computes gradients on its own shard batch.
                let grads: Vec<Result<(f32, Vec<(String, Vec<f32>)>)>> = (0..tc.workers)
                    .into_par_iter()
                    .map(|w| {
                        let base = (step + s) * tc.batch_size;
                        let windows = &orders[w][base..base + tc.batch_size];
                        let batch = make_batch(&corpus.train, windows, tc.seq_len)?;
                        let (mut pass, loss_var) = forward_loss(&central, cfg, &batch, None)?;
                        let loss = pass.tape.value(loss_var).data()[0];
                        if !loss.is_finite() {
                            return Err(TwistError::NonFinite(format!(
                                "loss {loss} on worker {w}"
                            )));
                        }
                        pass.tape.backward(loss_var)?;
                        let by_leaf: Vec<(String, Vec<f32>)> = pass
                            .leaves
                            .iter()
                            .filter_map(|(name, var)| {
                                pass.tape.grad(*var).map(|g| (name.clone(), g.to_vec()))
                            })
                            .collect();
                        Ok((loss, by_leaf))
                    })
                    .collect();

                // Average in worker order, 64-bit accumulation.
                for buf in avg.iter_mut() {
                    buf.1.fill(0.0);
                }
                for (w, g) in grads.into_iter().enumerate() {
                    let (loss, by_leaf) = g?;
                    worker_losses[w] += loss as f64;
                    for (name, gv) in &by_leaf {
                        let slot = slot_of[name.as_str()];
                        let dst = &mut avg[slot].1;
                        for (d, &v) in dst.iter_mut().zip(gv) {
                            *d += v as f64;
                        }
                    }
                }
                let inv = 1.0 / tc.workers as f64;
                for (name, buf) in avg.iter() {
                    let t = central.get_mut(name).expect("param");
                    let g = t.grad_mut();
                    for (gi, &b) in g.iter_mut().zip(buf) {
                        *gi = (b * inv) as f32;
                    }
                }
                adam.step(&mut central, tc.lr)?;
            }

            let round_bytes = tc.workers as u64 * 2 * full_bytes;
            cumulative_bytes += round_bytes;
            rounds.push(RoundStats {
                round: round_id,
                epoch,
                mean_train_loss: worker_losses.iter().sum::<f64>()
                    / (tc.workers * interval) as f64,
                workers: (0..tc.workers)
                    .map(|w| WorkerRound {
                        worker: w,
                        loss: worker_losses[w] / interval as f64,
                        bytes_out: full_bytes,
                        bytes_in: full_bytes,
                        blocks_attn: cfg.partitioned_layers().count() * cfg.heads,
                        blocks_ffn: cfg.partitioned_layers().count() * cfg.ffn_blocks,
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
        backend: BackendKind::DataParallel,
        rounds,
        evals,
        cumulative_bytes,
        peak_worker_param_bytes: full_bytes,
        wall_seconds: started.elapsed().as_secs_f64(),
        initial_eval,
        final_eval,
    };
    Ok((central, record))
}
