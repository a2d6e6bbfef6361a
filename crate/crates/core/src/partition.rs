//! Dispatcher: materialize blueprints as worker subnets — masked, physical,
//! or hybrid — and account the bytes a real scatter/gather would move.
//!
//! Transport is simulated: payloads move within the process while manifests
//! log the traffic a PCIe transfer would carry (4 bytes per parameter of the
//! materialized subnet, in and out).

use serde::{Deserialize, Serialize};

use crate::aggregate::{ParamUpdate, Region, UpdateSet};
use crate::blueprint::{generate_blueprint, Blueprint, Ratio, Scope, SubnetMode, SubnetSpec};
use crate::error::{Result, TwistError};
use crate::model::{extract_physical_subnet, ffn_mask_vec, head_mask_vec, names, ModelConfig};
use crate::tensor::{ParameterStore, Rng, Tensor};

/// Which materialization each worker gets. Hybrid keeps the central
/// accelerator as a masked worker 0 while the rest hold physical slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Masked,
    Physical,
    Hybrid,
}

impl Variant {
    pub fn mode_for(self, worker: usize) -> SubnetMode {
        match self {
            Variant::Masked => SubnetMode::Masked,
            Variant::Physical => SubnetMode::Physical,
            Variant::Hybrid => {
                if worker == 0 {
                    SubnetMode::Masked
                } else {
                    SubnetMode::Physical
                }
            }
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = TwistError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Variant::Masked),
            "physical" => Ok(Variant::Physical),
            "hybrid" => Ok(Variant::Hybrid),
            other => Err(TwistError::InvalidInput(format!(
                "unknown variant {other:?} (expected masked, physical, or hybrid)"
            ))),
        }
    }
}

/// Per-layer 0/1 masks. The head mask has one entry per head; the FFN mask
/// is over activations and is constant within each chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub head: Vec<f32>,
    pub ffn: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub layers: Vec<Mask>,
}

/// One repartition round's blueprints: an assignment matrix per partitioned
/// layer and in-scope sublayer kind (None for shared layers or out-of-scope
/// kinds).
#[derive(Clone, Debug)]
pub struct RoundBlueprints {
    pub attn: Vec<Option<Blueprint>>,
    pub ffn: Vec<Option<Blueprint>>,
    pub workers: usize,
    pub scope: Scope,
}

impl RoundBlueprints {
    /// Fresh per-layer blueprints for one round. Each layer draws from its
    /// own rng substream.
    pub fn generate(
        cfg: &ModelConfig,
        scope: Scope,
        ratio: Ratio,
        common: &[usize],
        workers: usize,
        rng: &Rng,
    ) -> Result<Self> {
        let mut attn = Vec::with_capacity(cfg.layers);
        let mut ffn = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            if cfg.is_shared_layer(l) {
                attn.push(None);
                ffn.push(None);
                continue;
            }
            attn.push(if scope.includes_attn() {
                let n_sub = ratio.kept_count(cfg.heads);
                Some(generate_blueprint(
                    l,
                    cfg.heads,
                    workers,
                    n_sub,
                    common,
                    &mut rng.substream_n(&[l as u64, 0]),
                )?)
            } else {
                None
            });
            ffn.push(if scope.includes_ffn() {
                let n_sub = ratio.kept_count(cfg.ffn_blocks);
                Some(generate_blueprint(
                    l,
                    cfg.ffn_blocks,
                    workers,
                    n_sub,
                    common,
                    &mut rng.substream_n(&[l as u64, 1]),
                )?)
            } else {
                None
            });
        }
        Ok(Self {
            attn,
            ffn,
            workers,
            scope,
        })
    }

    /// Worker `w`'s subnet spec (kept lists; full where unpartitioned).
    pub fn worker_spec(&self, cfg: &ModelConfig, worker: usize, mode: SubnetMode) -> Result<SubnetSpec> {
        if worker >= self.workers {
            return Err(TwistError::InvalidInput(format!(
                "invalid worker {worker}, round has {}",
                self.workers
            )));
        }
        let mut spec = SubnetSpec::full(cfg);
        spec.mode = mode;
        spec.scope = self.scope;
        spec.scale_correction = cfg.scale_correction;
        for l in 0..cfg.layers {
            if let Some(bp) = &self.attn[l] {
                spec.attn_kept[l] = bp.rows[worker].clone();
            }
            if let Some(bp) = &self.ffn[l] {
                spec.ffn_kept[l] = bp.rows[worker].clone();
            }
        }
        Ok(spec)
    }

    /// Render all blueprints into a human-readable log block.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for bp in self.attn.iter().chain(self.ffn.iter()).flatten() {
            out.push_str(&bp.render());
        }
        out
    }
}

/// Worker payload: masks over a shared full store, or an owned slice.
#[derive(Clone, Debug)]
pub enum Materialized {
    Masked(MaskSet),
    Physical(ParameterStore),
}

#[derive(Clone, Debug)]
pub struct WorkerAssignment {
    pub worker: usize,
    pub spec: SubnetSpec,
    pub payload: Materialized,
}

/// Traffic bookkeeping for one worker in one round. Byte counts are
/// 4 × the materialized subnet's parameter count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScatterManifest {
    pub worker: usize,
    pub kept_attn: Vec<Vec<usize>>,
    pub kept_ffn: Vec<Vec<usize>>,
    pub bytes_out: u64,
    pub bytes_in: u64,
}

impl ScatterManifest {
    /// Kept attention blocks summed over partitioned layers.
    pub fn blocks_attn(&self, cfg: &ModelConfig) -> usize {
        cfg.partitioned_layers()
            .map(|l| self.kept_attn[l].len())
            .sum()
    }

    pub fn blocks_ffn(&self, cfg: &ModelConfig) -> usize {
        cfg.partitioned_layers()
            .map(|l| self.kept_ffn[l].len())
            .sum()
    }
}

/// Parameter count of the subnet a spec describes, by enumerating the shapes
/// the materialized store holds (embeddings and shared tensors included).
pub fn materialized_param_count(cfg: &ModelConfig, spec: &SubnetSpec) -> u64 {
    let d = cfg.d_model as u64;
    let mut total = (cfg.vocab as u64) * d + (cfg.context as u64) * d;
    for l in 0..cfg.layers {
        let aw = (spec.attn_kept[l].len() * cfg.d_head) as u64;
        let fw = (spec.ffn_kept[l].len() * cfg.ffn_chunk()) as u64;
        total += 2 * d + 2 * d; // both layernorms' gamma and beta
        total += 3 * (d * aw + aw); // wq/wk/wv and their biases
        total += aw * d + d; // c_proj and shared bias
        total += d * fw + fw; // w_in and bias
        total += fw * d + d; // c_out and shared bias
    }
    if !cfg.tie_projection {
        total += d * cfg.vocab as u64;
    }
    total
}

pub fn masks_from_spec(cfg: &ModelConfig, spec: &SubnetSpec) -> MaskSet {
    let layers = (0..cfg.layers)
        .map(|l| Mask {
            head: {
                let mut m = vec![0.0f32; cfg.heads];
                for &h in &spec.attn_kept[l] {
                    m[h] = 1.0;
                }
                m
            },
            ffn: ffn_mask_vec(&spec.ffn_kept[l], cfg.ffn_blocks, cfg.d_inner),
        })
        .collect();
    MaskSet { layers }
}

/// Masks for one worker of a blueprint round. Evaluation mode (worker spec
/// keeping everything) yields all-ones masks.
pub fn masks_from_blueprint(
    bps: &RoundBlueprints,
    cfg: &ModelConfig,
    worker: usize,
) -> Result<MaskSet> {
    let spec = bps.worker_spec(cfg, worker, SubnetMode::Masked)?;
    Ok(masks_from_spec(cfg, &spec))
}

/// Materialize every worker's subnet for one round.
pub fn scatter(
    central: &ParameterStore,
    cfg: &ModelConfig,
    bps: &RoundBlueprints,
    variant: Variant,
) -> Result<(Vec<WorkerAssignment>, Vec<ScatterManifest>)> {
    let mut assignments = Vec::with_capacity(bps.workers);
    let mut manifests = Vec::with_capacity(bps.workers);
    for w in 0..bps.workers {
        let mode = variant.mode_for(w);
        let spec = bps.worker_spec(cfg, w, mode)?;
        let payload = match mode {
            SubnetMode::Masked => Materialized::Masked(masks_from_spec(cfg, &spec)),
            SubnetMode::Physical => {
                Materialized::Physical(extract_physical_subnet(central, cfg, &spec)?)
            }
        };
        let bytes = 4 * materialized_param_count(cfg, &spec);
        manifests.push(ScatterManifest {
            worker: w,
            kept_attn: spec.attn_kept.clone(),
            kept_ffn: spec.ffn_kept.clone(),
            bytes_out: bytes,
            bytes_in: 0,
        });
        assignments.push(WorkerAssignment {
            worker: w,
            spec,
            payload,
        });
    }
    Ok((assignments, manifests))
}

/// A worker's trained parameters coming back for aggregation.
#[derive(Clone, Debug)]
pub struct WorkerResult {
    pub worker: usize,
    pub spec: SubnetSpec,
    pub store: ParameterStore,
}

fn tensor_col_block(t: &Tensor, start: usize, len: usize) -> Vec<f32> {
    let (rows, cols) = t.dims2().expect("2-D tensor");
    let mut out = Vec::with_capacity(rows * len);
    for i in 0..rows {
        out.extend_from_slice(&t.data()[i * cols + start..i * cols + start + len]);
    }
    out
}

fn tensor_row_block(t: &Tensor, start: usize, len: usize) -> Vec<f32> {
    let (_, cols) = t.dims2().expect("2-D tensor");
    t.data()[start * cols..(start + len) * cols].to_vec()
}

/// Collect each worker's updated values keyed by (name, region), and close
/// out the manifests' return traffic. Masked workers report only their
/// unmasked slices.
pub fn gather(
    results: &[WorkerResult],
    cfg: &ModelConfig,
    expected_workers: usize,
    manifests: &mut [ScatterManifest],
) -> Result<Vec<UpdateSet>> {
    for w in 0..expected_workers {
        if !results.iter().any(|r| r.worker == w) {
            return Err(TwistError::IncompleteRound(format!(
                "worker {w} has not reported"
            )));
        }
    }
    let mut sets = Vec::with_capacity(results.len());
    for r in results {
        let mut updates = Vec::new();
        let spec = &r.spec;
        let full_whole = |store: &ParameterStore, name: &str, ups: &mut Vec<ParamUpdate>| -> Result<()> {
            ups.push(ParamUpdate {
                name: name.to_string(),
                region: Region::Full,
                values: store.expect(name)?.data().to_vec(),
            });
            Ok(())
        };

        full_whole(&r.store, names::TOKEN_EMBED, &mut updates)?;
        full_whole(&r.store, names::POS_EMBED, &mut updates)?;
        for l in 0..cfg.layers {
            full_whole(&r.store, &names::ln_attn_gamma(l), &mut updates)?;
            full_whole(&r.store, &names::ln_attn_beta(l), &mut updates)?;
            push_attn_updates(r, cfg, l, &mut updates)?;
            full_whole(&r.store, &names::c_attn_b(l), &mut updates)?;
            full_whole(&r.store, &names::ln_ffn_gamma(l), &mut updates)?;
            full_whole(&r.store, &names::ln_ffn_beta(l), &mut updates)?;
            push_ffn_updates(r, cfg, l, &mut updates)?;
            full_whole(&r.store, &names::c_out_b(l), &mut updates)?;
        }
        if !cfg.tie_projection {
            full_whole(&r.store, names::PROJ, &mut updates)?;
        }

        let spec_bytes = 4 * materialized_param_count(cfg, spec);
        if let Some(m) = manifests.iter_mut().find(|m| m.worker == r.worker) {
            m.bytes_in = spec_bytes;
        }
        sets.push(UpdateSet {
            worker: r.worker,
            updates,
        });
    }
    sets.sort_by_key(|s| s.worker);
    Ok(sets)
}

fn push_attn_updates(
    r: &WorkerResult,
    cfg: &ModelConfig,
    l: usize,
    updates: &mut Vec<ParamUpdate>,
) -> Result<()> {
    let kept = &r.spec.attn_kept[l];
    let dh = cfg.d_head;
    let physical = r.spec.mode == SubnetMode::Physical;
    let whole = kept.len() == cfg.heads;
    for (wname, bname) in [
        (names::wq(l), names::bq(l)),
        (names::wk(l), names::bk(l)),
        (names::wv(l), names::bv(l)),
    ] {
        let wt = r.store.expect(&wname)?;
        let bt = r.store.expect(&bname)?;
        if whole && !physical {
            updates.push(ParamUpdate {
                name: wname.clone(),
                region: Region::Full,
                values: wt.data().to_vec(),
            });
            updates.push(ParamUpdate {
                name: bname.clone(),
                region: Region::Full,
                values: bt.data().to_vec(),
            });
            continue;
        }
        for (local, &global) in kept.iter().enumerate() {
            let src_col = if physical { local } else { global };
            updates.push(ParamUpdate {
                name: wname.clone(),
                region: Region::Cols {
                    start: global * dh,
                    len: dh,
                },
                values: tensor_col_block(wt, src_col * dh, dh),
            });
            updates.push(ParamUpdate {
                name: bname.clone(),
                region: Region::Span {
                    start: global * dh,
                    len: dh,
                },
                values: bt.data()[src_col * dh..(src_col + 1) * dh].to_vec(),
            });
        }
    }
    let ct = r.store.expect(&names::c_attn(l))?;
    if whole && !physical {
        updates.push(ParamUpdate {
            name: names::c_attn(l),
            region: Region::Full,
            values: ct.data().to_vec(),
        });
    } else {
        for (local, &global) in kept.iter().enumerate() {
            let src_row = if physical { local } else { global };
            updates.push(ParamUpdate {
                name: names::c_attn(l),
                region: Region::Rows {
                    start: global * dh,
                    len: dh,
                },
                values: tensor_row_block(ct, src_row * dh, dh),
            });
        }
    }
    Ok(())
}

fn push_ffn_updates(
    r: &WorkerResult,
    cfg: &ModelConfig,
    l: usize,
    updates: &mut Vec<ParamUpdate>,
) -> Result<()> {
    let kept = &r.spec.ffn_kept[l];
    let chunk = cfg.ffn_chunk();
    let physical = r.spec.mode == SubnetMode::Physical;
    let whole = kept.len() == cfg.ffn_blocks;
    let wt = r.store.expect(&names::w_in(l))?;
    let bt = r.store.expect(&names::b_in(l))?;
    let ct = r.store.expect(&names::c_out(l))?;
    if whole && !physical {
        for (name, t) in [
            (names::w_in(l), wt),
            (names::b_in(l), bt),
            (names::c_out(l), ct),
        ] {
            updates.push(ParamUpdate {
                name,
                region: Region::Full,
                values: t.data().to_vec(),
            });
        }
        return Ok(());
    }
    for (local, &global) in kept.iter().enumerate() {
        let src = if physical { local } else { global };
        updates.push(ParamUpdate {
            name: names::w_in(l),
            region: Region::Cols {
                start: global * chunk,
                len: chunk,
            },
            values: tensor_col_block(wt, src * chunk, chunk),
        });
        updates.push(ParamUpdate {
            name: names::b_in(l),
            region: Region::Span {
                start: global * chunk,
                len: chunk,
            },
            values: bt.data()[src * chunk..(src + 1) * chunk].to_vec(),
        });
        updates.push(ParamUpdate {
            name: names::c_out(l),
            region: Region::Rows {
                start: global * chunk,
                len: chunk,
            },
            values: tensor_row_block(ct, src * chunk, chunk),
        });
    }
    Ok(())
}

/// Zero the gradient slices of masked-out blocks so optimizer moments never
/// accumulate on inactive parameters.
pub fn zero_masked_grads(store: &mut ParameterStore, cfg: &ModelConfig, spec: &SubnetSpec) {
    let dh = cfg.d_head;
    let chunk = cfg.ffn_chunk();
    for l in 0..cfg.layers {
        let head_keep = head_mask_vec(&spec.attn_kept[l], cfg.heads, dh);
        if spec.attn_kept[l].len() != cfg.heads {
            for name in [names::wq(l), names::wk(l), names::wv(l)] {
                let t = store.get_mut(&name).unwrap();
                let (rows, cols) = t.dims2().unwrap();
                if let Some(g) = t.grad.as_mut() {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[i * cols + j] *= head_keep[j];
                        }
                    }
                }
            }
            for name in [names::bq(l), names::bk(l), names::bv(l)] {
                let t = store.get_mut(&name).unwrap();
                if let Some(g) = t.grad.as_mut() {
                    for (gv, m) in g.iter_mut().zip(&head_keep) {
                        *gv *= *m;
                    }
                }
            }
            let t = store.get_mut(&names::c_attn(l)).unwrap();
            let (_, cols) = t.dims2().unwrap();
            if let Some(g) = t.grad.as_mut() {
                for (i, m) in head_keep.iter().enumerate() {
                    if *m == 0.0 {
                        g[i * cols..(i + 1) * cols].fill(0.0);
                    }
                }
            }
        }
        if spec.ffn_kept[l].len() != cfg.ffn_blocks {
            let ffn_keep = ffn_mask_vec(&spec.ffn_kept[l], cfg.ffn_blocks, cfg.d_inner);
            let t = store.get_mut(&names::w_in(l)).unwrap();
            let (rows, cols) = t.dims2().unwrap();
            if let Some(g) = t.grad.as_mut() {
                for i in 0..rows {
                    for j in 0..cols {
                        g[i * cols + j] *= ffn_keep[j];
                    }
                }
            }
            let t = store.get_mut(&names::b_in(l)).unwrap();
            if let Some(g) = t.grad.as_mut() {
                for (gv, m) in g.iter_mut().zip(&ffn_keep) {
                    *gv *= *m;
                }
            }
            let t = store.get_mut(&names::c_out(l)).unwrap();
            let (_, cols) = t.dims2().unwrap();
            if let Some(g) = t.grad.as_mut() {
                for (i, m) in ffn_keep.iter().enumerate() {
                    if *m == 0.0 {
                        g[i * cols..(i + 1) * cols].fill(0.0);
                    }
                }
            }
        }
        let _ = chunk;
    }
}
