//! Aggregator: fold worker updates back into the central model.
//!
//! Each scalar parameter becomes the arithmetic mean of its values over the
//! workers that held it — the indicator-weighted average p = Σp·1 / Σ1.
//! Uniquely held parameters are therefore copied verbatim. Accumulation runs
//! in 64-bit so worker order cannot perturb the result.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TwistError};
use crate::model::{names, ModelConfig};
use crate::partition::RoundBlueprints;
use crate::tensor::{ParameterStore, Tensor};

/// Slice of a named tensor an update covers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Full,
    /// Row band [start, start+len) of a 2-D tensor.
    Rows { start: usize, len: usize },
    /// Column band [start, start+len) of a 2-D tensor.
    Cols { start: usize, len: usize },
    /// Element range of a 1-D tensor.
    Span { start: usize, len: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamUpdate {
    pub name: String,
    pub region: Region,
    pub values: Vec<f32>,
}

/// One worker's updates for a round.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UpdateSet {
    pub worker: usize,
    pub updates: Vec<ParamUpdate>,
}

/// Flat indices of `region` within a tensor of the given shape, paired with
/// the expected value count.
fn region_indices(shape: &[usize], region: &Region) -> Result<Vec<usize>> {
    match region {
        Region::Full => Ok((0..shape.iter().product()).collect()),
        Region::Span { start, len } => {
            if shape.len() != 1 || start + len > shape[0] {
                return Err(TwistError::Corrupt(format!(
                    "span {start}+{len} does not fit 1-D shape {shape:?}"
                )));
            }
            Ok((*start..start + len).collect())
        }
        Region::Rows { start, len } => {
            if shape.len() != 2 || start + len > shape[0] {
                return Err(TwistError::Corrupt(format!(
                    "row band {start}+{len} does not fit shape {shape:?}"
                )));
            }
            let cols = shape[1];
            Ok((start * cols..(start + len) * cols).collect())
        }
        Region::Cols { start, len } => {
            if shape.len() != 2 || start + len > shape[1] {
                return Err(TwistError::Corrupt(format!(
                    "column band {start}+{len} does not fit shape {shape:?}"
                )));
            }
            let (rows, cols) = (shape[0], shape[1]);
            let mut idx = Vec::with_capacity(rows * len);
            for i in 0..rows {
                for j in *start..start + len {
                    idx.push(i * cols + j);
                }
            }
            Ok(idx)
        }
    }
}

/// Indicator-weighted average of the updates into a fresh store.
pub fn aggregate(central: &ParameterStore, updates: &[UpdateSet]) -> Result<ParameterStore> {
    let mut sums: Vec<Vec<f64>> = Vec::with_capacity(central.len());
    let mut counts: Vec<Vec<u32>> = Vec::with_capacity(central.len());
    for (_, t) in central.iter() {
        sums.push(vec![0.0; t.numel()]);
        counts.push(vec![0; t.numel()]);
    }
    let name_index: std::collections::HashMap<&str, usize> = central
        .names()
        .enumerate()
        .map(|(i, n)| (n, i))
        .collect();

    for set in updates {
        for up in &set.updates {
            let &slot = name_index.get(up.name.as_str()).ok_or_else(|| {
                TwistError::Corrupt(format!("update names unknown tensor {:?}", up.name))
            })?;
            let shape = central.get(&up.name).unwrap().shape();
            let idx = region_indices(shape, &up.region)?;
            if idx.len() != up.values.len() {
                return Err(TwistError::Corrupt(format!(
                    "update for {:?} region {:?} carries {} values, expected {}",
                    up.name,
                    up.region,
                    up.values.len(),
                    idx.len()
                )));
            }
            let s = &mut sums[slot];
            let c = &mut counts[slot];
            for (&i, &v) in idx.iter().zip(&up.values) {
                s[i] += v as f64;
                c[i] += 1;
            }
        }
    }

    let mut out = ParameterStore::new();
    for (slot, (name, t)) in central.iter().enumerate() {
        let c = &counts[slot];
        if let Some(first_zero) = c.iter().position(|&n| n == 0) {
            return Err(TwistError::Coverage(format!(
                "parameter {name:?} element {first_zero} held by zero workers"
            )));
        }
        let s = &sums[slot];
        let mut data = Vec::with_capacity(t.numel());
        for i in 0..t.numel() {
            data.push((s[i] / c[i] as f64) as f32);
        }
        let mut nt = Tensor::from_vec(t.shape(), data)?;
        nt.requires_grad = t.requires_grad;
        out.insert(name, nt)?;
    }
    Ok(out)
}

/// Holder multiplicity per (name, region) implied by a round's blueprints.
/// Shared parameters report the full worker count.
#[derive(Clone, Debug)]
pub struct CensusEntry {
    pub name: String,
    pub region: Region,
    pub holders: usize,
}

pub fn coverage_census(bps: &RoundBlueprints, cfg: &ModelConfig) -> Vec<CensusEntry> {
    let s = bps.workers;
    let mut entries = Vec::new();
    let mut shared = |name: String, entries: &mut Vec<CensusEntry>| {
        entries.push(CensusEntry {
            name,
            region: Region::Full,
            holders: s,
        });
    };

    shared(names::TOKEN_EMBED.to_string(), &mut entries);
    shared(names::POS_EMBED.to_string(), &mut entries);
    for l in 0..cfg.layers {
        shared(names::ln_attn_gamma(l), &mut entries);
        shared(names::ln_attn_beta(l), &mut entries);
        match &bps.attn[l] {
            None => {
                for name in [
                    names::wq(l),
                    names::bq(l),
                    names::wk(l),
                    names::bk(l),
                    names::wv(l),
                    names::bv(l),
                    names::c_attn(l),
                ] {
                    shared(name, &mut entries);
                }
            }
            Some(bp) => {
                for block in 0..bp.n_full {
                    let holders = bp.rows.iter().filter(|r| r.contains(&block)).count();
                    let dh = cfg.d_head;
                    for name in [names::wq(l), names::wk(l), names::wv(l)] {
                        entries.push(CensusEntry {
                            name,
                            region: Region::Cols {
                                start: block * dh,
                                len: dh,
                            },
                            holders,
                        });
                    }
                    for name in [names::bq(l), names::bk(l), names::bv(l)] {
                        entries.push(CensusEntry {
                            name,
                            region: Region::Span {
                                start: block * dh,
                                len: dh,
                            },
                            holders,
                        });
                    }
                    entries.push(CensusEntry {
                        name: names::c_attn(l),
                        region: Region::Rows {
                            start: block * dh,
                            len: dh,
                        },
                        holders,
                    });
                }
            }
        }
        shared(names::c_attn_b(l), &mut entries);
        shared(names::ln_ffn_gamma(l), &mut entries);
        shared(names::ln_ffn_beta(l), &mut entries);
        match &bps.ffn[l] {
            None => {
                for name in [names::w_in(l), names::b_in(l), names::c_out(l)] {
                    shared(name, &mut entries);
                }
            }
            Some(bp) => {
                let chunk = cfg.ffn_chunk();
                for block in 0..bp.n_full {
                    let holders = bp.rows.iter().filter(|r| r.contains(&block)).count();
                    entries.push(CensusEntry {
                        name: names::w_in(l),
                        region: Region::Cols {
                            start: block * chunk,
                            len: chunk,
                        },
                        holders,
                    });
                    entries.push(CensusEntry {
                        name: names::b_in(l),
                        region: Region::Span {
                            start: block * chunk,
                            len: chunk,
                        },
                        holders,
                    });
                    entries.push(CensusEntry {
                        name: names::c_out(l),
                        region: Region::Rows {
                            start: block * chunk,
                            len: chunk,
                        },
                        holders,
                    });
                }
            }
        }
        shared(names::c_out_b(l), &mut entries);
    }
    if !cfg.tie_projection {
        shared(names::PROJ.to_string(), &mut entries);
    }
    entries
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(names_vals: &[(&str, &[f32])]) -> ParameterStore {
        let mut s = ParameterStore::new();
        for (n, v) in names_vals {
            s.insert(n, Tensor::from_vec(&[v.len()], v.to_vec()).unwrap())
                .unwrap();
        }
        s
    }

    fn span_update(worker: usize, name: &str, vals: &[f32]) -> UpdateSet {
        UpdateSet {
            worker,
            updates: vec![ParamUpdate {
                name: name.into(),
                region: Region::Full,
                values: vals.to_vec(),
            }],
        }
    }

    #[test]
    fn two_way_mean_and_unique_copy() {
        let central = store_with(&[("p", &[0.0])]);
        let out = aggregate(
            &central,
            &[span_update(0, "p", &[1.0]), span_update(1, "p", &[3.0])],
        )
        .unwrap();
        assert_eq!(out.get("p").unwrap().data()[0], 2.0);

        let out2 = aggregate(&central, &[span_update(0, "p", &[7.5])]).unwrap();
        assert_eq!(out2.get("p").unwrap().data()[0], 7.5);
    }

    #[test]
    fn identical_copies_aggregate_bitwise() {
        let vals = [0.1f32, -2.5e-7, 3.25, -0.0];
        let central = store_with(&[("w", &vals)]);
        let ups: Vec<UpdateSet> = (0..5).map(|w| span_update(w, "w", &vals)).collect();
        let out = aggregate(&central, &ups).unwrap();
        assert!(out.get("w").unwrap().bitwise_eq(central.get("w").unwrap()));
    }

    #[test]
    fn zero_coverage_is_an_error_naming_the_slice() {
        let central = store_with(&[("w", &[1.0, 2.0])]);
        let ups = vec![UpdateSet {
            worker: 0,
            updates: vec![ParamUpdate {
                name: "w".into(),
                region: Region::Span { start: 0, len: 1 },
                values: vec![5.0],
            }],
        }];
        let err = aggregate(&central, &ups).unwrap_err();
        match err {
            TwistError::Coverage(msg) => assert!(msg.contains('w') && msg.contains('1')),
            other => panic!("expected Coverage, got {other:?}"),
        }
    }

    #[test]
    fn conflicting_shapes_are_corruption() {
        let central = store_with(&[("w", &[1.0, 2.0])]);
        let ups = vec![UpdateSet {
            worker: 0,
            updates: vec![ParamUpdate {
                name: "w".into(),
                region: Region::Span { start: 1, len: 3 },
                values: vec![0.0, 0.0, 0.0],
            }],
        }];
        assert!(matches!(
            aggregate(&central, &ups),
            Err(TwistError::Corrupt(_))
        ));
    }

    #[test]
    fn permutation_invariance_under_f64_accumulation() {
        let vals: Vec<f32> = (0..64).map(|i| ((i * 37) % 19) as f32 * 0.173 - 1.5).collect();
        let central = store_with(&[("w", &vals)]);
        let mk = |w: usize, scale: f32| {
            let vs: Vec<f32> = vals.iter().map(|v| v * scale).collect();
            span_update(w, "w", &vs)
        };
        let a = aggregate(&central, &[mk(0, 1.0), mk(1, 0.5), mk(2, -0.25)]).unwrap();
        let b = aggregate(&central, &[mk(2, -0.25), mk(0, 1.0), mk(1, 0.5)]).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-7);
    }
}
