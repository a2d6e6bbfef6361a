//! Monte Carlo verification of the initialization scaling laws.
//!
//! FFN: with He-initialized weights and i.i.d. standard normal inputs,
//! subsetting the inner dimension to d′ scales E‖y′‖ by √(d′/d_inner),
//! E‖y′‖² by d′/d_inner, and each output component has unit variance.
//!
//! Attention: at initialization the softmax is approximated as attending to
//! all tokens equally, head_h ≈ (1/N)·11ᵀ·X·W_v. Keeping H′ of H heads
//! scales the expected row norm by √(H′/H); output components have
//! variance 1/N.
//!
//! Trials are batched: each batch draws fresh weights on its own rng stream
//! and runs a fixed number of input draws, so estimates pool over both
//! weight and input randomness and are identical at any thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TwistError};
use crate::tensor::kernels::{axpy, dot};
use crate::tensor::Rng;

pub const TOL_NORM_RATIO: f64 = 0.02;
pub const TOL_SQ_RATIO: f64 = 0.01;
pub const TOL_COMPONENT_VAR: f64 = 0.10;

const XS_PER_WEIGHT_DRAW: usize = 64;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalingRow {
    pub check: String,
    /// Fraction kept (FFN) or H′/H (attention); 1.0 for variance rows.
    pub x: f64,
    pub measured: f64,
    pub predicted: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl ScalingRow {
    pub fn pass(&self) -> bool {
        self.rel_err <= self.tolerance
    }

    fn new(check: &str, x: f64, measured: f64, predicted: f64, tolerance: f64) -> Self {
        let abs_err = (measured - predicted).abs();
        Self {
            check: check.to_string(),
            x,
            measured,
            predicted,
            abs_err,
            rel_err: abs_err / predicted.abs(),
            tolerance,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
}

impl ScalingTable {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(ScalingRow::pass)
    }

    pub fn failing(&self) -> Vec<&ScalingRow> {
        self.rows.iter().filter(|r| !r.pass()).collect()
    }
}

#[derive(Clone, Default)]
struct NormAccum {
    norm: f64,
    sq: f64,
}

#[derive(Clone, Default)]
struct FfnPartial {
    subs: Vec<NormAccum>,
    full: NormAccum,
    comp_sq: f64,
    comp_sum: f64,
    comp_n: u64,
    trials: u64,
}

/// Verify the FFN scale factors at the given kept fractions.
pub fn mc_verify_ffn_scaling(
    d_model: usize,
    d_inner: usize,
    fractions: &[f64],
    trials: usize,
    rng: &Rng,
) -> Result<ScalingTable> {
    if trials == 0 || fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(TwistError::InvalidInput(
            "need trials >= 1 and fractions in (0, 1]".into(),
        ));
    }
    let d_subs: Vec<usize> = fractions
        .iter()
        .map(|&f| ((f * d_inner as f64).round() as usize).clamp(1, d_inner))
        .collect();
    let batches = trials.div_ceil(XS_PER_WEIGHT_DRAW);

    let partials: Vec<FfnPartial> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut r = rng.substream_n(&[0xFF0, b as u64]);
            let todo = XS_PER_WEIGHT_DRAW.min(trials - b * XS_PER_WEIGHT_DRAW);
            // W stored d_inner×d_model (row j = weights into unit j);
            // C stored transposed, row j = that unit's output weights.
            let w_std = (2.0 / d_model as f32).sqrt();
            let c_std = (1.0 / d_inner as f32).sqrt();
            let mut w = vec![0.0f32; d_inner * d_model];
            let mut ct = vec![0.0f32; d_inner * d_model];
            r.fill_normal(&mut w, w_std);
            r.fill_normal(&mut ct, c_std);

            let pool: Vec<usize> = (0..d_inner).collect();
            let mut x = vec![0.0f32; d_model];
            let mut z = vec![0.0f32; d_inner];
            let mut y = vec![0.0f32; d_model];
            let mut part = FfnPartial {
                subs: vec![NormAccum::default(); d_subs.len()],
                ..Default::default()
            };
            for _ in 0..todo {
                r.fill_normal(&mut x, 1.0);
                for j in 0..d_inner {
                    let a = dot(&w[j * d_model..(j + 1) * d_model], &x);
                    z[j] = if a > 0.0 { a } else { 0.0 };
                }
                y.fill(0.0);
                for j in 0..d_inner {
                    if z[j] != 0.0 {
                        axpy(z[j], &ct[j * d_model..(j + 1) * d_model], &mut y);
                    }
                }
                let sq = y.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
                part.full.norm += sq.sqrt();
                part.full.sq += sq;
                part.comp_sq += sq;
                part.comp_sum += y.iter().map(|v| *v as f64).sum::<f64>();
                part.comp_n += d_model as u64;

                for (fi, &d_sub) in d_subs.iter().enumerate() {
                    let subset = r.sample_without_replacement(&pool, d_sub);
                    y.fill(0.0);
                    for &j in &subset {
                        if z[j] != 0.0 {
                            axpy(z[j], &ct[j * d_model..(j + 1) * d_model], &mut y);
                        }
                    }
                    let sq = y.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
                    part.subs[fi].norm += sq.sqrt();
                    part.subs[fi].sq += sq;
                }
                part.trials += 1;
            }
            part
        })
        .collect();

    let mut total = FfnPartial {
        subs: vec![NormAccum::default(); d_subs.len()],
        ..Default::default()
    };
    for p in partials {
        for (a, b) in total.subs.iter_mut().zip(&p.subs) {
            a.norm += b.norm;
            a.sq += b.sq;
        }
        total.full.norm += p.full.norm;
        total.full.sq += p.full.sq;
        total.comp_sq += p.comp_sq;
        total.comp_sum += p.comp_sum;
        total.comp_n += p.comp_n;
        total.trials += p.trials;
    }

    let mut rows = Vec::new();
    for (fi, &f) in fractions.iter().enumerate() {
        let frac_exact = d_subs[fi] as f64 / d_inner as f64;
        rows.push(ScalingRow::new(
            "ffn_norm_ratio",
            f,
            total.subs[fi].norm / total.full.norm,
            frac_exact.sqrt(),
            TOL_NORM_RATIO,
        ));
        rows.push(ScalingRow::new(
            "ffn_sq_ratio",
            f,
            total.subs[fi].sq / total.full.sq,
            frac_exact,
            TOL_SQ_RATIO,
        ));
    }
    let mean = total.comp_sum / total.comp_n as f64;
    let var = total.comp_sq / total.comp_n as f64 - mean * mean;
    rows.push(ScalingRow::new(
        "ffn_component_var",
        1.0,
        var,
        1.0,
        TOL_COMPONENT_VAR,
    ));
    Ok(ScalingTable { rows })
}

#[derive(Clone, Default)]
struct AttnPartial {
    subs: Vec<NormAccum>,
    full: NormAccum,
    comp_sq: f64,
    comp_sum: f64,
    comp_n: u64,
}

/// Verify the attention scale factors with the uniform-attention surrogate
/// head (1/N)·11ᵀ·X·W_v.
pub fn mc_verify_attn_scaling(
    n_ctx: usize,
    d_model: usize,
    heads: usize,
    d_head: usize,
    head_counts: &[usize],
    trials: usize,
    rng: &Rng,
) -> Result<ScalingTable> {
    if trials == 0 || head_counts.iter().any(|&h| h == 0 || h > heads) {
        return Err(TwistError::InvalidInput(
            "need trials >= 1 and head counts in 1..=H".into(),
        ));
    }
    let width = heads * d_head;
    let batches = trials.div_ceil(XS_PER_WEIGHT_DRAW);

    let partials: Vec<AttnPartial> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut r = rng.substream_n(&[0xA77, b as u64]);
            let todo = XS_PER_WEIGHT_DRAW.min(trials - b * XS_PER_WEIGHT_DRAW);
            let v_std = (1.0 / d_model as f32).sqrt();
            let c_std = (1.0 / width as f32).sqrt();
            // W_v stored transposed (width×d_model rows), C row-major
            // (width×d_model with row k the projection of concat slot k).
            let mut wvt = vec![0.0f32; width * d_model];
            let mut c = vec![0.0f32; width * d_model];
            r.fill_normal(&mut wvt, v_std);
            r.fill_normal(&mut c, c_std);

            let head_pool: Vec<usize> = (0..heads).collect();
            let mut xrow = vec![0.0f32; d_model];
            let mut xbar = vec![0.0f32; d_model];
            let mut z = vec![0.0f32; width];
            let mut y = vec![0.0f32; d_model];
            let mut part = AttnPartial {
                subs: vec![NormAccum::default(); head_counts.len()],
                ..Default::default()
            };
            for _ in 0..todo {
                // x̄ = column mean of X ∈ R^{N×d_model}, X ~ N(0, I).
                xbar.fill(0.0);
                for _ in 0..n_ctx {
                    r.fill_normal(&mut xrow, 1.0);
                    axpy(1.0, &xrow, &mut xbar);
                }
                let inv_n = 1.0 / n_ctx as f32;
                for v in xbar.iter_mut() {
                    *v *= inv_n;
                }
                for (k, zk) in z.iter_mut().enumerate() {
                    *zk = dot(&wvt[k * d_model..(k + 1) * d_model], &xbar);
                }
                y.fill(0.0);
                for k in 0..width {
                    axpy(z[k], &c[k * d_model..(k + 1) * d_model], &mut y);
                }
                let sq = y.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
                part.full.norm += sq.sqrt();
                part.full.sq += sq;
                part.comp_sq += sq;
                part.comp_sum += y.iter().map(|v| *v as f64).sum::<f64>();
                part.comp_n += d_model as u64;

                for (hi, &h_sub) in head_counts.iter().enumerate() {
                    let kept = r.sample_without_replacement(&head_pool, h_sub);
                    y.fill(0.0);
                    for &h in &kept {
                        for k in h * d_head..(h + 1) * d_head {
                            axpy(z[k], &c[k * d_model..(k + 1) * d_model], &mut y);
                        }
                    }
                    let sq = y.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
                    part.subs[hi].norm += sq.sqrt();
                    part.subs[hi].sq += sq;
                }
            }
            part
        })
        .collect();

    let mut total = AttnPartial {
        subs: vec![NormAccum::default(); head_counts.len()],
        ..Default::default()
    };
    for p in partials {
        for (a, b) in total.subs.iter_mut().zip(&p.subs) {
            a.norm += b.norm;
            a.sq += b.sq;
        }
        total.full.norm += p.full.norm;
        total.full.sq += p.full.sq;
        total.comp_sq += p.comp_sq;
        total.comp_sum += p.comp_sum;
        total.comp_n += p.comp_n;
    }

    let mut rows = Vec::new();
    for (hi, &h_sub) in head_counts.iter().enumerate() {
        let frac = h_sub as f64 / heads as f64;
        rows.push(ScalingRow::new(
            "attn_norm_ratio",
            frac,
            total.subs[hi].norm / total.full.norm,
            frac.sqrt(),
            TOL_NORM_RATIO,
        ));
        rows.push(ScalingRow::new(
            "attn_sq_ratio",
            frac,
            total.subs[hi].sq / total.full.sq,
            frac,
            TOL_SQ_RATIO,
        ));
    }
    let mean = total.comp_sum / total.comp_n as f64;
    let var = total.comp_sq / total.comp_n as f64 - mean * mean;
    rows.push(ScalingRow::new(
        "attn_component_var",
        1.0,
        var,
        1.0 / n_ctx as f64,
        TOL_COMPONENT_VAR,
    ));
    Ok(ScalingTable { rows })
}
