//! Parameter initialization.
//!
//! Variances follow the He-style scheme the scaling analysis assumes:
//! Wq/Wk/Wv ~ N(0, 1/d_model), C_attn ~ N(0, 1/(H·d_head)),
//! W_ffn ~ N(0, 2/d_model), C_ffn ~ N(0, 1/d_inner). Layernorm starts at
//! γ = 1, b = 0; all projection biases start at zero. Embeddings use
//! N(0, 1/d_model) for scale consistency.

use crate::error::Result;
use crate::model::{names, ModelConfig};
use crate::tensor::{ParameterStore, Rng, Tensor};

pub fn init_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParameterStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let aw = cfg.attn_width();
    let emb_std = (1.0 / d as f32).sqrt();
    let qkv_std = (1.0 / d as f32).sqrt();
    let cattn_std = (1.0 / aw as f32).sqrt();
    let win_std = (2.0 / d as f32).sqrt();
    let cout_std = (1.0 / cfg.d_inner as f32).sqrt();

    let mut store = ParameterStore::new();
    let mut put = |store: &mut ParameterStore, name: &str, t: Tensor| {
        store.insert(name, t.with_grad())
    };

    put(
        &mut store,
        names::TOKEN_EMBED,
        Tensor::randn(&[cfg.vocab, d], emb_std, rng),
    )?;
    put(
        &mut store,
        names::POS_EMBED,
        Tensor::randn(&[cfg.context, d], emb_std, rng),
    )?;

    for l in 0..cfg.layers {
        put(&mut store, &names::ln_attn_gamma(l), Tensor::filled(&[d], 1.0))?;
        put(&mut store, &names::ln_attn_beta(l), Tensor::zeros(&[d]))?;
        put(&mut store, &names::wq(l), Tensor::randn(&[d, aw], qkv_std, rng))?;
        put(&mut store, &names::bq(l), Tensor::zeros(&[aw]))?;
        put(&mut store, &names::wk(l), Tensor::randn(&[d, aw], qkv_std, rng))?;
        put(&mut store, &names::bk(l), Tensor::zeros(&[aw]))?;
        put(&mut store, &names::wv(l), Tensor::randn(&[d, aw], qkv_std, rng))?;
        put(&mut store, &names::bv(l), Tensor::zeros(&[aw]))?;
        put(&mut store, &names::c_attn(l), Tensor::randn(&[aw, d], cattn_std, rng))?;
        put(&mut store, &names::c_attn_b(l), Tensor::zeros(&[d]))?;
        put(&mut store, &names::ln_ffn_gamma(l), Tensor::filled(&[d], 1.0))?;
        put(&mut store, &names::ln_ffn_beta(l), Tensor::zeros(&[d]))?;
        put(&mut store, &names::w_in(l), Tensor::randn(&[d, cfg.d_inner], win_std, rng))?;
        put(&mut store, &names::b_in(l), Tensor::zeros(&[cfg.d_inner]))?;
        put(&mut store, &names::c_out(l), Tensor::randn(&[cfg.d_inner, d], cout_std, rng))?;
        put(&mut store, &names::c_out_b(l), Tensor::zeros(&[d]))?;
    }

    if !cfg.tie_projection {
        put(&mut store, names::PROJ, Tensor::randn(&[d, cfg.vocab], emb_std, rng))?;
    }

    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk_default(64);
        cfg.layers = 2;
        cfg.shared_layers = [0].into_iter().collect();
        cfg
    }

    #[test]
    fn same_seed_gives_identical_stores() {
        let cfg = small_cfg();
        let a = init_params(&cfg, &mut Rng::new(1, 2)).unwrap();
        let b = init_params(&cfg, &mut Rng::new(1, 2)).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn layernorm_gains_are_exactly_one() {
        let cfg = small_cfg();
        let store = init_params(&cfg, &mut Rng::new(0, 0)).unwrap();
        for l in 0..cfg.layers {
            assert!(store
                .get(&names::ln_attn_gamma(l))
                .unwrap()
                .data()
                .iter()
                .all(|&v| v == 1.0));
            assert!(store
                .get(&names::ln_ffn_beta(l))
                .unwrap()
                .data()
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn qkv_empirical_variance_matches_one_over_d_model() {
        let mut cfg = ModelConfig::desk_default(64);
        cfg.d_model = 256;
        cfg.heads = 8;
        cfg.d_head = 32;
        cfg.layers = 1;
        cfg.shared_layers = Default::default();
        let store = init_params(&cfg, &mut Rng::new(7, 0)).unwrap();
        let wq = store.get(&names::wq(0)).unwrap();
        let n = wq.numel() as f64;
        let mean: f64 = wq.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = wq.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let want = 1.0 / 256.0;
        assert!(
            (var - want).abs() / want < 0.05,
            "Var(wq) = {var:.6}, want {want:.6} ±5%"
        );
    }

    #[test]
    fn tied_projection_has_no_separate_table() {
        let cfg = small_cfg();
        let store = init_params(&cfg, &mut Rng::new(0, 0)).unwrap();
        assert!(store.get(names::PROJ).is_none());
        let mut untied = cfg.clone();
        untied.tie_projection = false;
        let store2 = init_params(&untied, &mut Rng::new(0, 0)).unwrap();
        assert_eq!(store2.get(names::PROJ).unwrap().shape(), &[cfg.d_model, cfg.vocab]);
    }
}
