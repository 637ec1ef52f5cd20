mod common;

use common::*;
use guidance_uda::data_synth::IGNORE;
use guidance_uda::guider::{Guider, GuiderConfig};
use guidance_uda::losses::ce_loss;
use guidance_uda::nn::{ParamId, ParamStore};
use guidance_uda::segmodel::{SegModel, SegModelConfig};
use ndarray::{Array3, Array4};
use rand::Rng;

const TOL: f64 = 1e-4;

#[test]
fn segmodel_parameter_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let model = SegModel::new(SegModelConfig::default(), &mut store, &mut rng(1)).unwrap();
    let x = randn4((2, 16, 16, 3), 0.5, 2).mapv(|v| v + 0.5);
    let mut y = random_labels((2, 16, 16), 6, 3);
    y[[0, 0, 0]] = IGNORE;
    let loss = |s: &ParamStore| ce_loss(&model.forward(s, &x).unwrap(), &y, None, IGNORE).unwrap().loss;

    let mut grads = store.zeros_like();
    let (f, enc) = model.encode(&store, &x).unwrap();
    let (logits, dec) = model.decode(&store, &f).unwrap();
    let out = ce_loss(&logits, &y, None, IGNORE).unwrap();
    let df = model.decode_backward(&store, &dec, &out.grad, &mut grads);
    model.encode_backward(&store, &enc, &df, &mut grads);

    let ids: Vec<_> = store.ids().collect();
    let sample = stratified_sample(&store, &ids, 32, 4);
    let res = check_entries(&mut store, &sample, &grads, loss);
    assert_eq!(res.checked, 32);
    assert!(res.max_rel <= TOL, "{res:?}");
}

#[test]
fn segmodel_input_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let cfg = common::tiny_model();
    let model = SegModel::new(cfg, &mut store, &mut rng(5)).unwrap();
    let x = randn4((1, 16, 16, 3), 0.5, 6);
    let y = random_labels((1, 16, 16), 6, 7);
    let mut grads = store.zeros_like();
    let (f, enc) = model.encode(&store, &x).unwrap();
    let (logits, dec) = model.decode(&store, &f).unwrap();
    let out = ce_loss(&logits, &y, None, IGNORE).unwrap();
    let df = model.decode_backward(&store, &dec, &out.grad, &mut grads);
    // Feature gradient: perturb the features directly.
    let mut r = rng(8);
    for _ in 0..12 {
        let idx = (0, r.random_range(0..2), r.random_range(0..2), r.random_range(0..16));
        let mut fp = f.clone();
        fp[idx] += FD_STEP;
        let up = ce_loss(&model.decode(&store, &fp).unwrap().0, &y, None, IGNORE).unwrap().loss;
        fp[idx] -= 2.0 * FD_STEP;
        let down = ce_loss(&model.decode(&store, &fp).unwrap().0, &y, None, IGNORE).unwrap().loss;
        let numeric = (up - down) / (2.0 * FD_STEP);
        assert!(rel_err(df[idx], numeric) <= TOL, "{idx:?}: {} vs {numeric}", df[idx]);
    }
    model.encode_backward(&store, &enc, &df, &mut grads);
}

fn guider_setup(cfg: GuiderConfig) -> (Guider, ParamStore, Array4<f64>, Array3<bool>, Array4<f64>) {
    let mut store = ParamStore::new();
    let g = Guider::new(cfg, &mut store, &mut rng(21)).unwrap();
    warm_guider(&g, &mut store, 22);
    let f = randn4((2, 8, 8, 16), 1.0, 23);
    let mut r = rng(24);
    let mask = Array3::from_shape_simple_fn((2, 8, 8), || r.random_bool(0.4));
    let weights = randn4((2, 8, 8, 16), 1.0, 25);
    (g, store, f, mask, weights)
}

fn guider_check(cfg: GuiderConfig) {
    let (g, mut store, f, mask, weights) = guider_setup(cfg);
    let loss = |s: &ParamStore| (g.reconstruct(s, &f, &mask).unwrap().0 * &weights).sum();
    let mut grads = store.zeros_like();
    let (_, cache) = g.reconstruct(&store, &f, &mask).unwrap();
    let df = g.backward(&store, &cache, &weights, &mut grads);

    let mut entries = all_entries(&store, g.token_id());
    for id in [g.z_in().weight, g.z_out().weight, g.first_attention_weight().unwrap()] {
        entries.extend(stratified_sample(&store, &[id], 24, id.index() as u64));
    }
    let ids: Vec<_> = store.ids().collect();
    entries.extend(stratified_sample(&store, &ids, 2 * ids.len(), 26));
    // Softmax ignores a shift shared by all keys, so the key bias gradient
    // is identically zero and its difference quotient is rounding noise.
    let key_bias = |id: ParamId, i: usize| {
        let name = store.name(id);
        name.ends_with("qkv/bias") && (store.get(id).len() / 3..2 * store.get(id).len() / 3).contains(&i)
    };
    for id in store.ids().filter(|&id| store.name(id).ends_with("qkv/bias")) {
        for i in 0..store.get(id).len() {
            if key_bias(id, i) {
                assert!(grads.get(id).as_slice().unwrap()[i].abs() < 1e-12);
            }
        }
    }
    entries.retain(|&(id, i)| !key_bias(id, i));
    let res = check_entries(&mut store, &entries, &grads, loss);
    assert!(res.max_rel <= TOL, "{res:?}");
    assert!(grads.sum_abs(g.token_id()) > 0.0);

    // Gradient with respect to the mixed features, zero where masked.
    let mut r = rng(27);
    for _ in 0..16 {
        let idx = (r.random_range(0..2), r.random_range(0..8), r.random_range(0..8), r.random_range(0..16));
        let mut fp = f.clone();
        fp[idx] += FD_STEP;
        let up = (g.reconstruct(&store, &fp, &mask).unwrap().0 * &weights).sum();
        fp[idx] -= 2.0 * FD_STEP;
        let down = (g.reconstruct(&store, &fp, &mask).unwrap().0 * &weights).sum();
        let numeric = (up - down) / (2.0 * FD_STEP);
        assert!(rel_err(df[idx], numeric) <= TOL, "{idx:?}: {} vs {numeric}", df[idx]);
        if mask[[idx.0, idx.1, idx.2]] {
            assert_eq!(df[idx], 0.0);
        }
    }
}

fn small_guider() -> GuiderConfig {
    GuiderConfig {
        feature_dim: 16,
        embed_dim: 16,
        num_heads: 2,
        ..GuiderConfig::default()
    }
}

#[test]
fn guider_gradients_match_finite_differences() {
    guider_check(small_guider());
}

#[test]
fn guider_gradients_without_skip_connection() {
    guider_check(GuiderConfig {
        skip_connection: false,
        ..small_guider()
    });
}

#[test]
fn guider_gradients_with_raster_positions_patch_two_three_blocks() {
    guider_check(GuiderConfig {
        patch_size: 2,
        num_blocks: 3,
        positional_encoding: guidance_uda::guider::PositionalEncoding::Sincos1d,
        ..small_guider()
    });
}

#[test]
fn token_gradient_flows_after_warmup() {
    let (g, store, f, mask, weights) = guider_setup(small_guider());
    let mut grads = store.zeros_like();
    let (_, cache) = g.reconstruct(&store, &f, &mask).unwrap();
    g.backward(&store, &cache, &weights, &mut grads);
    assert!(mask.iter().any(|&m| m));
    assert!(grads.sum_abs(g.token_id()) > 0.0);
}
