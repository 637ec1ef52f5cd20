#![allow(dead_code)]

use guidance_uda::data_synth::{render_many, Dataset, DatasetMeta, DomainShift, LabeledImage, SceneSpec};
use guidance_uda::guider::{Guider, GuiderConfig};
use guidance_uda::nn::{Grads, ParamId, ParamStore};
use guidance_uda::segmodel::SegModelConfig;
use guidance_uda::TrainConfig;
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so entries whose true gradient
/// is at round-off level are compared absolutely.
pub const REL_FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn4(dim: (usize, usize, usize, usize), std: f64, seed: u64) -> Array4<f64> {
    let mut r = rng(seed);
    let d = Normal::new(0.0, std).unwrap();
    Array4::from_shape_simple_fn(dim, || d.sample(&mut r))
}

pub fn random_labels(dim: (usize, usize, usize), classes: u8, seed: u64) -> Array3<u8> {
    let mut r = rng(seed);
    Array3::from_shape_simple_fn(dim, || r.random_range(0..classes))
}

/// Gives the zero-initialised guider projections random values so that
/// gradients reach everything upstream of them.
pub fn warm_guider(g: &Guider, store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let d = Normal::new(0.0, 0.2).unwrap();
    for id in [g.z_in().weight, g.z_in().bias, g.z_out().weight, g.z_out().bias] {
        store.get_mut(id).iter_mut().for_each(|v| *v = d.sample(&mut r));
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug)]
pub struct CheckResult {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
    pub max_abs_grad: f64,
}

/// Central differences on the given `(parameter, flat index)` entries.
pub fn check_entries(
    store: &mut ParamStore,
    entries: &[(ParamId, usize)],
    analytic: &Grads,
    loss: impl Fn(&ParamStore) -> f64,
) -> CheckResult {
    let mut res = CheckResult {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
        max_abs_grad: 0.0,
    };
    for &(id, i) in entries {
        let orig = store.get(id).as_slice().unwrap()[i];
        store.get_mut(id).as_slice_mut().unwrap()[i] = orig + FD_STEP;
        let up = loss(store);
        store.get_mut(id).as_slice_mut().unwrap()[i] = orig - FD_STEP;
        let down = loss(store);
        store.get_mut(id).as_slice_mut().unwrap()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.get(id).as_slice().unwrap()[i];
        let e = rel_err(a, numeric);
        res.checked += 1;
        res.max_abs_grad = res.max_abs_grad.max(a.abs());
        if e > res.max_rel || res.worst.is_empty() {
            res.max_rel = res.max_rel.max(e);
            res.worst = format!("{}[{i}]: analytic {a:e} numeric {numeric:e}", store.name(id));
        }
    }
    res
}

/// `count` entries, cycling over the tensors so each one is sampled.
pub fn stratified_sample(store: &ParamStore, ids: &[ParamId], count: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut r = rng(seed);
    (0..count)
        .map(|k| {
            let id = ids[k % ids.len()];
            (id, r.random_range(0..store.get(id).len()))
        })
        .collect()
}

pub fn all_entries(store: &ParamStore, id: ParamId) -> Vec<(ParamId, usize)> {
    (0..store.get(id).len()).map(|i| (id, i)).collect()
}

pub fn tiny_model() -> SegModelConfig {
    SegModelConfig {
        encoder_channels: vec![8, 16, 16],
        norm_groups: 4,
        ..SegModelConfig::default()
    }
}

/// Small, fast configuration on 32×32 images.
pub fn tiny_config(method: &str, seed: u64) -> TrainConfig {
    let model = tiny_model();
    TrainConfig {
        method: method.into(),
        seed,
        total_steps: 20,
        warmup_steps: Some(4),
        lr_encoder: 1e-3,
        lr_decoder: 1e-2,
        lr_guider: 1e-3,
        checkpoint_interval: 0,
        eval_interval: 0,
        guider: GuiderConfig {
            feature_dim: model.feature_dim(),
            embed_dim: 8,
            num_heads: 2,
            patch_size: 2,
            ..GuiderConfig::default()
        },
        model,
        ..TrainConfig::default()
    }
}

pub fn scenes(seed: u64, size: usize, count: usize, shift: DomainShift) -> Dataset {
    let spec = SceneSpec {
        rng_seed: seed,
        image_size: size,
        ..SceneSpec::default()
    };
    let images: Vec<LabeledImage> = render_many(&spec, &shift, 0, count).unwrap();
    let mut meta = DatasetMeta::new(spec, shift);
    meta.splits.insert("train".into(), count);
    Dataset { meta, images }
}

pub fn target_shift() -> DomainShift {
    DomainShift::new(0.3, 0.8, 0.05).unwrap()
}
