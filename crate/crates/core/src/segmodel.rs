//! Toy encoder-decoder segmentation network `F = D ∘ E`.
//!
//! The encoder is a stack of strided 3×3 conv / GroupNorm / GELU stages
//! reaching output stride 8; the decoder is a 1×1 classifier followed by
//! bilinear upsampling back to input resolution. Encoder and decoder
//! parameters live under the `encoder/` and `decoder/` name prefixes.

use crate::error::{Error, Result};
use crate::nn::layers::{ConvCache, GroupNormCache};
use crate::nn::{
    gelu_backward_gated, gelu_with_gate, upsample_bilinear, upsample_bilinear_backward, Conv2d, Grads, GroupNorm,
    Init, ParamId, ParamStore,
};
use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

pub const ENCODER_PREFIX: &str = "encoder/";
pub const DECODER_PREFIX: &str = "decoder/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// One stride-2 stage per entry; three stages give output stride 8.
    pub encoder_channels: Vec<usize>,
    /// Extra stride-1 3×3 blocks at the final resolution.
    pub refine_blocks: usize,
    pub norm_groups: usize,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig {
            in_channels: 3,
            num_classes: 6,
            encoder_channels: vec![32, 64, 128],
            refine_blocks: 1,
            norm_groups: 8,
        }
    }
}

impl SegModelConfig {
    pub fn output_stride(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() != 3 {
            return Err(Error::Config(format!(
                "encoder needs exactly 3 stages for output stride 8, got {}",
                self.encoder_channels.len()
            )));
        }
        if self.num_classes < 2 || self.in_channels == 0 {
            return Err(Error::Config("need at least 2 classes and 1 input channel".into()));
        }
        if let Some(c) = self
            .encoder_channels
            .iter()
            .find(|&&c| c == 0 || c % self.norm_groups != 0)
        {
            return Err(Error::Config(format!(
                "encoder width {c} not divisible by {} norm groups",
                self.norm_groups
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

#[derive(Debug)]
struct BlockCache {
    conv: ConvCache,
    norm: GroupNormCache,
    pre_act: Array4<f64>,
    gate: Array4<f64>,
}

impl ConvBlock {
    fn forward(&self, store: &ParamStore, x: &Array4<f64>) -> (Array4<f64>, BlockCache) {
        let (y, conv) = self.conv.forward(store, x);
        let (pre_act, norm) = self.norm.forward(store, &y);
        let (out, gate) = gelu_with_gate(&pre_act);
        (out, BlockCache { conv, norm, pre_act, gate })
    }

    fn backward(
        &self,
        store: &ParamStore,
        cache: &BlockCache,
        dy: &Array4<f64>,
        grads: &mut Grads,
        want_dx: bool,
    ) -> Option<Array4<f64>> {
        let d = gelu_backward_gated(&cache.pre_act, &cache.gate, dy);
        let d = self.norm.backward(store, &cache.norm, &d, grads);
        self.conv.backward(store, &cache.conv, &d, grads, want_dx)
    }
}

/// Activations retained by [`SegModel::encode`] for the backward pass.
#[derive(Debug)]
pub struct EncoderCache {
    blocks: Vec<BlockCache>,
}

#[derive(Debug)]
pub struct DecoderCache {
    classifier: ConvCache,
    feature_hw: (usize, usize),
}

/// Disjoint partition of the trainable parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterGroups {
    pub encoder: Vec<ParamId>,
    pub decoder: Vec<ParamId>,
}

#[derive(Debug)]
pub struct SegModel {
    cfg: SegModelConfig,
    blocks: Vec<ConvBlock>,
    classifier: Conv2d,
    encode_calls: AtomicUsize,
}

impl SegModel {
    /// Registers all parameters in `store` and returns the architecture.
    pub fn new<R: Rng + ?Sized>(cfg: SegModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        let mut in_ch = cfg.in_channels;
        for (i, &c) in cfg.encoder_channels.iter().enumerate() {
            let name = format!("{ENCODER_PREFIX}stage{i}");
            blocks.push(ConvBlock {
                conv: Conv2d::new(store, &format!("{name}/conv"), in_ch, c, 3, 2, 1, Init::KaimingNormal, rng),
                norm: GroupNorm::new(store, &format!("{name}/norm"), c, cfg.norm_groups),
            });
            in_ch = c;
        }
        for j in 0..cfg.refine_blocks {
            let name = format!("{ENCODER_PREFIX}refine{j}");
            blocks.push(ConvBlock {
                conv: Conv2d::new(store, &format!("{name}/conv"), in_ch, in_ch, 3, 1, 1, Init::KaimingNormal, rng),
                norm: GroupNorm::new(store, &format!("{name}/norm"), in_ch, cfg.norm_groups),
            });
        }
        let classifier = Conv2d::new(
            store,
            &format!("{DECODER_PREFIX}classifier"),
            in_ch,
            cfg.num_classes,
            1,
            1,
            0,
            Init::Normal(0.01),
            rng,
        );
        Ok(SegModel {
            cfg,
            blocks,
            classifier,
            encode_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// Number of [`SegModel::encode`] calls since construction.
    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn classifier(&self) -> &Conv2d {
        &self.classifier
    }

    /// Images `(N, H, W, C_in)` to features `(N, H/8, W/8, feature_dim)`.
    pub fn encode(&self, store: &ParamStore, x: &Array4<f64>) -> Result<(Array4<f64>, EncoderCache)> {
        let (_, h, w, c) = x.dim();
        let stride = self.cfg.output_stride();
        if c != self.cfg.in_channels || h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "encoder input {:?}: need {} channels and H, W divisible by {stride}",
                x.dim(),
                self.cfg.in_channels
            )));
        }
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur: Option<Array4<f64>> = None;
        for block in &self.blocks {
            let (y, cache) = block.forward(store, cur.as_ref().unwrap_or(x));
            caches.push(cache);
            cur = Some(y);
        }
        Ok((cur.expect("at least one block"), EncoderCache { blocks: caches }))
    }

    pub fn encode_backward(&self, store: &ParamStore, cache: &EncoderCache, df: &Array4<f64>, grads: &mut Grads) {
        let mut d = df.clone();
        for (i, (block, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            match block.backward(store, c, &d, grads, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    /// Features to full-resolution logits `(N, 8h, 8w, num_classes)`.
    pub fn decode(&self, store: &ParamStore, f: &Array4<f64>) -> Result<(Array4<f64>, DecoderCache)> {
        let (_, h, w, c) = f.dim();
        if c != self.cfg.feature_dim() {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, got {c}",
                self.cfg.feature_dim()
            )));
        }
        let (low, classifier) = self.classifier.forward(store, f);
        let s = self.cfg.output_stride();
        let logits = upsample_bilinear(&low, h * s, w * s);
        Ok((
            logits,
            DecoderCache {
                classifier,
                feature_hw: (h, w),
            },
        ))
    }

    pub fn decode_backward(
        &self,
        store: &ParamStore,
        cache: &DecoderCache,
        dlogits: &Array4<f64>,
        grads: &mut Grads,
    ) -> Array4<f64> {
        let (h, w) = cache.feature_hw;
        let dlow = upsample_bilinear_backward(dlogits, h, w);
        self.classifier
            .backward(store, &cache.classifier, &dlow, grads, true)
            .expect("input gradient requested")
    }

    /// Inference: logits for a batch without retaining activations.
    pub fn forward(&self, store: &ParamStore, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (f, _) = self.encode(store, x)?;
        Ok(self.decode(store, &f)?.0)
    }

    /// Per-pixel argmax class (lowest id on ties) for each image.
    pub fn predict(&self, store: &ParamStore, x: &Array4<f64>) -> Result<Array3<u8>> {
        Ok(argmax_classes(&self.forward(store, x)?))
    }

    pub fn parameter_groups(&self, store: &ParamStore) -> ParameterGroups {
        let mut groups = ParameterGroups {
            encoder: Vec::new(),
            decoder: Vec::new(),
        };
        for (id, name, _) in store.iter() {
            if name.starts_with(ENCODER_PREFIX) {
                groups.encoder.push(id);
            } else if name.starts_with(DECODER_PREFIX) {
                groups.decoder.push(id);
            }
        }
        groups
    }
}

pub fn argmax_classes(logits: &Array4<f64>) -> Array3<u8> {
    let (n, h, w, _) = logits.dim();
    let mut out = Array3::zeros((n, h, w));
    for ((b, y, x), o) in out.indexed_iter_mut() {
        let row = logits.slice(ndarray::s![b, y, x, ..]);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        *o = best as u8;
    }
    out
}

/// Stacks HWC images into an NHWC batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Array3<f64>>) -> Array4<f64> {
    let views: Vec<_> = images.into_iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("images share a shape")
}
