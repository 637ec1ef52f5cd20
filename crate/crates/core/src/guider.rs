//! The guider: turns features of a mixed image back into pseudo
//! target-domain features.
//!
//! Positions whose downsampled mask marks them as source are replaced by a
//! learnable token, then a global-aggregation branch
//! (`Z_out ∘ A ∘ Z_in`, with `A` = patch embedding, positional encoding,
//! transformer blocks and a linear projection back to feature space)
//! predicts an offset that is added to the initialised features. Both
//! `Z_in` and `Z_out` are zero-initialised 1×1 maps, so a fresh guider is
//! the identity on its initialised input.
//!
//! The guider only exists during training; its parameters are stored under
//! the `guider/` prefix.

use crate::error::{Error, Result};
use crate::nn::layers::{
    from_rows, to_rows, truncated_normal, AttentionCache, LayerNormCache, LinearCache,
};
use crate::nn::{gelu, gelu_backward, Attention, Grads, Init, LayerNorm, Linear, ParamId, ParamStore};
use ndarray::{Array2, Array3, Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const GUIDER_PREFIX: &str = "guider/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    /// Separate sine/cosine tables for row and column, concatenated.
    Sincos2d,
    /// One sine/cosine table over the raster token index.
    Sincos1d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuiderConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub patch_size: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Zero-initialise the input projection (otherwise He-normal).
    pub zero_init_in: bool,
    /// Zero-initialise the output projection (otherwise He-normal).
    pub zero_init_out: bool,
    /// Learn an offset on top of the initialised features rather than the
    /// features themselves.
    pub skip_connection: bool,
    pub positional_encoding: PositionalEncoding,
}

impl Default for GuiderConfig {
    fn default() -> Self {
        GuiderConfig {
            feature_dim: 128,
            embed_dim: 512,
            num_blocks: 2,
            patch_size: 4,
            num_heads: 8,
            mlp_ratio: 4.0,
            zero_init_in: true,
            zero_init_out: true,
            skip_connection: true,
            positional_encoding: PositionalEncoding::Sincos2d,
        }
    }
}

impl GuiderConfig {
    /// Width scaled to the toy encoder: the embedding keeps the 1:4 ratio
    /// to the feature width that the full-size configuration has on a
    /// 2048-channel backbone.
    pub fn desk(feature_dim: usize) -> Self {
        GuiderConfig {
            feature_dim,
            embed_dim: (feature_dim / 4).max(4),
            num_heads: 4,
            ..Self::default()
        }
    }

    pub fn mlp_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.embed_dim == 0 || self.patch_size == 0 || self.num_heads == 0 {
            return Err(Error::Config("guider dimensions must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        let div = match self.positional_encoding {
            PositionalEncoding::Sincos2d => 4,
            PositionalEncoding::Sincos1d => 2,
        };
        if self.embed_dim % div != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by {div} for {:?}",
                self.embed_dim, self.positional_encoding
            )));
        }
        if self.mlp_dim() == 0 {
            return Err(Error::Config("mlp_ratio gives an empty hidden layer".into()));
        }
        Ok(())
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
struct TransformerBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug)]
struct BlockCache {
    norm1: LayerNormCache,
    attn: AttentionCache,
    norm2: LayerNormCache,
    fc1: LinearCache,
    hidden: Array2<f64>,
    fc2: LinearCache,
}

impl TransformerBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &GuiderConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}/norm1"), d),
            attn: Attention::new(store, &format!("{name}/attn"), d, cfg.num_heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}/norm2"), d),
            fc1: Linear::new(store, &format!("{name}/mlp/fc1"), d, cfg.mlp_dim(), Init::XavierUniform, rng),
            fc2: Linear::new(store, &format!("{name}/mlp/fc2"), cfg.mlp_dim(), d, Init::XavierUniform, rng),
        }
    }

    fn forward(&self, store: &ParamStore, x: Array2<f64>, batch: usize, tokens: usize) -> (Array2<f64>, BlockCache) {
        let (h, norm1) = self.norm1.forward(store, &x);
        let (a, attn) = self.attn.forward(store, h, batch, tokens);
        let x = x + &a;
        let (h, norm2) = self.norm2.forward(store, &x);
        let (hidden, fc1) = self.fc1.forward(store, h);
        let (m, fc2) = self.fc2.forward(store, gelu(&hidden));
        let out = x + &m;
        (
            out,
            BlockCache {
                norm1,
                attn,
                norm2,
                fc1,
                hidden,
                fc2,
            },
        )
    }

    fn backward(&self, store: &ParamStore, c: &BlockCache, dy: &Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        let dact = self.fc2.backward(store, &c.fc2, dy, grads, true).unwrap();
        let dhidden = gelu_backward(&c.hidden, &dact);
        let dh = self.fc1.backward(store, &c.fc1, &dhidden, grads, true).unwrap();
        let dx1 = dy + &self.norm2.backward(store, &c.norm2, &dh, grads);
        let da = self.attn.backward(store, &c.attn, &dx1, grads);
        &dx1 + &self.norm1.backward(store, &c.norm1, &da, grads)
    }
}

/// Activations of one guider forward pass.
#[derive(Debug)]
pub struct GuiderCache {
    mask: Array3<bool>,
    gia: GiaCache,
}

#[derive(Debug)]
pub struct GiaCache {
    z_in: LinearCache,
    patch_embed: LinearCache,
    blocks: Vec<BlockCache>,
    projection: LinearCache,
    z_out: LinearCache,
    dims: (usize, usize, usize, usize),
}

#[derive(Debug)]
pub struct Guider {
    cfg: GuiderConfig,
    token: ParamId,
    z_in: Linear,
    patch_embed: Linear,
    blocks: Vec<TransformerBlock>,
    projection: Linear,
    z_out: Linear,
}

impl Guider {
    pub fn new<R: Rng + ?Sized>(cfg: GuiderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.feature_dim;
        let p2c = cfg.patch_size * cfg.patch_size * c;
        let t = truncated_normal(c, 0.02, rng);
        let token = store.add(
            format!("{GUIDER_PREFIX}token"),
            ArrayD::from_shape_vec(vec![c], t).expect("token length"),
        );
        let zinit = |zero: bool| if zero { Init::Zeros } else { Init::KaimingNormal };
        let z_in = Linear::new(store, &format!("{GUIDER_PREFIX}z_in"), c, c, zinit(cfg.zero_init_in), rng);
        let patch_embed = Linear::new(
            store,
            &format!("{GUIDER_PREFIX}gia/patch_embed"),
            p2c,
            cfg.embed_dim,
            Init::XavierUniform,
            rng,
        );
        let blocks = (0..cfg.num_blocks)
            .map(|i| TransformerBlock::new(store, &format!("{GUIDER_PREFIX}gia/blocks/{i}"), &cfg, rng))
            .collect();
        let projection = Linear::new(
            store,
            &format!("{GUIDER_PREFIX}gia/projection"),
            cfg.embed_dim,
            p2c,
            Init::XavierUniform,
            rng,
        );
        let z_out = Linear::new(store, &format!("{GUIDER_PREFIX}z_out"), c, c, zinit(cfg.zero_init_out), rng);
        Ok(Guider {
            cfg,
            token,
            z_in,
            patch_embed,
            blocks,
            projection,
            z_out,
        })
    }

    pub fn config(&self) -> &GuiderConfig {
        &self.cfg
    }

    pub fn token_id(&self) -> ParamId {
        self.token
    }

    pub fn z_in(&self) -> &Linear {
        &self.z_in
    }

    pub fn z_out(&self) -> &Linear {
        &self.z_out
    }

    /// Weight of the first block's fused query/key/value projection.
    pub fn first_attention_weight(&self) -> Option<ParamId> {
        self.blocks.first().map(|b| b.attn.qkv.weight)
    }

    fn check(&self, f: &Array4<f64>, mask: Option<&Array3<bool>>) -> Result<()> {
        let (n, h, w, c) = f.dim();
        if c != self.cfg.feature_dim {
            return Err(Error::Shape(format!(
                "guider expects {} channels, got {c}",
                self.cfg.feature_dim
            )));
        }
        let p = self.cfg.patch_size;
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "feature map {h}x{w} not divisible by patch size {p}"
            )));
        }
        if let Some(m) = mask {
            if m.dim() != (n, h, w) {
                return Err(Error::Shape(format!(
                    "mask {:?} vs features {:?}",
                    m.dim(),
                    (n, h, w)
                )));
            }
        }
        Ok(())
    }

    /// Replaces every masked position's channel vector with the token.
    pub fn init_features(&self, store: &ParamStore, f_m: &Array4<f64>, mask_scale: &Array3<bool>) -> Result<Array4<f64>> {
        let (n, h, w, c) = f_m.dim();
        if c != self.cfg.feature_dim || mask_scale.dim() != (n, h, w) {
            return Err(Error::Shape(format!(
                "features {:?} vs mask {:?}",
                f_m.dim(),
                mask_scale.dim()
            )));
        }
        let token = store.vector(self.token);
        let mut out = f_m.clone();
        for ((b, y, x), &m) in mask_scale.indexed_iter() {
            if m {
                out.slice_mut(ndarray::s![b, y, x, ..])
                    .iter_mut()
                    .zip(token)
                    .for_each(|(o, &t)| *o = t);
            }
        }
        Ok(out)
    }

    /// The offset branch `Z_out(A(Z_in(f)))`; output shape equals input shape.
    pub fn gia_forward(&self, store: &ParamStore, f_ini: &Array4<f64>) -> Result<(Array4<f64>, GiaCache)> {
        self.check(f_ini, None)?;
        let (n, h, w, c) = f_ini.dim();
        let p = self.cfg.patch_size;
        let (gh, gw) = (h / p, w / p);
        let tokens = gh * gw;
        let (z1, z_in) = self.z_in.forward(store, to_rows(f_ini.clone()));
        let patches = patchify(&from_rows(z1, n, h, w), p);
        let (mut x, patch_embed) = self.patch_embed.forward(store, patches);
        let pos = positional_table(self.cfg.positional_encoding, gh, gw, self.cfg.embed_dim);
        for b in 0..n {
            let mut rows = x.slice_mut(ndarray::s![b * tokens..(b + 1) * tokens, ..]);
            rows += &pos;
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(store, x, n, tokens);
            blocks.push(cache);
            x = y;
        }
        let (proj, projection) = self.projection.forward(store, x);
        let feat = unpatchify(&proj, n, h, w, c, p);
        let (offset, z_out) = self.z_out.forward(store, to_rows(feat));
        Ok((
            from_rows(offset, n, h, w),
            GiaCache {
                z_in,
                patch_embed,
                blocks,
                projection,
                z_out,
                dims: (n, h, w, c),
            },
        ))
    }

    pub fn gia_backward(&self, store: &ParamStore, cache: &GiaCache, d_offset: &Array4<f64>, grads: &mut Grads) -> Array4<f64> {
        let (n, h, w, c) = cache.dims;
        let p = self.cfg.patch_size;
        let d = self
            .z_out
            .backward(store, &cache.z_out, &to_rows(d_offset.clone()), grads, true)
            .unwrap();
        let dproj = patchify(&from_rows(d, n, h, w), p);
        let mut dx = self
            .projection
            .backward(store, &cache.projection, &dproj, grads, true)
            .unwrap();
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = block.backward(store, bc, &dx, grads);
        }
        let dpatch = self
            .patch_embed
            .backward(store, &cache.patch_embed, &dx, grads, true)
            .unwrap();
        let dz1 = unpatchify(&dpatch, n, h, w, c, p);
        let d = self
            .z_in
            .backward(store, &cache.z_in, &to_rows(dz1), grads, true)
            .unwrap();
        from_rows(d, n, h, w)
    }

    /// Pseudo target features: `A'(f_ini) + f_ini`, or only the branch
    /// output when the skip connection is disabled.
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        f_m: &Array4<f64>,
        mask_scale: &Array3<bool>,
    ) -> Result<(Array4<f64>, GuiderCache)> {
        self.check(f_m, Some(mask_scale))?;
        let f_ini = self.init_features(store, f_m, mask_scale)?;
        let (offset, gia) = self.gia_forward(store, &f_ini)?;
        let out = if self.cfg.skip_connection {
            offset + &f_ini
        } else {
            offset
        };
        Ok((
            out,
            GuiderCache {
                mask: mask_scale.clone(),
                gia,
            },
        ))
    }

    /// Accumulates guider gradients and returns the gradient w.r.t. `f_m`.
    pub fn backward(&self, store: &ParamStore, cache: &GuiderCache, d_out: &Array4<f64>, grads: &mut Grads) -> Array4<f64> {
        let mut d_ini = self.gia_backward(store, &cache.gia, d_out, grads);
        if self.cfg.skip_connection {
            d_ini += d_out;
        }
        let c = self.cfg.feature_dim;
        let mut dtoken = vec![0.0; c];
        for ((b, y, x), &m) in cache.mask.indexed_iter() {
            if m {
                let mut v = d_ini.slice_mut(ndarray::s![b, y, x, ..]);
                for (acc, g) in dtoken.iter_mut().zip(v.iter()) {
                    *acc += g;
                }
                v.fill(0.0);
            }
        }
        for (g, d) in grads.vector_mut(self.token).iter_mut().zip(&dtoken) {
            *g += d;
        }
        d_ini
    }
}

/// `(N, H, W, C)` to `(N·T, p·p·C)` with tokens in raster order and
/// patch contents ordered `(row, col, channel)`.
fn patchify(x: &Array4<f64>, p: usize) -> Array2<f64> {
    let (n, h, w, c) = x.dim();
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::zeros((n * gh * gw, p * p * c));
    for b in 0..n {
        for ty in 0..gh {
            for tx in 0..gw {
                let row = (b * gh + ty) * gw + tx;
                for py in 0..p {
                    for px in 0..p {
                        let src = x.slice(ndarray::s![b, ty * p + py, tx * p + px, ..]);
                        let o = (py * p + px) * c;
                        out.slice_mut(ndarray::s![row, o..o + c]).assign(&src);
                    }
                }
            }
        }
    }
    out
}

fn unpatchify(t: &Array2<f64>, n: usize, h: usize, w: usize, c: usize, p: usize) -> Array4<f64> {
    let (gh, gw) = (h / p, w / p);
    let mut out = Array4::zeros((n, h, w, c));
    for b in 0..n {
        for ty in 0..gh {
            for tx in 0..gw {
                let row = (b * gh + ty) * gw + tx;
                for py in 0..p {
                    for px in 0..p {
                        let o = (py * p + px) * c;
                        out.slice_mut(ndarray::s![b, ty * p + py, tx * p + px, ..])
                            .assign(&t.slice(ndarray::s![row, o..o + c]));
                    }
                }
            }
        }
    }
    out
}

fn sincos_1d(dim: usize, positions: impl Iterator<Item = f64>) -> Vec<Vec<f64>> {
    let half = dim / 2;
    positions
        .map(|pos| {
            let mut v = Vec::with_capacity(dim);
            for i in 0..half {
                let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
                v.push((pos * omega).sin());
            }
            for i in 0..half {
                let omega = 1.0 / 10000f64.powf(i as f64 / half as f64);
                v.push((pos * omega).cos());
            }
            v
        })
        .collect()
}

/// Fixed `(gh·gw, dim)` table of sine/cosine positional encodings.
pub fn positional_table(kind: PositionalEncoding, gh: usize, gw: usize, dim: usize) -> Array2<f64> {
    let mut table = Array2::zeros((gh * gw, dim));
    match kind {
        PositionalEncoding::Sincos2d => {
            let rows = sincos_1d(dim / 2, (0..gh).map(|v| v as f64));
            let cols = sincos_1d(dim / 2, (0..gw).map(|v| v as f64));
            for y in 0..gh {
                for x in 0..gw {
                    let t = y * gw + x;
                    for j in 0..dim / 2 {
                        table[[t, j]] = rows[y][j];
                        table[[t, dim / 2 + j]] = cols[x][j];
                    }
                }
            }
        }
        PositionalEncoding::Sincos1d => {
            let enc = sincos_1d(dim, (0..gh * gw).map(|v| v as f64));
            for (t, row) in enc.into_iter().enumerate() {
                for (j, v) in row.into_iter().enumerate() {
                    table[[t, j]] = v;
                }
            }
        }
    }
    table
}
