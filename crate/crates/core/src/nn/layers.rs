//! Layers with hand-written backward passes.
//!
//! Activations are NHWC `Array4<f64>` or row-major token matrices
//! `Array2<f64>` (one row per spatial position or token). Every `forward`
//! returns the cache its `backward` needs; gradients accumulate into
//! [`Grads`].

use super::params::{zeros, Grads, ParamId, ParamStore};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Parameter initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// He-normal on fan-in.
    KaimingNormal,
    XavierUniform,
    Normal(f64),
}

fn init_matrix<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut R,
) -> ndarray::ArrayD<f64> {
    let mut w = zeros(shape);
    match init {
        Init::Zeros => {}
        Init::KaimingNormal => {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            w.iter_mut().for_each(|x| *x = dist.sample(rng));
        }
        Init::XavierUniform => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).unwrap();
            w.iter_mut().for_each(|x| *x = dist.sample(rng));
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).unwrap();
            w.iter_mut().for_each(|x| *x = dist.sample(rng));
        }
    }
    w
}

/// Normal samples with std `std`, redrawn when outside two standard deviations.
pub fn truncated_normal<R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Vec<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    (0..len)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

fn rows_of(x: &Array4<f64>) -> ArrayView2<'_, f64> {
    let (n, h, w, c) = x.dim();
    x.view()
        .into_shape_with_order((n * h * w, c))
        .expect("activations are contiguous")
}

pub(crate) fn to_rows(x: Array4<f64>) -> Array2<f64> {
    let (n, h, w, c) = x.dim();
    x.into_shape_with_order((n * h * w, c))
        .expect("activations are contiguous")
}

pub(crate) fn from_rows(x: Array2<f64>, n: usize, h: usize, w: usize) -> Array4<f64> {
    let c = x.ncols();
    x.into_shape_with_order((n, h, w, c))
        .expect("activations are contiguous")
}

// ---------------------------------------------------------------- Linear

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug)]
pub struct LinearCache {
    input: Array2<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = init_matrix(&[in_dim, out_dim], in_dim, out_dim, init, rng);
        let weight = store.add(format!("{name}/weight"), w);
        let bias = store.add(format!("{name}/bias"), zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: Array2<f64>) -> (Array2<f64>, LinearCache) {
        let mut y = x.dot(&store.matrix(self.weight));
        let b = store.get(self.bias);
        let b = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y += &b;
        (y, LinearCache { input: x })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LinearCache,
        dy: &Array2<f64>,
        grads: &mut Grads,
        want_dx: bool,
    ) -> Option<Array2<f64>> {
        general_mat_mul(
            1.0,
            &cache.input.t(),
            dy,
            1.0,
            &mut grads.matrix_mut(self.weight),
        );
        let db = dy.sum_axis(Axis(0));
        for (g, d) in grads.vector_mut(self.bias).iter_mut().zip(db.iter()) {
            *g += d;
        }
        want_dx.then(|| dy.dot(&store.matrix(self.weight).t()))
    }
}

// ---------------------------------------------------------------- Conv2d

/// 2-D convolution on NHWC tensors. Weights are stored as
/// `[kernel, kernel, in, out]` so the im2col product is a single GEMM.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_ch;
        let fan_out = kernel * kernel * out_ch;
        let w = init_matrix(&[kernel, kernel, in_ch, out_ch], fan_in, fan_out, init, rng);
        let weight = store.add(format!("{name}/weight"), w);
        let bias = store.add(format!("{name}/bias"), zeros(&[out_ch]));
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, store: &ParamStore, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (n, h, w, c) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let (ho, wo) = self.output_hw(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.padding, ho, wo);
        let mut y = cols.dot(&store.matrix(self.weight));
        let b = store.get(self.bias);
        y += &b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let cache = ConvCache {
            cols,
            in_dim: (n, h, w, c),
            out_hw: (ho, wo),
        };
        (from_rows(y, n, ho, wo), cache)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvCache,
        dy: &Array4<f64>,
        grads: &mut Grads,
        want_dx: bool,
    ) -> Option<Array4<f64>> {
        let dy = rows_of(dy);
        general_mat_mul(
            1.0,
            &cache.cols.t(),
            &dy,
            1.0,
            &mut grads.matrix_mut(self.weight),
        );
        let db = dy.sum_axis(Axis(0));
        for (g, d) in grads.vector_mut(self.bias).iter_mut().zip(db.iter()) {
            *g += d;
        }
        if !want_dx {
            return None;
        }
        let dcols = dy.dot(&store.matrix(self.weight).t());
        Some(col2im(
            &dcols,
            cache.in_dim,
            self.kernel,
            self.stride,
            self.padding,
            cache.out_hw,
        ))
    }
}

fn im2col(
    x: &Array4<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (n, h, w, c) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    if k == 1 && stride == 1 && pad == 0 {
        return Array2::from_shape_vec((n * h * w, c), xs.to_vec()).unwrap();
    }
    let width = k * k * c;
    let mut cols = Array2::zeros((n * ho * wo, width));
    let cs = cols.as_slice_mut().unwrap();
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * width;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    (n, h, w, c): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Array4<f64> {
    let mut dx = Array4::zeros((n, h, w, c));
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().unwrap();
    if k == 1 && stride == 1 && pad == 0 {
        xs.copy_from_slice(ds);
        return dx;
    }
    let width = k * k * c;
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * width;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for (d, s) in xs[dst..dst + c].iter_mut().zip(&ds[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- GroupNorm

/// Group normalisation over (H, W, C/groups) per sample; independent of
/// batch statistics.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

#[derive(Debug)]
pub struct GroupNormCache {
    xhat: Array4<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{channels} channels into {groups} groups");
        let gamma = store.add(format!("{name}/gamma"), ndarray::ArrayD::ones(vec![channels]));
        let beta = store.add(format!("{name}/beta"), zeros(&[channels]));
        GroupNorm {
            gamma,
            beta,
            groups,
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array4<f64>) -> (Array4<f64>, GroupNormCache) {
        let (n, h, w, c) = x.dim();
        let cg = c / self.groups;
        let hw = h * w;
        let count = (hw * cg) as f64;
        let x = x.as_standard_layout();
        let xs = x.as_slice().unwrap();
        let gamma = store.vector(self.gamma);
        let beta = store.vector(self.beta);
        let mut xhat = Array4::zeros((n, h, w, c));
        let mut y = Array4::zeros((n, h, w, c));
        let mut inv_std = vec![0.0; n * self.groups];
        {
            let xh = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for b in 0..n {
                let base = b * hw * c;
                for g in 0..self.groups {
                    let mut mean = 0.0;
                    for p in 0..hw {
                        let o = base + p * c + g * cg;
                        mean += xs[o..o + cg].iter().sum::<f64>();
                    }
                    mean /= count;
                    let mut var = 0.0;
                    for p in 0..hw {
                        let o = base + p * c + g * cg;
                        var += xs[o..o + cg].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    var /= count;
                    let is = 1.0 / (var + self.eps).sqrt();
                    inv_std[b * self.groups + g] = is;
                    for p in 0..hw {
                        let o = base + p * c + g * cg;
                        for j in 0..cg {
                            let ch = g * cg + j;
                            let v = (xs[o + j] - mean) * is;
                            xh[o + j] = v;
                            ys[o + j] = gamma[ch] * v + beta[ch];
                        }
                    }
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &GroupNormCache,
        dy: &Array4<f64>,
        grads: &mut Grads,
    ) -> Array4<f64> {
        let (n, h, w, c) = dy.dim();
        let cg = c / self.groups;
        let hw = h * w;
        let count = (hw * cg) as f64;
        let gamma = store.vector(self.gamma);
        let dy = dy.as_standard_layout();
        let ds = dy.as_slice().unwrap();
        let xh = cache.xhat.as_slice().unwrap();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = Array4::zeros((n, h, w, c));
        let dxs = dx.as_slice_mut().unwrap();
        for b in 0..n {
            let base = b * hw * c;
            for g in 0..self.groups {
                let mut sum_dxh = 0.0;
                let mut sum_dxh_xh = 0.0;
                for p in 0..hw {
                    let o = base + p * c + g * cg;
                    for j in 0..cg {
                        let ch = g * cg + j;
                        let d = ds[o + j];
                        dgamma[ch] += d * xh[o + j];
                        dbeta[ch] += d;
                        let dxh = d * gamma[ch];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[o + j];
                    }
                }
                let mean_dxh = sum_dxh / count;
                let mean_dxh_xh = sum_dxh_xh / count;
                let is = cache.inv_std[b * self.groups + g];
                for p in 0..hw {
                    let o = base + p * c + g * cg;
                    for j in 0..cg {
                        let ch = g * cg + j;
                        let dxh = ds[o + j] * gamma[ch];
                        dxs[o + j] = is * (dxh - mean_dxh - xh[o + j] * mean_dxh_xh);
                    }
                }
            }
        }
        for (g, d) in grads.vector_mut(self.gamma).iter_mut().zip(&dgamma) {
            *g += d;
        }
        for (g, d) in grads.vector_mut(self.beta).iter_mut().zip(&dbeta) {
            *g += d;
        }
        dx
    }
}

// ---------------------------------------------------------------- LayerNorm

/// Layer normalisation over the last axis of a row matrix.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

#[derive(Debug)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}/gamma"), ndarray::ArrayD::ones(vec![dim]));
        let beta = store.add(format!("{name}/beta"), zeros(&[dim]));
        LayerNorm {
            gamma,
            beta,
            dim,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = self.dim as f64;
        let gamma = store.vector(self.gamma);
        let beta = store.vector(self.beta);
        let mut xhat = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(x.nrows());
        let mut y = Array2::zeros(x.raw_dim());
        for (r, row) in x.outer_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[r] = is;
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat[[r, j]] = xh;
                y[[r, j]] = gamma[j] * xh + beta[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerNormCache,
        dy: &Array2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let d = self.dim as f64;
        let gamma = store.vector(self.gamma);
        let mut dx = Array2::zeros(dy.raw_dim());
        let mut dgamma = vec![0.0; self.dim];
        let mut dbeta = vec![0.0; self.dim];
        for r in 0..dy.nrows() {
            let mut sum = 0.0;
            let mut sum_x = 0.0;
            for j in 0..self.dim {
                let g = dy[[r, j]];
                let xh = cache.xhat[[r, j]];
                dgamma[j] += g * xh;
                dbeta[j] += g;
                let dxh = g * gamma[j];
                sum += dxh;
                sum_x += dxh * xh;
            }
            let (m, mx) = (sum / d, sum_x / d);
            let is = cache.inv_std[r];
            for j in 0..self.dim {
                let dxh = dy[[r, j]] * gamma[j];
                dx[[r, j]] = is * (dxh - m - cache.xhat[[r, j]] * mx);
            }
        }
        for (g, d) in grads.vector_mut(self.gamma).iter_mut().zip(&dgamma) {
            *g += d;
        }
        for (g, d) in grads.vector_mut(self.beta).iter_mut().zip(&dbeta) {
            *g += d;
        }
        dx
    }
}

// ---------------------------------------------------------------- GELU

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU, `0.5·v·(1 + tanh(u))`, evaluated as `v·σ(2u)`.
pub fn gelu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    gelu_with_gate(x).0
}

/// GELU output together with the gate `σ(2u)`, which the backward pass reuses.
pub fn gelu_with_gate<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
) -> (ndarray::Array<f64, D>, ndarray::Array<f64, D>) {
    let gate = x.mapv(|v| 1.0 / (1.0 + (-2.0 * GELU_K * (v + GELU_C * v * v * v)).exp()));
    let mut y = gate.clone();
    ndarray::Zip::from(&mut y).and(x).for_each(|y, &v| *y *= v);
    (y, gate)
}

pub fn gelu_backward<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let (_, gate) = gelu_with_gate(x);
    gelu_backward_gated(x, &gate, dy)
}

pub fn gelu_backward_gated<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    gate: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).and(gate).for_each(|d, &v, &s| {
        let du = GELU_K * (1.0 + 3.0 * GELU_C * v * v);
        *d *= s + 2.0 * v * s * (1.0 - s) * du;
    });
    dx
}

// ---------------------------------------------------------------- Attention

/// Multi-head self-attention over `batch` sequences of `tokens` rows each.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug)]
pub struct AttentionCache {
    qkv_cache: LinearCache,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    proj_cache: LinearCache,
    batch: usize,
    tokens: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        let qkv = Linear::new(store, &format!("{name}/qkv"), dim, 3 * dim, Init::XavierUniform, rng);
        let proj = Linear::new(store, &format!("{name}/proj"), dim, dim, Init::XavierUniform, rng);
        Attention {
            qkv,
            proj,
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: Array2<f64>,
        batch: usize,
        tokens: usize,
    ) -> (Array2<f64>, AttentionCache) {
        let (qkv, qkv_cache) = self.qkv.forward(store, x);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Array2::zeros((batch * tokens, self.dim));
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let rows = b * tokens..(b + 1) * tokens;
            for h in 0..self.heads {
                let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), self.dim + h * dh..self.dim + (h + 1) * dh]);
                let v = qkv.slice(s![
                    rows.clone(),
                    2 * self.dim + h * dh..2 * self.dim + (h + 1) * dh
                ]);
                let mut p = q.dot(&k.t());
                p.mapv_inplace(|s| s * scale);
                softmax_rows_inplace(&mut p);
                ctx.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh])
                    .assign(&p.dot(&v));
                probs.push(p);
            }
        }
        let (y, proj_cache) = self.proj.forward(store, ctx);
        (
            y,
            AttentionCache {
                qkv_cache,
                qkv,
                probs,
                proj_cache,
                batch,
                tokens,
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &AttentionCache,
        dy: &Array2<f64>,
        grads: &mut Grads,
    ) -> Array2<f64> {
        let dctx = self
            .proj
            .backward(store, &cache.proj_cache, dy, grads, true)
            .unwrap();
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tokens = cache.tokens;
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for b in 0..cache.batch {
            let rows = b * tokens..(b + 1) * tokens;
            for h in 0..self.heads {
                let p = &cache.probs[b * self.heads + h];
                let qc = h * dh..(h + 1) * dh;
                let kc = self.dim + h * dh..self.dim + (h + 1) * dh;
                let vc = 2 * self.dim + h * dh..2 * self.dim + (h + 1) * dh;
                let q = cache.qkv.slice(s![rows.clone(), qc.clone()]);
                let k = cache.qkv.slice(s![rows.clone(), kc.clone()]);
                let v = cache.qkv.slice(s![rows.clone(), vc.clone()]);
                let dc = dctx.slice(s![rows.clone(), qc.clone()]);
                let dp = dc.dot(&v.t());
                let dv = p.t().dot(&dc);
                let mut ds = dp;
                for (mut ds_row, p_row) in ds.outer_iter_mut().zip(p.outer_iter()) {
                    let dot: f64 = ds_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
                    ds_row
                        .iter_mut()
                        .zip(p_row.iter())
                        .for_each(|(d, &pv)| *d = pv * (*d - dot) * scale);
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), qc]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), kc]).assign(&dk);
                dqkv.slice_mut(s![rows.clone(), vc]).assign(&dv);
            }
        }
        self.qkv
            .backward(store, &cache.qkv_cache, &dqkv, grads, true)
            .unwrap()
    }
}

/// Numerically stable softmax over each row, in place.
pub fn softmax_rows_inplace(x: &mut Array2<f64>) {
    for mut row in x.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
}

// ---------------------------------------------------------------- Bilinear

struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_lo: Vec<f64>,
    w_hi: Vec<f64>,
}

/// Half-pixel-centre sampling positions (`align_corners = false`).
fn taps(in_len: usize, out_len: usize) -> Taps {
    let scale = in_len as f64 / out_len as f64;
    let mut t = Taps {
        lo: Vec::with_capacity(out_len),
        hi: Vec::with_capacity(out_len),
        w_lo: Vec::with_capacity(out_len),
        w_hi: Vec::with_capacity(out_len),
    };
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        t.lo.push(lo);
        t.hi.push(hi);
        t.w_lo.push(1.0 - frac);
        t.w_hi.push(frac);
    }
    t
}

pub fn upsample_bilinear(x: &Array4<f64>, out_h: usize, out_w: usize) -> Array4<f64> {
    let (n, h, w, c) = x.dim();
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut y = Array4::zeros((n, out_h, out_w, c));
    let ys = y.as_slice_mut().unwrap();
    for b in 0..n {
        for oy in 0..out_h {
            let (r0, r1) = ((b * h + ty.lo[oy]) * w, (b * h + ty.hi[oy]) * w);
            let (a0, a1) = (ty.w_lo[oy], ty.w_hi[oy]);
            for ox in 0..out_w {
                let (c0, c1) = (tx.lo[ox], tx.hi[ox]);
                let (b0, b1) = (tx.w_lo[ox], tx.w_hi[ox]);
                let o = ((b * out_h + oy) * out_w + ox) * c;
                let p00 = (r0 + c0) * c;
                let p01 = (r0 + c1) * c;
                let p10 = (r1 + c0) * c;
                let p11 = (r1 + c1) * c;
                for j in 0..c {
                    ys[o + j] = a0 * (b0 * xs[p00 + j] + b1 * xs[p01 + j])
                        + a1 * (b0 * xs[p10 + j] + b1 * xs[p11 + j]);
                }
            }
        }
    }
    y
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_backward(dy: &Array4<f64>, in_h: usize, in_w: usize) -> Array4<f64> {
    let (n, out_h, out_w, c) = dy.dim();
    let ty = taps(in_h, out_h);
    let tx = taps(in_w, out_w);
    let dy = dy.as_standard_layout();
    let ds = dy.as_slice().unwrap();
    let mut dx = Array4::zeros((n, in_h, in_w, c));
    let xs = dx.as_slice_mut().unwrap();
    for b in 0..n {
        for oy in 0..out_h {
            let (r0, r1) = ((b * in_h + ty.lo[oy]) * in_w, (b * in_h + ty.hi[oy]) * in_w);
            let (a0, a1) = (ty.w_lo[oy], ty.w_hi[oy]);
            for ox in 0..out_w {
                let (c0, c1) = (tx.lo[ox], tx.hi[ox]);
                let (b0, b1) = (tx.w_lo[ox], tx.w_hi[ox]);
                let o = ((b * out_h + oy) * out_w + ox) * c;
                let p00 = (r0 + c0) * c;
                let p01 = (r0 + c1) * c;
                let p10 = (r1 + c0) * c;
                let p11 = (r1 + c1) * c;
                for j in 0..c {
                    let g = ds[o + j];
                    xs[p00 + j] += a0 * b0 * g;
                    xs[p01 + j] += a0 * b1 * g;
                    xs[p10 + j] += a1 * b0 * g;
                    xs[p11 + j] += a1 * b1 * g;
                }
            }
        }
    }
    dx
}
