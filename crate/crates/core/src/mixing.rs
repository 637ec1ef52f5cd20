//! ClassMix cross-domain mixing.
//!
//! Half of the classes present in a source label map (rounded up) are
//! pasted, pixels and labels, onto a target image whose remaining pixels
//! keep the teacher's pseudo-labels.

use crate::data_synth::IGNORE;
use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Zip};
use rand::seq::index::sample;
use rand::Rng;

/// Binary paste mask (`true` = source pixel) and the classes that built it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMask {
    pub mask: Array2<bool>,
    pub classes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMixBatch {
    pub image: Array3<f64>,
    pub labels: Array2<u8>,
    pub mask: ClassMask,
    /// Mask downsampled to feature resolution.
    pub mask_scale: Array2<bool>,
    /// Fraction of source pixels in the mixed image.
    pub source_ratio: f64,
}

/// Sorted distinct non-IGNORE classes of a label map.
pub fn present_classes(labels: &Array2<u8>) -> Vec<u8> {
    let mut seen = [false; 256];
    for &l in labels {
        seen[l as usize] = true;
    }
    (0..=255u8)
        .filter(|&c| c != IGNORE && seen[c as usize])
        .collect()
}

/// Uniformly samples `ceil(K/2)` of the `K` classes present in `labels`.
pub fn sample_classes<R: Rng + ?Sized>(labels: &Array2<u8>, rng: &mut R) -> Result<Vec<u8>> {
    let present = present_classes(labels);
    if present.is_empty() {
        return Err(Error::NoValidClasses);
    }
    let k = present.len().div_ceil(2);
    let mut chosen: Vec<u8> = sample(rng, present.len(), k)
        .into_iter()
        .map(|i| present[i])
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn build_mask(labels: &Array2<u8>, classes: &[u8]) -> ClassMask {
    let mut member = [false; 256];
    for &c in classes {
        member[c as usize] = true;
    }
    member[IGNORE as usize] = false;
    ClassMask {
        mask: labels.mapv(|l| member[l as usize]),
        classes: classes.to_vec(),
    }
}

pub fn source_ratio(mask: &Array2<bool>) -> f64 {
    let ones = mask.iter().filter(|&&m| m).count();
    ones as f64 / mask.len() as f64
}

/// Block-majority downsampling: a block is source only when strictly more
/// than half of its pixels are; exact ties go to the target.
pub fn downsample_mask(mask: &Array2<bool>, stride: usize) -> Result<Array2<bool>> {
    let (h, w) = mask.dim();
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::Shape(format!(
            "mask {h}x{w} not divisible by stride {stride}"
        )));
    }
    let block = stride * stride;
    Ok(Array2::from_shape_fn((h / stride, w / stride), |(u, v)| {
        let count = mask
            .slice(ndarray::s![u * stride..(u + 1) * stride, v * stride..(v + 1) * stride])
            .iter()
            .filter(|&&m| m)
            .count();
        2 * count > block
    }))
}

/// Pastes the masked source pixels and labels over the target.
pub fn mix(
    x_s: &Array3<f64>,
    y_s: &Array2<u8>,
    x_t: &Array3<f64>,
    y_t_pseudo: &Array2<u8>,
    mask: ClassMask,
    stride: usize,
) -> Result<ClassMixBatch> {
    let (h, w, c) = x_s.dim();
    if x_t.dim() != (h, w, c)
        || y_s.dim() != (h, w)
        || y_t_pseudo.dim() != (h, w)
        || mask.mask.dim() != (h, w)
    {
        return Err(Error::Shape(format!(
            "mix inputs: x_s {:?}, y_s {:?}, x_t {:?}, y_t {:?}, mask {:?}",
            x_s.dim(),
            y_s.dim(),
            x_t.dim(),
            y_t_pseudo.dim(),
            mask.mask.dim()
        )));
    }
    let mut image = x_t.clone();
    for ((y, x, ch), v) in image.indexed_iter_mut() {
        if mask.mask[[y, x]] {
            *v = x_s[[y, x, ch]];
        }
    }
    let mut labels = y_t_pseudo.clone();
    Zip::from(&mut labels)
        .and(y_s)
        .and(&mask.mask)
        .for_each(|l, &s, &m| {
            if m {
                *l = s;
            }
        });
    let mask_scale = downsample_mask(&mask.mask, stride)?;
    let source_ratio = source_ratio(&mask.mask);
    Ok(ClassMixBatch {
        image,
        labels,
        mask,
        mask_scale,
        source_ratio,
    })
}

/// Samples classes from `y_s`, builds the mask and mixes in one call.
pub fn class_mix<R: Rng + ?Sized>(
    x_s: &Array3<f64>,
    y_s: &Array2<u8>,
    x_t: &Array3<f64>,
    y_t_pseudo: &Array2<u8>,
    stride: usize,
    rng: &mut R,
) -> Result<ClassMixBatch> {
    let classes = sample_classes(y_s, rng)?;
    let mask = build_mask(y_s, &classes);
    mix(x_s, y_s, x_t, y_t_pseudo, mask, stride)
}
