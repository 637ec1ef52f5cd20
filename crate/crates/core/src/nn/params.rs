//! Named parameter storage shared by the segmentation model, its EMA
//! teacher and the guider.
//!
//! Architectures only hold [`ParamId`]s; the values live in a
//! [`ParamStore`]. Two stores built by the same architecture have identical
//! layouts, which is what lets a teacher run the student's forward pass on
//! its own weights.

use crate::error::{Error, Result};
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique within a store.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Two-dimensional view of a parameter, flattening all leading axes.
    pub fn matrix(&self, id: ParamId) -> ArrayView2<'_, f64> {
        as_matrix(&self.values[id.0])
    }

    pub fn matrix_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let v = &mut self.values[id.0];
        let cols = *v.shape().last().unwrap_or(&1);
        let rows = v.len() / cols.max(1);
        v.view_mut()
            .into_shape_with_order((rows, cols))
            .expect("parameters are contiguous")
    }

    pub fn vector(&self, id: ParamId) -> &[f64] {
        self.values[id.0]
            .as_slice()
            .expect("parameters are contiguous")
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            values: self
                .values
                .iter()
                .map(|v| ArrayD::zeros(v.raw_dim()))
                .collect(),
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names.len() != other.names.len() {
            return Err(Error::Param(format!(
                "{} parameters vs {}",
                self.names.len(),
                other.names.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            if *name != other.names[i] {
                return Err(Error::Param(format!(
                    "name {name} vs {}",
                    other.names[i]
                )));
            }
            if self.values[i].shape() != other.values[i].shape() {
                return Err(Error::Param(format!(
                    "{name}: shape {:?} vs {:?}",
                    self.values[i].shape(),
                    other.values[i].shape()
                )));
            }
        }
        Ok(())
    }

    /// Copies every value from `other`, which must share this layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.assign(src);
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and the raw bits of every value.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.write(name.as_bytes());
            for &d in v.shape() {
                h.write(&(d as u64).to_le_bytes());
            }
            for x in v.iter() {
                h.write(&x.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn as_matrix(v: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    let cols = *v.shape().last().unwrap_or(&1);
    let rows = v.len() / cols.max(1);
    v.view()
        .into_shape_with_order((rows, cols))
        .expect("parameters are contiguous")
}

/// Gradient accumulators mirroring a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    values: Vec<ArrayD<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn matrix_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, f64> {
        let v = &mut self.values[id.0];
        let cols = *v.shape().last().unwrap_or(&1);
        let rows = v.len() / cols.max(1);
        v.view_mut()
            .into_shape_with_order((rows, cols))
            .expect("gradients are contiguous")
    }

    pub fn vector_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.values[id.0]
            .as_slice_mut()
            .expect("gradients are contiguous")
    }

    pub fn zero(&mut self) {
        for v in &mut self.values {
            v.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn sum_abs(&self, id: ParamId) -> f64 {
        self.values[id.0].iter().map(|x| x.abs()).sum()
    }
}

pub(crate) fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_mismatch_is_reported() {
        let mut a = ParamStore::new();
        a.add("w", zeros(&[2, 3]));
        let mut b = ParamStore::new();
        b.add("w", zeros(&[3, 2]));
        assert!(a.check_layout(&b).is_err());
        let mut c = ParamStore::new();
        c.add("v", zeros(&[2, 3]));
        assert!(a.check_layout(&c).is_err());
    }

    #[test]
    fn checksum_tracks_bits() {
        let mut a = ParamStore::new();
        let id = a.add("w", zeros(&[4]));
        let before = a.checksum();
        a.get_mut(id)[[2]] = 1e-300;
        assert_ne!(before, a.checksum());
        a.get_mut(id)[[2]] = 0.0;
        assert_eq!(before, a.checksum());
    }
}
