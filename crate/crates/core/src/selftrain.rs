//! Mean-teacher self-training: EMA teacher, pseudo-labels, the quality
//! estimate `q` and per-pixel mixing weights.

use crate::error::Result;
use crate::nn::ParamStore;
use crate::segmodel::SegModel;
use ndarray::{Array2, Array4, ArrayView3, Zip};

/// EMA copy of the student's parameters.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub params: ParamStore,
    pub alpha: f64,
}

impl TeacherState {
    /// Starts as an exact copy of the student.
    pub fn from_student(student: &ParamStore, alpha: f64) -> Self {
        TeacherState {
            params: student.clone(),
            alpha,
        }
    }

    pub fn update(&mut self, student: &ParamStore) -> Result<()> {
        ema_update(&mut self.params, student, self.alpha)
    }
}

/// `teacher ← α·teacher + (1 − α)·student`, elementwise.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    teacher.check_layout(student)?;
    let ids: Vec<_> = teacher.ids().collect();
    for id in ids {
        Zip::from(teacher.get_mut(id))
            .and(student.get(id))
            .for_each(|t, &s| *t = alpha * *t + (1.0 - alpha) * s);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub labels: Array2<u8>,
    /// Maximum softmax probability per pixel.
    pub confidence: Array2<f64>,
    /// Fraction of pixels whose confidence strictly exceeds `tau`.
    pub quality: f64,
}

/// Pseudo-labels from one image's logits `(H, W, C)`.
pub fn pseudo_label_from_logits(logits: ArrayView3<'_, f64>, tau: f64) -> PseudoLabel {
    let (h, w, _) = logits.dim();
    let mut labels = Array2::zeros((h, w));
    let mut confidence = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let row = logits.slice(ndarray::s![y, x, ..]);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            let max = row[best];
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            labels[[y, x]] = best as u8;
            confidence[[y, x]] = 1.0 / sum;
        }
    }
    let quality = quality(&confidence, tau);
    PseudoLabel {
        labels,
        confidence,
        quality,
    }
}

/// `#{conf > tau} / (H·W)`.
pub fn quality(confidence: &Array2<f64>, tau: f64) -> f64 {
    let above = confidence.iter().filter(|&&c| c > tau).count();
    above as f64 / confidence.len() as f64
}

/// Runs the teacher (no caches, no gradients) on a target batch.
pub fn pseudo_label(
    model: &SegModel,
    teacher: &ParamStore,
    x_t: &Array4<f64>,
    tau: f64,
) -> Result<Vec<PseudoLabel>> {
    let logits = model.forward(teacher, x_t)?;
    Ok(logits
        .outer_iter()
        .map(|l| pseudo_label_from_logits(l, tau))
        .collect())
}

/// `w = 1` on source pixels and `q` on target pixels.
pub fn pixel_weights(mask: &Array2<bool>, q: f64) -> Array2<f64> {
    mask.mapv(|m| if m { 1.0 } else { q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::zeros;
    use ndarray::{arr2, Array3};

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", zeros(&[1]));
        s.get_mut(id)[[0]] = v;
        s
    }

    #[test]
    fn ema_extremes_and_midpoint() {
        let student = scalar_store(4.0);
        let mut t = scalar_store(2.0);
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t.vector(crate::nn::ParamId(0))[0], 4.0);
        let mut t = scalar_store(2.0);
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t.vector(crate::nn::ParamId(0))[0], 2.0);
        let mut t = scalar_store(2.0);
        ema_update(&mut t, &student, 0.5).unwrap();
        assert_eq!(t.vector(crate::nn::ParamId(0))[0], 3.0);
    }

    #[test]
    fn ema_rejects_mismatched_layout() {
        let mut t = scalar_store(0.0);
        let mut other = ParamStore::new();
        other.add("q", zeros(&[1]));
        assert!(ema_update(&mut t, &other, 0.9).is_err());
    }

    #[test]
    fn ema_contracts_toward_student() {
        let mut student = ParamStore::new();
        let id = student.add("w", zeros(&[5]));
        student.get_mut(id).iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 - 2.0);
        let mut teacher = ParamStore::new();
        teacher.add("w", zeros(&[5]));
        teacher.get_mut(id).iter_mut().enumerate().for_each(|(i, v)| *v = (i * i) as f64);
        let dist = |t: &ParamStore| -> f64 {
            t.vector(id).iter().zip(student.vector(id)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let before = dist(&teacher);
        ema_update(&mut teacher, &student, 0.9).unwrap();
        assert!((dist(&teacher) - 0.9 * before).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_have_zero_quality() {
        let logits = Array3::zeros((4, 4, 6));
        let p = pseudo_label_from_logits(logits.view(), 0.968);
        assert_eq!(p.quality, 0.0);
        assert!(p.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn saturated_logits_have_full_quality() {
        let logits = Array3::from_shape_fn((4, 4, 6), |(y, x, c)| if c == (y + x) % 6 { 20.0 } else { 0.0 });
        let p = pseudo_label_from_logits(logits.view(), 0.968);
        assert_eq!(p.quality, 1.0);
        assert_eq!(p.labels[[1, 2]], 3);
    }

    #[test]
    fn quality_counts_strict_exceedances() {
        let conf = arr2(&[[0.99, 0.95], [0.97, 0.50]]);
        assert_eq!(quality(&conf, 0.968), 0.5);
        assert_eq!(quality(&arr2(&[[0.968]]), 0.968), 0.0);
    }

    #[test]
    fn ties_break_to_lowest_class() {
        let mut logits = Array3::zeros((1, 1, 4));
        logits[[0, 0, 1]] = 2.0;
        logits[[0, 0, 3]] = 2.0;
        assert_eq!(pseudo_label_from_logits(logits.view(), 0.5).labels[[0, 0]], 1);
    }

    #[test]
    fn weights_follow_mask() {
        assert!(pixel_weights(&Array2::from_elem((2, 2), true), 0.2).iter().all(|&w| w == 1.0));
        assert!(pixel_weights(&Array2::from_elem((2, 2), false), 0.3).iter().all(|&w| w == 0.3));
        assert_eq!(pixel_weights(&arr2(&[[true, false]]), 0.5), arr2(&[[1.0, 0.5]]));
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn repeated_ema_matches_geometric_form(
            p in -5.0f64..5.0,
            p0 in -5.0f64..5.0,
            alpha in 0.0f64..=1.0,
            n in 0u32..200,
        ) {
            let student = scalar_store(p);
            let mut teacher = scalar_store(p0);
            for _ in 0..n {
                ema_update(&mut teacher, &student, alpha).unwrap();
            }
            let got = teacher.vector(teacher.ids().next().unwrap())[0];
            let want = p + alpha.powi(n as i32) * (p0 - p);
            prop_assert!((got - want).abs() <= 1e-10, "{} vs {}", got, want);
        }
    }
}
