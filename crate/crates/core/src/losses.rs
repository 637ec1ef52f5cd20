//! Training objectives: supervised and mixed cross-entropy, the guidance
//! loss with its adaptive factor, and the combined objective.

use crate::data_synth::IGNORE;
use crate::error::{Error, Result};
use crate::selftrain::PseudoLabel;
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

/// How the guidance loss weights target pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMode {
    /// The image-level quality `q` applied to every pixel.
    Scalar,
    /// `1[confidence > tau]` per pixel.
    PerPixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_gt: f64,
    pub d: f64,
    pub tau: f64,
    pub ignore_index: u8,
    /// When false the adaptive factor is fixed at 1.
    pub uncertainty: bool,
    pub quality_mode: QualityMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_gt: 1.0,
            d: 5.0,
            tau: 0.968,
            ignore_index: IGNORE,
            uncertainty: true,
            quality_mode: QualityMode::Scalar,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gt >= 0.0) || !(self.d >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_gt ({}) and d ({}) must be >= 0",
                self.lambda_gt, self.d
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} not in [0,1]", self.tau)));
        }
        Ok(())
    }
}

/// Scalar loss with its gradient w.r.t. the logits.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Array4<f64>,
}

/// Weighted per-pixel cross-entropy averaged over non-IGNORE pixels.
///
/// Logits are `(N, H, W, C)`, labels `(N, H, W)`. IGNORE pixels are left
/// out of both the sum and the pixel count.
pub fn ce_loss(
    logits: &Array4<f64>,
    labels: &Array3<u8>,
    weights: Option<&Array3<f64>>,
    ignore_index: u8,
) -> Result<LossOutput> {
    let (n, h, w, c) = logits.dim();
    if labels.dim() != (n, h, w) || weights.is_some_and(|wt| wt.dim() != (n, h, w)) {
        return Err(Error::Shape(format!(
            "logits {:?}, labels {:?}, weights {:?}",
            logits.dim(),
            labels.dim(),
            weights.map(|w| w.dim())
        )));
    }
    let valid = labels.iter().filter(|&&l| l != ignore_index).count();
    if valid == 0 {
        return Err(Error::AllIgnored);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != ignore_index && l as usize >= c) {
        return Err(Error::LabelRange {
            value: bad,
            num_classes: c,
        });
    }
    let norm = 1.0 / valid as f64;
    let logits = logits.as_standard_layout();
    let ls = logits.as_slice().unwrap();
    let mut grad = Array4::zeros((n, h, w, c));
    let gs = grad.as_slice_mut().unwrap();
    let mut total = 0.0;
    for (p, (&label, wt)) in labels
        .iter()
        .zip(weights.into_iter().flat_map(|w| w.iter().map(Some)).chain(std::iter::repeat(None)))
        .enumerate()
    {
        if label == ignore_index {
            continue;
        }
        let wt = wt.copied().unwrap_or(1.0);
        let row = &ls[p * c..(p + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += wt * (lse - row[label as usize]);
        let g = &mut gs[p * c..(p + 1) * c];
        for (k, (gv, &v)) in g.iter_mut().zip(row).enumerate() {
            let prob = (v - lse).exp();
            let target = if k == label as usize { 1.0 } else { 0.0 };
            *gv = wt * norm * (prob - target);
        }
    }
    Ok(LossOutput {
        loss: total * norm,
        grad,
    })
}

/// Adaptive factor `1 - exp(-d·r)`.
pub fn beta(r: f64, d: f64) -> f64 {
    1.0 - (-d * r).exp()
}

/// Per-pixel guidance weights `β_n · q_n` (or `β_n · 1[conf > τ]`).
pub fn guidance_weights(pseudo: &[PseudoLabel], ratios: &[f64], cfg: &LossConfig) -> Result<Array3<f64>> {
    if pseudo.len() != ratios.len() || pseudo.is_empty() {
        return Err(Error::Shape(format!(
            "{} pseudo-labels vs {} ratios",
            pseudo.len(),
            ratios.len()
        )));
    }
    let (h, w) = pseudo[0].labels.dim();
    let mut out = Array3::zeros((pseudo.len(), h, w));
    for (b, (p, &r)) in pseudo.iter().zip(ratios).enumerate() {
        if p.labels.dim() != (h, w) {
            return Err(Error::Shape("pseudo-labels differ in size".into()));
        }
        let bt = if cfg.uncertainty { beta(r, cfg.d) } else { 1.0 };
        let mut slot = out.index_axis_mut(ndarray::Axis(0), b);
        match cfg.quality_mode {
            QualityMode::Scalar => slot.fill(bt * p.quality),
            QualityMode::PerPixel => slot.zip_mut_with(&p.confidence, |o, &c| {
                *o = if c > cfg.tau { bt } else { 0.0 };
            }),
        }
    }
    Ok(out)
}

/// Guidance loss: cross-entropy of the guided prediction against the
/// teacher's pseudo-labels of the unmixed target images, scaled by β and
/// the quality weight and averaged over all pixels.
pub fn guidance_loss(
    logits_guided: &Array4<f64>,
    pseudo: &[PseudoLabel],
    ratios: &[f64],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let weights = guidance_weights(pseudo, ratios, cfg)?;
    let labels = stack_labels(pseudo.iter().map(|p| &p.labels));
    if labels.dim() != weights.dim() {
        return Err(Error::Shape("pseudo-label stack".into()));
    }
    ce_loss(logits_guided, &labels, Some(&weights), cfg.ignore_index)
}

pub fn stack_labels<'a>(labels: impl IntoIterator<Item = &'a ndarray::Array2<u8>>) -> Array3<u8> {
    let views: Vec<_> = labels.into_iter().map(|l| l.view()).collect();
    ndarray::stack(ndarray::Axis(0), &views).expect("label maps share a shape")
}

/// Per-step loss summary. `q`, `r` and `beta` are batch means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_mix: f64,
    pub l_gt: f64,
    pub q: f64,
    pub r: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,L_sup,L_mix,L_gt,q,r,beta,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.l_sup, self.l_mix, self.l_gt, self.q, self.r, self.beta, self.total
        )
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "L_sup={:.4} L_mix={:.4} L_gt={:.4} q={:.3} r={:.3} beta={:.3} total={:.4}",
            self.l_sup, self.l_mix, self.l_gt, self.q, self.r, self.beta, self.total
        )
    }
}

/// Combines the components as `L_sup + L_mix + λ_gt·L_gt`.
pub fn total_loss(l_sup: f64, l_mix: f64, l_gt: f64, q: f64, r: f64, beta: f64, cfg: &LossConfig) -> Result<LossBreakdown> {
    for (component, value) in [("L_sup", l_sup), ("L_mix", l_mix), ("L_gt", l_gt)] {
        if !value.is_finite() {
            return Err(Error::NonFinite { component, value });
        }
    }
    Ok(LossBreakdown {
        l_sup,
        l_mix,
        l_gt,
        q,
        r,
        beta,
        total: l_sup + l_mix + cfg.lambda_gt * l_gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn pseudo(h: usize, w: usize, q: f64, conf: f64) -> PseudoLabel {
        PseudoLabel {
            labels: Array2::zeros((h, w)),
            confidence: Array2::from_elem((h, w), conf),
            quality: q,
        }
    }

    #[test]
    fn saturated_prediction_has_vanishing_loss() {
        let labels = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| ((y + x) % 6) as u8);
        let logits = Array4::from_shape_fn((1, 4, 4, 6), |(_, y, x, c)| if c == (y + x) % 6 { 100.0 } else { 0.0 });
        assert!(ce_loss(&logits, &labels, None, IGNORE).unwrap().loss < 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Array4::zeros((2, 4, 4, 6));
        let labels = Array3::from_elem((2, 4, 4), 3u8);
        let l = ce_loss(&logits, &labels, None, IGNORE).unwrap().loss;
        assert!((l - 6f64.ln()).abs() < 1e-15);
        assert!((l - 1.791_759_469_228_055).abs() < 1e-12);
    }

    #[test]
    fn ignore_pixels_drop_out_of_mean() {
        let mut logits = Array4::zeros((1, 1, 2, 3));
        logits[[0, 0, 1, 0]] = 50.0;
        let labels = ndarray::arr3(&[[[0u8, IGNORE]]]);
        let out = ce_loss(&logits, &labels, None, IGNORE).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-15);
        assert!(out.grad.slice(ndarray::s![0, 0, 1, ..]).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn all_ignore_is_an_error() {
        let logits = Array4::zeros((1, 2, 2, 3));
        let labels = Array3::from_elem((1, 2, 2), IGNORE);
        assert!(matches!(ce_loss(&logits, &labels, None, IGNORE), Err(Error::AllIgnored)));
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let logits = Array4::zeros((1, 2, 2, 3));
        let labels = Array3::from_elem((1, 2, 2), 3u8);
        assert!(ce_loss(&logits, &labels, None, IGNORE).is_err());
    }

    #[test]
    fn beta_closed_form() {
        assert_eq!(beta(0.0, 5.0), 0.0);
        assert_eq!(beta(0.7, 0.0), 0.0);
        assert!((beta(0.5, 5.0) - 0.917_915_001_376_101).abs() < 1e-12);
    }

    #[test]
    fn guidance_loss_vanishes_without_ratio_or_quality() {
        let cfg = LossConfig::default();
        let logits = Array4::from_shape_fn((1, 4, 4, 6), |(_, y, x, c)| ((y * 7 + x * 3 + c) % 5) as f64);
        let l = guidance_loss(&logits, &[pseudo(4, 4, 0.8, 0.99)], &[0.0], &cfg).unwrap();
        assert_eq!(l.loss, 0.0);
        let l = guidance_loss(&logits, &[pseudo(4, 4, 0.0, 0.99)], &[0.6], &cfg).unwrap();
        assert_eq!(l.loss, 0.0);
    }

    #[test]
    fn guidance_loss_closed_form() {
        let cfg = LossConfig::default();
        let logits = Array4::zeros((1, 4, 4, 6));
        let l = guidance_loss(&logits, &[pseudo(4, 4, 1.0, 0.99)], &[1.0], &cfg).unwrap();
        assert!((l.loss - (1.0 - (-5f64).exp()) * 6f64.ln()).abs() < 1e-12);
        assert!((l.loss - 1.779_686_688_889_287).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_off_only_rescales() {
        let on = LossConfig::default();
        let off = LossConfig {
            uncertainty: false,
            ..on.clone()
        };
        let logits = Array4::from_shape_fn((1, 4, 4, 6), |(_, y, x, c)| ((y + 2 * x + c) % 4) as f64 * 0.3);
        let p = [pseudo(4, 4, 0.5, 0.99)];
        let a = guidance_loss(&logits, &p, &[0.3], &on).unwrap().loss;
        let b = guidance_loss(&logits, &p, &[0.3], &off).unwrap().loss;
        assert!((a - beta(0.3, 5.0) * b).abs() < 1e-14);
    }

    #[test]
    fn per_pixel_quality_mode_uses_threshold() {
        let cfg = LossConfig {
            quality_mode: QualityMode::PerPixel,
            uncertainty: false,
            ..LossConfig::default()
        };
        let mut p = pseudo(1, 2, 0.123, 0.5);
        p.confidence[[0, 1]] = 0.99;
        let w = guidance_weights(&[p], &[0.5], &cfg).unwrap();
        assert_eq!(w.as_slice().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn total_loss_composition() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.0, 0.0, 0.0, &cfg).unwrap().total, 6.0);
        let base = LossConfig {
            lambda_gt: 0.0,
            ..cfg.clone()
        };
        assert_eq!(total_loss(1.5, 2.5, 7.0, 0.0, 0.0, 0.0, &base).unwrap().total, 4.0);
        match total_loss(1.0, 2.0, f64::NAN, 0.0, 0.0, 0.0, &cfg) {
            Err(Error::NonFinite { component, .. }) => assert_eq!(component, "L_gt"),
            other => panic!("{other:?}"),
        }
    }

    /// Cross-entropy written out per pixel with no shared arithmetic.
    fn oracle_ce(logits: &Array4<f64>, labels: &Array3<u8>, weights: &Array3<f64>) -> f64 {
        let (n, h, w, c) = logits.dim();
        let (mut total, mut count) = (0.0, 0usize);
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let l = labels[[i, y, x]];
                    if l == IGNORE {
                        continue;
                    }
                    let denom: f64 = (0..c).map(|k| logits[[i, y, x, k]].exp()).sum();
                    let p = logits[[i, y, x, l as usize]].exp() / denom;
                    total += -weights[[i, y, x]] * p.ln();
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ce_matches_pixelwise_oracle(
            vals in proptest::collection::vec(-4.0f64..4.0, 48),
            labs in proptest::collection::vec(prop_oneof![4 => 0u8..3, 1 => Just(IGNORE)], 16),
            wts in proptest::collection::vec(0.0f64..1.0, 16),
        ) {
            prop_assume!(labs.iter().any(|&l| l != IGNORE));
            let logits = Array4::from_shape_vec((1, 4, 4, 3), vals).unwrap();
            let labels = Array3::from_shape_vec((1, 4, 4), labs).unwrap();
            let weights = Array3::from_shape_vec((1, 4, 4), wts).unwrap();
            let got = ce_loss(&logits, &labels, Some(&weights), IGNORE).unwrap().loss;
            let want = oracle_ce(&logits, &labels, &weights);
            prop_assert!((got - want).abs() <= 1e-10, "{} vs {}", got, want);
        }

        #[test]
        fn beta_is_bounded_and_monotone(r1 in 0.0f64..=1.0, r2 in 0.0f64..=1.0, d in 0.01f64..20.0) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            prop_assert!(beta(lo, d) <= beta(hi, d));
            prop_assert!((0.0..1.0).contains(&beta(hi, d)));
            prop_assert_eq!(beta(0.0, d), 0.0);
        }
    }
}
