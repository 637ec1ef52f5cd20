//! Confusion-matrix segmentation metrics and colour-mapped prediction dumps.

use crate::data_synth::{pixels_to_rgb8, save_png, Dataset, LabeledImage, IGNORE};
use crate::error::{Error, Result};
use crate::guider::Guider;
use crate::mixing;
use crate::nn::ParamStore;
use crate::segmodel::{argmax_classes, stack_images, SegModel};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-class and mean intersection-over-union. `per_class_iou[c]` is
/// `None` for classes absent from both prediction and truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<u64>>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
}

impl IoUReport {
    pub fn new(num_classes: usize) -> Self {
        IoUReport {
            confusion: vec![vec![0; num_classes]; num_classes],
            per_class_iou: vec![None; num_classes],
            miou: 0.0,
            class_names: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.confusion.len()
    }

    /// Adds one prediction/truth pair; IGNORE truth pixels are skipped.
    pub fn accumulate(&mut self, prediction: &Array2<u8>, truth: &Array2<u8>) -> Result<()> {
        if prediction.dim() != truth.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs truth {:?}",
                prediction.dim(),
                truth.dim()
            )));
        }
        let c = self.num_classes();
        for (&p, &t) in prediction.iter().zip(truth) {
            if t == IGNORE {
                continue;
            }
            for v in [t, p] {
                if v as usize >= c {
                    return Err(Error::LabelRange {
                        value: v,
                        num_classes: c,
                    });
                }
            }
        }
        for (&p, &t) in prediction.iter().zip(truth) {
            if t != IGNORE {
                self.confusion[t as usize][p as usize] += 1;
            }
        }
        self.refresh();
        Ok(())
    }

    /// Adds another report's counts.
    pub fn merge(&mut self, other: &IoUReport) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Shape("reports differ in class count".into()));
        }
        for (row, o) in self.confusion.iter_mut().zip(&other.confusion) {
            for (a, b) in row.iter_mut().zip(o) {
                *a += b;
            }
        }
        self.refresh();
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    fn refresh(&mut self) {
        let c = self.num_classes();
        let mut sum = 0.0;
        let mut defined = 0;
        for k in 0..c {
            let tp = self.confusion[k][k];
            let fn_: u64 = self.confusion[k].iter().sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|t| self.confusion[t][k]).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            self.per_class_iou[k] = if denom == 0 {
                None
            } else {
                let iou = tp as f64 / denom as f64;
                sum += iou;
                defined += 1;
                Some(iou)
            };
        }
        self.miou = if defined == 0 { 0.0 } else { sum / defined as f64 };
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Predicts every image of `dataset` in batches and accumulates a report.
pub fn evaluate(model: &SegModel, params: &ParamStore, dataset: &[LabeledImage], batch_size: usize) -> Result<IoUReport> {
    let mut report = IoUReport::new(model.num_classes());
    for chunk in dataset.chunks(batch_size.max(1)) {
        let x = stack_images(chunk.iter().map(|i| &i.pixels));
        let pred = model.predict(params, &x)?;
        for (p, img) in pred.outer_iter().zip(chunk) {
            report.accumulate(&p.to_owned(), &img.labels)?;
        }
    }
    Ok(report)
}

/// Fixed class colours; IGNORE is white.
pub const PALETTE: [[u8; 3]; 6] = [
    [60, 60, 60],
    [70, 130, 180],
    [128, 64, 128],
    [220, 20, 60],
    [250, 170, 30],
    [107, 142, 35],
];

pub fn class_color(class: u8) -> [u8; 3] {
    if class == IGNORE {
        [255, 255, 255]
    } else {
        PALETTE[class as usize % PALETTE.len()]
    }
}

pub fn colorize(labels: &Array2<u8>) -> image::RgbImage {
    let (h, w) = labels.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb(class_color(labels[[y as usize, x as usize]])))
}

pub fn mask_image(mask: &Array2<bool>) -> image::RgbImage {
    let (h, w) = mask.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = if mask[[y as usize, x as usize]] { 255 } else { 0 };
        image::Rgb([v, v, v])
    })
}

/// Places panels left to right with a 2-pixel white gutter.
pub fn side_by_side(panels: &[image::RgbImage]) -> image::RgbImage {
    let gap = 2;
    let h = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let w = panels.iter().map(|p| p.width()).sum::<u32>() + gap * panels.len().saturating_sub(1) as u32;
    let mut out = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width() + gap;
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DumpSummary {
    pub prediction_panels: usize,
    pub guider_panels: usize,
    /// Set when guider panels were requested but could not be produced.
    pub notice: Option<String>,
}

#[derive(Serialize)]
struct PaletteMeta<'a> {
    classes: Vec<PaletteEntry<'a>>,
    ignore: [u8; 3],
    prediction_panel: &'a str,
    guider_panel: &'a str,
}

#[derive(Serialize)]
struct PaletteEntry<'a> {
    id: usize,
    name: &'a str,
    rgb: [u8; 3],
}

/// Writes one `image | truth | prediction` panel per image. With a guider,
/// each image is also mixed with the next image of the set (which plays
/// the labelled source, the model's own prediction standing in for the
/// target pseudo-label) and a `mixed | D(E(x_m)) | D(G(E(x_m), M)) | truth`
/// panel is written.
pub fn dump_predictions(
    model: &SegModel,
    params: &ParamStore,
    guider: Option<(&Guider, &ParamStore)>,
    dataset: &Dataset,
    out_dir: &Path,
    seed: u64,
) -> Result<DumpSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names = &dataset.meta.class_names;
    let meta = PaletteMeta {
        classes: (0..model.num_classes())
            .map(|c| PaletteEntry {
                id: c,
                name: names.get(c).map(String::as_str).unwrap_or("class"),
                rgb: class_color(c as u8),
            })
            .collect(),
        ignore: class_color(IGNORE),
        prediction_panel: "image | ground truth | prediction",
        guider_panel: "mixed image | prediction from mixed features | prediction from guider features | target ground truth",
    };
    let meta_path = out_dir.join("palette.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("palette is serialisable"))
        .map_err(|e| Error::io(&meta_path, e))?;

    let mut summary = DumpSummary::default();
    let images = &dataset.images;
    let mut predictions = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let x = stack_images([&img.pixels]);
        let pred = model.predict(params, &x)?.index_axis_move(Axis(0), 0);
        let panel = side_by_side(&[pixels_to_rgb8(&img.pixels), colorize(&img.labels), colorize(&pred)]);
        save_png(&out_dir.join(format!("pred_{i:06}.png")), &panel)?;
        summary.prediction_panels += 1;
        predictions.push(pred);
    }

    let Some((guider, gparams)) = guider else {
        summary.notice = Some("no guider parameters in checkpoint; guider panels skipped".into());
        return Ok(summary);
    };
    let stride = model.config().output_stride();
    let mut rng = crate::seeding::stream(seed, &[crate::seeding::STREAM_MIX]);
    for (i, target) in images.iter().enumerate() {
        let source = &images[(i + 1) % images.len()];
        let mixed = match mixing::class_mix(&source.pixels, &source.labels, &target.pixels, &predictions[i], stride, &mut rng) {
            Ok(m) => m,
            Err(Error::NoValidClasses) => continue,
            Err(e) => return Err(e),
        };
        let x = stack_images([&mixed.image]);
        let (f_m, _) = model.encode(params, &x)?;
        let plain = argmax_classes(&model.decode(params, &f_m)?.0);
        let mask: Array3<bool> = mixed.mask_scale.clone().insert_axis(Axis(0));
        let (f_g, _) = guider.reconstruct(gparams, &f_m, &mask)?;
        let guided = argmax_classes(&model.decode(params, &f_g)?.0);
        let panel = side_by_side(&[
            pixels_to_rgb8(&mixed.image),
            colorize(&plain.index_axis(Axis(0), 0).to_owned()),
            colorize(&guided.index_axis(Axis(0), 0).to_owned()),
            colorize(&target.labels),
        ]);
        save_png(&out_dir.join(format!("guided_{i:06}.png")), &panel)?;
        summary.guider_panels += 1;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let y = arr2(&[[0u8, 1], [2, 1]]);
        let mut r = IoUReport::new(3);
        r.accumulate(&y, &y).unwrap();
        assert_eq!(r.miou, 1.0);
        for (t, row) in r.confusion.iter().enumerate() {
            for (p, &v) in row.iter().enumerate() {
                assert!(t == p || v == 0);
            }
        }
    }

    #[test]
    fn constant_prediction_on_half_split() {
        let pred = Array2::zeros((2, 2));
        let truth = arr2(&[[0u8, 0], [1, 1]]);
        let mut r = IoUReport::new(2);
        r.accumulate(&pred, &truth).unwrap();
        assert_eq!(r.confusion, vec![vec![2, 0], vec![2, 0]]);
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(0.0)]);
        assert_eq!(r.miou, 0.25);
    }

    #[test]
    fn ignore_truth_changes_nothing() {
        let mut r = IoUReport::new(3);
        let before = r.clone();
        r.accumulate(&Array2::from_elem((3, 3), 2), &Array2::from_elem((3, 3), IGNORE)).unwrap();
        assert_eq!(r, before);
    }

    #[test]
    fn absent_classes_are_undefined() {
        let y = Array2::from_elem((2, 2), 1u8);
        let mut r = IoUReport::new(4);
        r.accumulate(&y, &y).unwrap();
        assert_eq!(r.per_class_iou, vec![None, Some(1.0), None, None]);
        assert_eq!(r.miou, 1.0);
        let json = r.to_json();
        assert!(json.contains("null"));
        let back: IoUReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn rejects_bad_input() {
        let mut r = IoUReport::new(2);
        assert!(r.accumulate(&Array2::zeros((2, 2)), &Array2::zeros((2, 3))).is_err());
        assert!(r.accumulate(&Array2::from_elem((1, 1), 5), &Array2::zeros((1, 1))).is_err());
        assert!(r.accumulate(&Array2::zeros((1, 1)), &Array2::from_elem((1, 1), 2)).is_err());
    }

    fn pair() -> impl Strategy<Value = (Array2<u8>, Array2<u8>)> {
        let map = || prop::collection::vec(prop_oneof![0u8..4, Just(IGNORE)], 36);
        (map(), prop::collection::vec(0u8..4, 36)).prop_map(|(t, p)| {
            (
                Array2::from_shape_vec((6, 6), p).unwrap(),
                Array2::from_shape_vec((6, 6), t).unwrap(),
            )
        })
    }

    proptest! {
        #[test]
        fn total_counts_valid_pixels((pred, truth) in pair()) {
            let mut r = IoUReport::new(4);
            r.accumulate(&pred, &truth).unwrap();
            prop_assert_eq!(r.total(), truth.iter().filter(|&&t| t != IGNORE).count() as u64);
        }

        #[test]
        fn miou_is_permutation_invariant((pred, truth) in pair(), perm in Just([0u8, 1, 2, 3]).prop_shuffle()) {
            let relabel = |m: &Array2<u8>| m.mapv(|v| if v == IGNORE { v } else { perm[v as usize] });
            let mut a = IoUReport::new(4);
            a.accumulate(&pred, &truth).unwrap();
            let mut b = IoUReport::new(4);
            b.accumulate(&relabel(&pred), &relabel(&truth)).unwrap();
            prop_assert!((a.miou - b.miou).abs() < 1e-12);
        }

        #[test]
        fn accumulation_is_associative((p1, t1) in pair(), (p2, t2) in pair()) {
            let mut whole = IoUReport::new(4);
            whole.accumulate(&p1, &t1).unwrap();
            whole.accumulate(&p2, &t2).unwrap();
            let mut a = IoUReport::new(4);
            a.accumulate(&p1, &t1).unwrap();
            let mut b = IoUReport::new(4);
            b.accumulate(&p2, &t2).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(a, whole);
        }
    }
}
