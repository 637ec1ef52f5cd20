//! ShapeWorld: a procedural pair of segmentation domains.
//!
//! A scene layout (bands and objects, plus per-region appearance) is a pure
//! function of `(seed, index)`. Rendering turns a layout into pixels, and a
//! [`DomainShift`] applies a photometric change on top, so source and target
//! renders of the same layout always carry identical labels.

use crate::error::{Error, Result};
use crate::seeding::{self, STREAM_LAYOUT, STREAM_RENDER};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Label value for pixels without a class.
pub const IGNORE: u8 = 255;

pub const CLASS_NAMES: [&str; 6] = ["background", "sky", "road", "box", "disk", "pole"];

/// Network output stride every image size must be compatible with.
pub const OUTPUT_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub rng_seed: u64,
    pub num_classes: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            rng_seed: 0,
            num_classes: 6,
            image_size: 64,
            min_objects: 2,
            max_objects: 6,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..={}, got {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.image_size == 0 || self.image_size % OUTPUT_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by the output stride {OUTPUT_STRIDE}",
                self.image_size
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "min_objects {} > max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASS_NAMES[..self.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

/// Photometric domain shift: hue rotation (fraction of a full turn),
/// multiplicative brightness and additive Gaussian pixel noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub hue_shift: f64,
    pub brightness_scale: f64,
    pub texture_noise_std: f64,
}

impl DomainShift {
    pub const IDENTITY: DomainShift = DomainShift {
        hue_shift: 0.0,
        brightness_scale: 1.0,
        texture_noise_std: 0.0,
    };

    pub fn new(hue_shift: f64, brightness_scale: f64, texture_noise_std: f64) -> Result<Self> {
        let s = DomainShift {
            hue_shift,
            brightness_scale,
            texture_noise_std,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hue_shift) {
            return Err(Error::Config(format!("hue_shift {} not in [0,1]", self.hue_shift)));
        }
        if !(self.brightness_scale > 0.0 && self.brightness_scale.is_finite()) {
            return Err(Error::Config(format!(
                "brightness_scale {} must be > 0",
                self.brightness_scale
            )));
        }
        if !(self.texture_noise_std >= 0.0 && self.texture_noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "texture_noise_std {} must be >= 0",
                self.texture_noise_std
            )));
        }
        Ok(())
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// An RGB image (H×W×3, values in [0,1]) with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Array3<f64>,
    pub labels: Array2<u8>,
}

impl LabeledImage {
    pub fn new(pixels: Array3<f64>, labels: Array2<u8>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 || labels.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "pixels {:?} vs labels {:?}",
                pixels.dim(),
                labels.dim()
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite pixel".into()));
        }
        Ok(LabeledImage { pixels, labels })
    }

    pub fn height(&self) -> usize {
        self.labels.nrows()
    }

    pub fn width(&self) -> usize {
        self.labels.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Texture {
    Flat,
    /// Brightness falls off from the top of the image.
    Gradient { strength: f64 },
    /// Horizontal dashed lane markings.
    Lanes { period: f64, phase: f64 },
    /// Low-frequency blotches.
    Blotches { fx: f64, fy: f64, phase: f64 },
    /// Shading around a centre, used for disks.
    Radial { cx: f64, cy: f64, r: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Appearance {
    hue: f64,
    sat: f64,
    val: f64,
    texture: Texture,
}

/// Geometry and appearance of one scene, shared by every domain renderer.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub labels: Array2<u8>,
    regions: Array2<u8>,
    appearances: Vec<Appearance>,
    render_seed: u64,
}

impl SceneLayout {
    pub fn size(&self) -> usize {
        self.labels.nrows()
    }
}

/// Base (hue, saturation, value) per class in the source domain.
const CLASS_HSV: [(f64, f64, f64); 6] = [
    (0.10, 0.25, 0.55),
    (0.58, 0.55, 0.90),
    (0.00, 0.08, 0.35),
    (0.02, 0.80, 0.75),
    (0.33, 0.75, 0.70),
    (0.15, 0.85, 0.85),
];

fn jittered<R: Rng>(class: usize, texture: Texture, rng: &mut R) -> Appearance {
    let (h, s, v) = CLASS_HSV[class];
    Appearance {
        hue: (h + rng.random_range(-0.03..0.03)).rem_euclid(1.0),
        sat: (s + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0),
        val: (v + rng.random_range(-0.08..0.08)).clamp(0.05, 1.0),
        texture,
    }
}

enum Shape {
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
    Disk { cx: f64, cy: f64, r: f64 },
}

/// Builds the layout for scene `index`. Deterministic in `(spec.rng_seed, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<SceneLayout> {
    spec.validate()?;
    let mut rng = seeding::stream(spec.rng_seed, &[STREAM_LAYOUT, index]);
    let n = spec.image_size;
    let s = n as f64;
    let object_classes: Vec<(u8, f64)> = [(3u8, 0.45), (4, 0.40), (5, 0.15)]
        .into_iter()
        .filter(|(c, _)| (*c as usize) < spec.num_classes)
        .collect();

    for attempt in 0..64 {
        let mut labels = Array2::<u8>::zeros((n, n));
        let mut regions = Array2::<u8>::zeros((n, n));
        let mut appearances = vec![jittered(
            0,
            Texture::Blotches {
                fx: rng.random_range(0.15..0.4),
                fy: rng.random_range(0.15..0.4),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            },
            &mut rng,
        )];

        let sky_rows = (rng.random_range(0.15..0.30) * s).round() as usize;
        let road_top = n - (rng.random_range(0.20..0.35) * s).round() as usize;
        if spec.num_classes > 1 {
            appearances.push(jittered(
                1,
                Texture::Gradient {
                    strength: rng.random_range(0.15..0.35),
                },
                &mut rng,
            ));
            labels.slice_mut(ndarray::s![..sky_rows, ..]).fill(1);
            regions.slice_mut(ndarray::s![..sky_rows, ..]).fill(1);
        }
        if spec.num_classes > 2 {
            appearances.push(jittered(
                2,
                Texture::Lanes {
                    period: rng.random_range(8.0..14.0),
                    phase: rng.random_range(0.0..14.0),
                },
                &mut rng,
            ));
            labels.slice_mut(ndarray::s![road_top.., ..]).fill(2);
            regions.slice_mut(ndarray::s![road_top.., ..]).fill(2);
        }

        // The last attempt drops objects so the middle band stays background.
        let count = if attempt == 63 || object_classes.is_empty() {
            0
        } else {
            rng.random_range(spec.min_objects..=spec.max_objects)
        };
        let total: f64 = object_classes.iter().map(|(_, w)| w).sum();
        for _ in 0..count {
            let mut pick = rng.random_range(0.0..total);
            let mut class = object_classes[0].0;
            for &(c, w) in &object_classes {
                if pick < w {
                    class = c;
                    break;
                }
                pick -= w;
            }
            let (shape, texture) = match class {
                3 => {
                    let w = rng.random_range(s / 8.0..s / 3.0).round() as usize;
                    let h = rng.random_range(s / 8.0..s / 3.0).round() as usize;
                    let x0 = rng.random_range(0..=n - w);
                    let y0 = rng.random_range(sky_rows / 2..=n - h);
                    (Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }, Texture::Flat)
                }
                4 => {
                    let r = rng.random_range(s / 16.0..s / 6.0);
                    let cx = rng.random_range(r..s - r);
                    let cy = rng.random_range(r..s - r);
                    (Shape::Disk { cx, cy, r }, Texture::Radial { cx, cy, r })
                }
                _ => {
                    let w = rng.random_range((s / 32.0).max(1.0)..(s / 21.0).max(1.5)).round() as usize;
                    let h = rng.random_range(s / 3.0..2.0 * s / 3.0).round() as usize;
                    let x0 = rng.random_range(0..=n - w.max(1));
                    let y1 = rng.random_range(road_top..=n);
                    let y0 = y1.saturating_sub(h);
                    (Shape::Rect { x0, y0, x1: x0 + w.max(1), y1 }, Texture::Flat)
                }
            };
            let region = appearances.len() as u8;
            appearances.push(jittered(class as usize, texture, &mut rng));
            match shape {
                Shape::Rect { x0, y0, x1, y1 } => {
                    labels.slice_mut(ndarray::s![y0..y1, x0..x1]).fill(class);
                    regions.slice_mut(ndarray::s![y0..y1, x0..x1]).fill(region);
                }
                Shape::Disk { cx, cy, r } => {
                    for ((y, x), l) in labels.indexed_iter_mut() {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            *l = class;
                            regions[[y, x]] = region;
                        }
                    }
                }
            }
        }

        if labels.iter().any(|&l| l == 0) {
            return Ok(SceneLayout {
                labels,
                regions,
                appearances,
                render_seed: seeding::derive_seed(spec.rng_seed, &[STREAM_RENDER, index]),
            });
        }
    }
    unreachable!("an object-free layout always contains background")
}

fn texture_gain(t: Texture, x: f64, y: f64, size: f64) -> f64 {
    match t {
        Texture::Flat => 1.0,
        Texture::Gradient { strength } => 1.0 - strength * (y / size),
        Texture::Lanes { period, phase } => {
            let lane_row = ((y + phase) % period) < 1.5;
            let dash = ((x / 6.0).floor() as i64) % 2 == 0;
            if lane_row && dash {
                2.2
            } else {
                1.0
            }
        }
        Texture::Blotches { fx, fy, phase } => {
            1.0 + 0.18 * (fx * x + phase).sin() * (fy * y + 0.5 * phase).cos()
        }
        Texture::Radial { cx, cy, r } => {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / r.max(1e-6);
            1.15 - 0.35 * d.min(1.0)
        }
    }
}

/// Hash-based per-pixel grain in [-1, 1].
fn grain(seed: u64, x: usize, y: usize) -> f64 {
    let h = seeding::derive_seed(seed, &[x as u64, y as u64]);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders a layout under a photometric shift. Labels are copied unchanged
/// and pixels are clamped to [0,1] and quantised to 8 bits.
pub fn render_domain(layout: &SceneLayout, shift: &DomainShift) -> LabeledImage {
    let n = layout.size();
    let size = n as f64;
    let mut noise_rng = seeding::stream(layout.render_seed, &[1]);
    let noise = (shift.texture_noise_std > 0.0)
        .then(|| Normal::new(0.0, shift.texture_noise_std).unwrap());
    let mut pixels = Array3::<f64>::zeros((n, n, 3));
    for y in 0..n {
        for x in 0..n {
            let app = layout.appearances[layout.regions[[y, x]] as usize];
            let gain = texture_gain(app.texture, x as f64 + 0.5, y as f64 + 0.5, size);
            let v = (app.val * gain).clamp(0.0, 1.0);
            let mut rgb = hsv_to_rgb(app.hue, app.sat, v);
            let g = 0.02 * grain(layout.render_seed, x, y);
            for c in &mut rgb {
                *c = (*c + g).clamp(0.0, 1.0);
            }
            if shift.hue_shift != 0.0 {
                let (h, s, v) = rgb_to_hsv(rgb);
                rgb = hsv_to_rgb(h + shift.hue_shift, s, v);
            }
            if shift.brightness_scale != 1.0 {
                for c in &mut rgb {
                    *c *= shift.brightness_scale;
                }
            }
            if let Some(dist) = &noise {
                for c in &mut rgb {
                    *c += dist.sample(&mut noise_rng);
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                pixels[[y, x, c]] = quantize(*v);
            }
        }
    }
    LabeledImage {
        pixels,
        labels: layout.labels.clone(),
    }
}

/// Generates and renders `count` scenes starting at `first_index`.
pub fn render_many(
    spec: &SceneSpec,
    shift: &DomainShift,
    first_index: u64,
    count: usize,
) -> Result<Vec<LabeledImage>> {
    (0..count as u64)
        .map(|i| generate_scene(spec, first_index + i).map(|l| render_domain(&l, shift)))
        .collect()
}

// ---------------------------------------------------------------- storage

/// Contents of `meta.json` at a dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec: SceneSpec,
    pub shift: DomainShift,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Image count per split.
    pub splits: BTreeMap<String, usize>,
}

impl DatasetMeta {
    pub fn new(spec: SceneSpec, shift: DomainShift) -> Self {
        DatasetMeta {
            num_classes: spec.num_classes,
            class_names: spec.class_names(),
            spec,
            shift,
            splits: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn image_path(dir: &Path, split: &str, index: usize) -> PathBuf {
    dir.join("images").join(split).join(format!("{index:06}.png"))
}

fn label_path(dir: &Path, split: &str, index: usize) -> PathBuf {
    dir.join("labels").join(split).join(format!("{index:06}.png"))
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn write_meta(dir: &Path, meta: &DatasetMeta) -> Result<()> {
    let path = dir.join("meta.json");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = serde_json::to_string_pretty(meta).expect("meta serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn pixels_to_rgb8(pixels: &Array3<f64>) -> image::RgbImage {
    let (h, w, _) = pixels.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub(crate) fn save_png<P, C>(path: &Path, img: &image::ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes one split (PNG images and label maps) and records it in
/// `meta.json`. Pixels are stored with 8 bits per channel.
pub fn write_dataset(dir: &Path, meta: &DatasetMeta, split: &str, images: &[LabeledImage]) -> Result<()> {
    for (i, img) in images.iter().enumerate() {
        save_png(&image_path(dir, split, i), &pixels_to_rgb8(&img.pixels))?;
        let (h, w) = img.labels.dim();
        let gray = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([img.labels[[y as usize, x as usize]]])
        });
        save_png(&label_path(dir, split, i), &gray)?;
    }
    let mut meta = match read_meta(dir) {
        Ok(existing) if existing.spec == meta.spec && existing.shift == meta.shift => existing,
        _ => meta.clone(),
    };
    meta.splits.insert(split.to_string(), images.len());
    write_meta(dir, &meta)
}

fn load_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a split written by [`write_dataset`], validating label ranges.
pub fn read_dataset(dir: &Path, split: &str) -> Result<Dataset> {
    let meta = read_meta(dir)?;
    let count = *meta.splits.get(split).ok_or_else(|| {
        Error::format(dir.join("meta.json"), format!("no split named {split:?}"))
    })?;
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let ipath = image_path(dir, split, i);
        let rgb = load_png(&ipath)?.into_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        let lpath = label_path(dir, split, i);
        let gray = load_png(&lpath)?.into_luma8();
        if (gray.width() as usize, gray.height() as usize) != (w, h) {
            return Err(Error::format(&lpath, "label map size differs from image"));
        }
        let labels = Array2::from_shape_fn((h, w), |(y, x)| gray.get_pixel(x as u32, y as u32)[0]);
        if let Some(&bad) = labels
            .iter()
            .find(|&&l| l != IGNORE && l as usize >= meta.num_classes)
        {
            return Err(Error::format(
                &lpath,
                Error::LabelRange {
                    value: bad,
                    num_classes: meta.num_classes,
                }
                .to_string(),
            ));
        }
        images.push(LabeledImage { pixels, labels });
    }
    Ok(Dataset { meta, images })
}
