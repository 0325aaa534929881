//! Images, masks, the synthetic two-domain scenery dataset and its on-disk
//! layout.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cst, Element, Tensor};

/// Image stored row-major as `(H, W, 3)` with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Contract(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Contract(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn rgb(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.width + c) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for r in 0..self.height {
            for c in (0..self.width).rev() {
                pixels.extend_from_slice(&self.rgb(r, c));
            }
        }
        Self { pixels, ..*self }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self {
            height,
            width,
            pixels: bytes.iter().map(|&b| byte_to_unit(b)).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.display().to_string(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self::from_rgb8(h as usize, w as usize, img.as_raw()))
    }

    /// Mean absolute per-value difference.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / self.pixels.len() as f64
    }
}

fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Per-pixel class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    n_classes: usize,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, n_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Contract(format!(
                "mask {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if n_classes == 0 || n_classes > 256 {
            return Err(Error::Contract(format!("unsupported class count {n_classes}")));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::Contract(format!("label {l} >= n_classes {n_classes}")));
        }
        Ok(Self {
            height,
            width,
            n_classes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, r: usize, c: usize) -> usize {
        self.labels[r * self.width + c] as usize
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut labels = Vec::with_capacity(self.labels.len());
        for r in 0..self.height {
            labels.extend(self.labels[r * self.width..(r + 1) * self.width].iter().rev());
        }
        Self { labels, ..*self }
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn present(&self) -> Vec<bool> {
        self.histogram().into_iter().map(|c| c > 0).collect()
    }

    /// Inclusive `(r0, r1, c0, c1)` bounding box of `class`, if present.
    pub fn bounding_box(&self, class: usize) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.label(r, c) == class {
                    bb = Some(match bb {
                        None => (r, r, c, c),
                        Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                    });
                }
            }
        }
        bb
    }

    /// Intersection-over-union of one class, `None` when absent from both.
    pub fn iou(&self, other: &SegMask, class: usize) -> Option<f64> {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.labels.iter().zip(&other.labels) {
            let (a, b) = (a as usize == class, b as usize == class);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        (union > 0).then(|| inter as f64 / union as f64)
    }

    /// Mean IoU over classes occurring in either mask.
    pub fn mean_iou(&self, other: &SegMask) -> f64 {
        let ious: Vec<f64> = (0..self.n_classes.max(other.n_classes))
            .filter_map(|c| self.iou(other, c))
            .collect();
        ious.iter().sum::<f64>() / ious.len().max(1) as f64
    }

    /// Mean colour of `image` over the pixels labelled `class`.
    pub fn region_mean(&self, image: &Image, class: usize) -> Option<[f64; 3]> {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for (i, &l) in self.labels.iter().enumerate() {
            if l as usize == class {
                for (a, &v) in acc.iter_mut().zip(&image.pixels()[3 * i..3 * i + 3]) {
                    *a += v as f64;
                }
                n += 1;
            }
        }
        (n > 0).then(|| acc.map(|a| a / n as f64))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.labels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
        .map_err(|source| Error::Image {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path, n_classes: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.display().to_string(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, n_classes, img.into_raw())
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Source = 0,
    Target = 1,
}

impl Domain {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Domain::Source),
            1 => Ok(Domain::Target),
            _ => Err(Error::Usage(format!("domain must be 0 or 1, got {i}"))),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: Option<SegMask>,
    pub domain: Domain,
}

/// Mirrors image and mask left-right with probability `flip_probability`.
pub fn augment(sample: &Sample, flip_probability: f64, rng: &mut impl Rng) -> Sample {
    if rng.random::<f64>() < flip_probability {
        Sample {
            image: sample.image.flip_horizontal(),
            mask: sample.mask.as_ref().map(SegMask::flip_horizontal),
            domain: sample.domain,
        }
    } else {
        sample.clone()
    }
}

/// Source coordinate and weights for half-pixel-centred bilinear sampling,
/// clamped to the border.
pub(crate) fn bilinear_taps(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize to `target x target`, values clamped to [-1, 1].
pub fn resize(image: &Image, target: usize) -> Image {
    assert!(target >= 1, "resize target must be positive");
    if image.height == target && image.width == target {
        return image.clone();
    }
    let mut pixels = Vec::with_capacity(target * target * 3);
    for r in 0..target {
        let (r0, r1, fr) = bilinear_taps(r, target, image.height);
        for c in 0..target {
            let (c0, c1, fc) = bilinear_taps(c, target, image.width);
            let (a, b) = (image.rgb(r0, c0), image.rgb(r0, c1));
            let (d, e) = (image.rgb(r1, c0), image.rgb(r1, c1));
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - fc) + b[ch] as f64 * fc;
                let bot = d[ch] as f64 * (1.0 - fc) + e[ch] as f64 * fc;
                pixels.push((top * (1.0 - fr) + bot * fr).clamp(-1.0, 1.0) as f32);
            }
        }
    }
    Image {
        height: target,
        width: target,
        pixels,
    }
}

/// Nearest-neighbour mask resize.
pub fn resize_mask(mask: &SegMask, target: usize) -> SegMask {
    let mut labels = Vec::with_capacity(target * target);
    for r in 0..target {
        let sr = (r * mask.height) / target;
        for c in 0..target {
            labels.push(mask.labels[sr * mask.width + (c * mask.width) / target]);
        }
    }
    SegMask {
        height: target,
        width: target,
        n_classes: mask.n_classes,
        labels,
    }
}

/// Stacks images into an `[N, 3, H, W]` tensor.
pub fn images_to_tensor<E: Element>(images: &[&Image]) -> Tensor<E> {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert_eq!((img.height, img.width), (h, w), "batch images must share a size");
        for ch in 0..3 {
            data.extend(img.pixels[ch..].iter().step_by(3).map(|&v| cst::<E>(v as f64)));
        }
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

/// Splits an `[N, 3, H, W]` tensor into images, clamping into [-1, 1].
pub fn tensor_to_images<E: Element>(t: &Tensor<E>) -> Vec<Image> {
    let [n, c, h, w] = [t.dim(0), t.dim(1), t.dim(2), t.dim(3)];
    assert_eq!(c, 3, "expected RGB channels");
    let d = t.data();
    (0..n)
        .map(|i| {
            let mut pixels = Vec::with_capacity(h * w * 3);
            for p in 0..h * w {
                for ch in 0..3 {
                    let v = d[(i * 3 + ch) * h * w + p].to_f64().unwrap_or(0.0);
                    pixels.push(v.clamp(-1.0, 1.0) as f32);
                }
            }
            Image {
                height: h,
                width: w,
                pixels,
            }
        })
        .collect()
}

/// Two domains of samples.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub domains: [Vec<Sample>; 2],
    pub n_classes: Option<usize>,
}

impl Dataset {
    pub fn domain(&self, d: Domain) -> &[Sample] {
        &self.domains[d.index()]
    }

    pub fn has_masks(&self) -> bool {
        self.domains.iter().flatten().all(|s| s.mask.is_some())
    }

    /// Splits every domain into a leading training part and a trailing
    /// held-out part holding `round(held_out_fraction * len)` samples.
    pub fn split(&self, held_out_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::Config(format!(
                "held-out fraction must be in [0, 1), got {held_out_fraction}"
            )));
        }
        let mut train = Dataset {
            n_classes: self.n_classes,
            ..Default::default()
        };
        let mut held = train.clone();
        for (i, samples) in self.domains.iter().enumerate() {
            let n_held = (held_out_fraction * samples.len() as f64).round() as usize;
            let cut = samples.len() - n_held;
            train.domains[i] = samples[..cut].to_vec();
            held.domains[i] = samples[cut..].to_vec();
        }
        Ok((train, held))
    }
}

/// Indices into the two domains of a [`Dataset`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnpairedBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub reference: Vec<usize>,
}

/// Draws content images from domain 0, real targets from domain 1 and style
/// references from domain 1, all uniformly with replacement and independently.
pub fn unpaired_batch(dataset: &Dataset, batch_size: usize, rng: &mut impl Rng) -> Result<UnpairedBatch> {
    let (n0, n1) = (dataset.domains[0].len(), dataset.domains[1].len());
    if n0 == 0 || n1 == 0 {
        return Err(Error::Data(format!("both domains need images (have {n0} and {n1})")));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut draw = |n: usize| -> Vec<usize> { (0..batch_size).map(|_| rng.random_range(0..n)).collect() };
    let source = draw(n0);
    let target = draw(n1);
    let reference = draw(n1);
    Ok(UnpairedBatch {
        source,
        target,
        reference,
    })
}

// ---- synthetic scenery ------------------------------------------------------

pub const CLASS_SKY: usize = 0;
pub const CLASS_GROUND: usize = 1;
pub const CLASS_TREE: usize = 2;
pub const CLASS_MOUNTAIN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub n_images_per_domain: usize,
    pub resolution: usize,
    pub n_object_classes: usize,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            n_images_per_domain: 100,
            resolution: 64,
            n_object_classes: 4,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images_per_domain == 0 {
            return Err(Error::Config("n_images_per_domain must be positive".into()));
        }
        if self.resolution < 16 {
            return Err(Error::Config(format!("resolution must be >= 16, got {}", self.resolution)));
        }
        if !(2..=32).contains(&self.n_object_classes) {
            return Err(Error::Config(format!(
                "n_object_classes must be in [2, 32], got {}",
                self.n_object_classes
            )));
        }
        Ok(())
    }
}

/// Geometric primitive in pixel units; a pixel belongs to it when its centre
/// `(x + 0.5, y + 0.5)` does.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Everything on or below the line `y = y0 + slope * (x - x0)`.
    BelowLine { x0: f64, y0: f64, slope: f64 },
    Triangle { a: (f64, f64), b: (f64, f64), c: (f64, f64) },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::BelowLine { x0, y0, slope } => y >= y0 + slope * (x - x0),
            Shape::Triangle { a, b, c } => {
                let cross = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
                let (d1, d2, d3) = (cross(a, b), cross(b, c), cross(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
        }
    }
}

/// Painter's-order list of labelled primitives over a sky background.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub size: usize,
    pub layers: Vec<(usize, Shape)>,
}

impl SceneLayout {
    pub fn label_at(&self, r: usize, c: usize) -> usize {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        self.layers
            .iter()
            .rev()
            .find(|(_, s)| s.contains(x, y))
            .map_or(CLASS_SKY, |&(class, _)| class)
    }

    pub fn rasterize(&self, n_classes: usize) -> SegMask {
        let mut labels = Vec::with_capacity(self.size * self.size);
        for r in 0..self.size {
            for c in 0..self.size {
                labels.push(self.label_at(r, c) as u8);
            }
        }
        SegMask {
            height: self.size,
            width: self.size,
            n_classes,
            labels,
        }
    }
}

fn sample_layout(rng: &mut ChaCha8Rng, size: usize, n_classes: usize) -> SceneLayout {
    let s = size as f64;
    let horizon = s * rng.random_range(0.45..0.65);
    let slope = rng.random_range(-0.15..0.15);
    let mut layers = vec![(
        CLASS_GROUND,
        Shape::BelowLine {
            x0: s / 2.0,
            y0: horizon,
            slope,
        },
    )];
    if n_classes > CLASS_MOUNTAIN {
        for _ in 0..rng.random_range(1..=3) {
            let cx = s * rng.random_range(0.0..1.0);
            let half = s * rng.random_range(0.15..0.35);
            let base = horizon + slope * (cx - s / 2.0) + 0.05 * s;
            let apex = base - s * rng.random_range(0.2..0.4);
            let apex_x = cx + half * rng.random_range(-0.3..0.3);
            layers.push((
                CLASS_MOUNTAIN,
                Shape::Triangle {
                    a: (cx - half, base),
                    b: (cx + half, base),
                    c: (apex_x, apex),
                },
            ));
        }
    }
    if n_classes > CLASS_TREE {
        for _ in 0..rng.random_range(1..=3) {
            let cx = s * rng.random_range(0.05..0.95);
            let cy = horizon + slope * (cx - s / 2.0) + s * rng.random_range(-0.1..0.15);
            layers.push((
                CLASS_TREE,
                Shape::Ellipse {
                    cx,
                    cy,
                    rx: s * rng.random_range(0.05..0.12),
                    ry: s * rng.random_range(0.08..0.18),
                },
            ));
        }
    }
    for class in 4..n_classes {
        if rng.random::<f64>() < 0.7 {
            let cx = s * rng.random_range(0.1..0.9);
            layers.push((
                class,
                Shape::Ellipse {
                    cx,
                    cy: s * rng.random_range(0.75..0.95),
                    rx: s * rng.random_range(0.04..0.08),
                    ry: s * rng.random_range(0.03..0.06),
                },
            ));
        }
    }
    SceneLayout { size, layers }
}

/// Colour range `(from, to)` in [0, 1] RGB of one class in one domain; each
/// image draws a tint along the segment.
pub fn class_palette(domain: Domain, class: usize) -> ([f64; 3], [f64; 3]) {
    match (domain, class) {
        (Domain::Source, CLASS_SKY) => ([0.35, 0.60, 0.95], [0.55, 0.75, 1.00]),
        (Domain::Source, CLASS_GROUND) => ([0.30, 0.65, 0.20], [0.55, 0.75, 0.25]),
        (Domain::Source, CLASS_TREE) => ([0.05, 0.35, 0.10], [0.10, 0.45, 0.05]),
        (Domain::Source, CLASS_MOUNTAIN) => ([0.50, 0.40, 0.30], [0.60, 0.50, 0.35]),
        (Domain::Target, CLASS_SKY) => ([0.40, 0.50, 0.70], [0.50, 0.58, 0.78]),
        (Domain::Target, CLASS_GROUND) => ([0.97, 0.93, 0.80], [0.80, 0.92, 1.00]),
        (Domain::Target, CLASS_TREE) => ([0.15, 0.25, 0.25], [0.20, 0.30, 0.35]),
        (Domain::Target, CLASS_MOUNTAIN) => ([0.55, 0.42, 0.50], [0.62, 0.48, 0.55]),
        (domain, class) => {
            // Extra classes: hues spread around the colour wheel, paler in the target domain.
            let h = (class as f64 * 0.382) % 1.0;
            let (sat, val) = match domain {
                Domain::Source => (0.7, 0.75),
                Domain::Target => (0.35, 0.95),
            };
            let c = hsv(h, sat, val);
            let d = hsv((h + 0.04) % 1.0, sat, val * 0.9);
            (c, d)
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const PIXEL_NOISE: f64 = 0.03;

fn render(layout: &SceneLayout, mask: &SegMask, domain: Domain, n_classes: usize, rng: &mut ChaCha8Rng) -> Image {
    let colors: Vec<[f64; 3]> = (0..n_classes)
        .map(|class| {
            let (a, b) = class_palette(domain, class);
            let t: f64 = rng.random();
            [0, 1, 2].map(|i| a[i] + t * (b[i] - a[i]))
        })
        .collect();
    let size = layout.size;
    let mut bytes = Vec::with_capacity(size * size * 3);
    for &l in mask.labels() {
        let base = colors[l as usize];
        for v in base {
            let v = (v + rng.random_range(-PIXEL_NOISE..PIXEL_NOISE)).clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    Image::from_rgb8(size, size, &bytes)
}

/// A generated dataset together with the scene descriptions it was drawn from.
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub spec: ToyDatasetSpec,
    pub dataset: Dataset,
    pub layouts: [Vec<SceneLayout>; 2],
}

/// Renders the two-domain scenery dataset. Both domains draw layouts from the
/// same distribution but from independent random streams, so no image has a
/// counterpart in the other domain.
pub fn generate_toy_dataset(spec: &ToyDatasetSpec) -> Result<ToyDataset> {
    spec.validate()?;
    let mut dataset = Dataset {
        n_classes: Some(spec.n_object_classes),
        ..Default::default()
    };
    let mut layouts: [Vec<SceneLayout>; 2] = Default::default();
    for domain in [Domain::Source, Domain::Target] {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(domain.index() as u64 + 1);
        for _ in 0..spec.n_images_per_domain {
            let layout = sample_layout(&mut rng, spec.resolution, spec.n_object_classes);
            let mask = layout.rasterize(spec.n_object_classes);
            let image = render(&layout, &mask, domain, spec.n_object_classes, &mut rng);
            dataset.domains[domain.index()].push(Sample {
                image,
                mask: Some(mask),
                domain,
            });
            layouts[domain.index()].push(layout);
        }
    }
    Ok(ToyDataset {
        spec: *spec,
        dataset,
        layouts,
    })
}

// ---- directory layout ---------------------------------------------------------

pub const DOMAIN_DIRS: [&str; 2] = ["domainA", "domainB"];
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_images_per_domain: usize,
    pub resolution: usize,
    pub n_object_classes: usize,
    pub seed: u64,
}

fn image_path(dir: &Path, domain: Domain, i: usize) -> PathBuf {
    dir.join(DOMAIN_DIRS[domain.index()]).join(format!("img_{i:05}.png"))
}

fn mask_path(dir: &Path, domain: Domain, i: usize) -> PathBuf {
    dir.join(DOMAIN_DIRS[domain.index()]).join("masks").join(format!("{i:05}.png"))
}

/// Writes `domainA/`, `domainB/` (images plus `masks/`) and `manifest.json`.
/// A non-empty `dir` is refused unless `force`, in which case it is cleared.
pub fn save_toy_dataset(toy: &ToyDataset, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Usage(format!(
                    "{} exists and is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    for name in DOMAIN_DIRS {
        let masks = dir.join(name).join("masks");
        fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    }
    for domain in [Domain::Source, Domain::Target] {
        for (i, s) in toy.dataset.domain(domain).iter().enumerate() {
            s.image.save_png(&image_path(dir, domain, i))?;
            if let Some(m) = &s.mask {
                m.save_png(&mask_path(dir, domain, i))?;
            }
        }
    }
    let manifest = Manifest {
        n_images_per_domain: toy.spec.n_images_per_domain,
        resolution: toy.spec.resolution,
        n_object_classes: toy.spec.n_object_classes,
        seed: toy.spec.seed,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))
}

/// Loads a dataset directory. Images are resized to `resolution` when given.
/// Masks are read when a manifest records the class count and the mask files
/// exist; external folders without a manifest load as image-only samples.
pub fn load_dataset(dir: &Path, resolution: Option<usize>) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?)
    } else {
        None
    };
    let n_classes = manifest.as_ref().map(|m| m.n_object_classes);
    let mut dataset = Dataset {
        n_classes,
        ..Default::default()
    };
    for domain in [Domain::Source, Domain::Target] {
        let ddir = dir.join(DOMAIN_DIRS[domain.index()]);
        let mut files: Vec<PathBuf> = fs::read_dir(&ddir)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", ddir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        for path in files {
            let mut image = Image::load(&path)?;
            let mut mask = None;
            if let Some(n) = n_classes {
                let idx = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.strip_prefix("img_"))
                    .and_then(|s| s.parse::<usize>().ok());
                if let Some(i) = idx {
                    let mp = mask_path(dir, domain, i);
                    if mp.exists() {
                        mask = Some(SegMask::load(&mp, n)?);
                    }
                }
            }
            if image.height != image.width && resolution.is_none() {
                return Err(Error::Data(format!("{} is not square", path.display())));
            }
            if let Some(res) = resolution {
                if image.height != res || image.width != res {
                    image = resize(&image, res);
                    mask = mask.map(|m| resize_mask(&m, res));
                }
            }
            dataset.domains[domain.index()].push(Sample { image, mask, domain });
        }
    }
    if dataset.domains.iter().any(|d| d.is_empty()) {
        return Err(Error::Data(format!("{} needs images in both domain folders", dir.display())));
    }
    Ok(dataset)
}
