//! Per-object feature vectors: segmenters, crop extraction, feature
//! extractors and positive/negative pair matching.
//!
//! Object slots are indexed by class. All instances of a class share one
//! crop: the tight bounding box of its pixels, with other-class pixels set to
//! zero, bilinearly resampled to the extractor's input size. Crop extraction
//! is a fixed linear map of the image, so features of generated images stay
//! differentiable with respect to the generator.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{bilinear_taps, class_palette, images_to_tensor, Domain, Image, SegMask};
use crate::error::{Error, Result};
use crate::nn::{lrelu_gain, EqConv2d, EqLinear, ParamStore, LRELU_SLOPE};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{ResamplePlan, Tensor};

/// Default extractor input size (square crops).
pub const CROP_SIZE: usize = 32;

pub trait Segmenter: Send + Sync {
    fn name(&self) -> &str;
    fn n_classes(&self) -> usize;
    fn segment(&self, image: &Image) -> SegMask;
}

/// Maps image batches `[P, 3, s, s]` (with `s = input_size()`) to `[P, dim()]`.
///
/// Implementations compose graph operations so that gradients reach the input
/// crops; their own parameters stay frozen.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn input_size(&self) -> usize;
    fn embed_batch<'g>(&self, crops: Var<'g, f32>) -> Var<'g, f32>;

    /// Embeds one image, resizing it to the input size first.
    fn embed(&self, crop: &Image) -> Vec<f32> {
        let crop = crate::data::resize(crop, self.input_size());
        let g = Graph::new();
        let out = g.no_grad(|| self.embed_batch(g.constant(images_to_tensor(&[&crop]))));
        out.value().data().to_vec()
    }
}

/// Classifies every pixel by the nearest toy palette colour segment of either
/// domain.
#[derive(Clone, Debug)]
pub struct OracleSegmenter {
    n_classes: usize,
    segments: Vec<(usize, [f64; 3], [f64; 3])>,
}

impl OracleSegmenter {
    pub fn for_toy(n_classes: usize) -> Self {
        let mut segments = Vec::new();
        for domain in [Domain::Source, Domain::Target] {
            for class in 0..n_classes {
                let (a, b) = class_palette(domain, class);
                segments.push((class, a, b));
            }
        }
        Self { n_classes, segments }
    }

    pub fn classify(&self, rgb: [f32; 3]) -> usize {
        let p = rgb.map(|v| (v as f64 + 1.0) / 2.0);
        let mut best = (f64::INFINITY, 0);
        for &(class, a, b) in &self.segments {
            let ab: [f64; 3] = [0, 1, 2].map(|i| b[i] - a[i]);
            let ap: [f64; 3] = [0, 1, 2].map(|i| p[i] - a[i]);
            let len2: f64 = ab.iter().map(|v| v * v).sum();
            let t = if len2 > 0.0 {
                (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d2: f64 = (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum();
            if d2 < best.0 {
                best = (d2, class);
            }
        }
        best.1
    }
}

impl Segmenter for OracleSegmenter {
    fn name(&self) -> &str {
        "oracle"
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn segment(&self, image: &Image) -> SegMask {
        let mut labels = Vec::with_capacity(image.height() * image.width());
        for r in 0..image.height() {
            for c in 0..image.width() {
                labels.push(self.classify(image.rgb(r, c)) as u8);
            }
        }
        SegMask::new(image.height(), image.width(), self.n_classes, labels).expect("labels below n_classes")
    }
}

/// One feature row per class slot; rows of absent classes are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectFeatureSet {
    pub n: usize,
    pub d: usize,
    pub features: Vec<f32>,
    pub present: Vec<bool>,
}

impl ObjectFeatureSet {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.d..(i + 1) * self.d]
    }
}

/// Crop locations of a batch: the resampling plan plus, per `(sample, class)`
/// slot in row-major order, the index of its crop when the class is present.
#[derive(Clone, Debug)]
pub struct CropPlan {
    pub plan: Arc<ResamplePlan>,
    pub slots: Vec<Option<usize>>,
    pub n_classes: usize,
}

impl CropPlan {
    pub fn present(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    pub fn n_crops(&self) -> usize {
        self.plan.sources.len()
    }
}

pub fn crop_plan(masks: &[&SegMask], n_classes: usize, size: usize) -> CropPlan {
    let (h, w) = (masks[0].height(), masks[0].width());
    let mut sources = Vec::new();
    let mut taps = Vec::new();
    let mut slots = Vec::with_capacity(masks.len() * n_classes);
    for (b, mask) in masks.iter().enumerate() {
        assert_eq!((mask.height(), mask.width()), (h, w), "masks must share a size");
        for class in 0..n_classes {
            let Some((r0, r1, c0, c1)) = mask.bounding_box(class) else {
                slots.push(None);
                continue;
            };
            let (hb, wb) = (r1 - r0 + 1, c1 - c0 + 1);
            let mut t = Vec::with_capacity(size * size);
            for i in 0..size {
                let (a0, a1, fa) = bilinear_taps(i, size, hb);
                for j in 0..size {
                    let (b0, b1, fb) = bilinear_taps(j, size, wb);
                    let tap = |rr: usize, cc: usize, wt: f64| {
                        let (r, c) = (r0 + rr, c0 + cc);
                        let keep = mask.label(r, c) == class;
                        ((r * w + c) as u32, if keep { wt } else { 0.0 })
                    };
                    t.push([
                        tap(a0, b0, (1.0 - fa) * (1.0 - fb)),
                        tap(a0, b1, (1.0 - fa) * fb),
                        tap(a1, b0, fa * (1.0 - fb)),
                        tap(a1, b1, fa * fb),
                    ]);
                }
            }
            slots.push(Some(sources.len()));
            sources.push(b);
            taps.push(t);
        }
    }
    CropPlan {
        plan: Arc::new(ResamplePlan {
            src_shape: [masks.len(), 3, h, w],
            out_h: size,
            out_w: size,
            sources,
            taps,
        }),
        slots,
        n_classes,
    }
}

/// Features of every class slot of a batch `[B, 3, H, W]` as a `[B * n, d]`
/// variable, differentiable with respect to `images`.
pub fn object_features<'g>(
    images: Var<'g, f32>,
    crops: &CropPlan,
    extractor: &dyn FeatureExtractor,
) -> Result<Var<'g, f32>> {
    let graph = images.graph();
    let d = extractor.dim();
    let zero_row = graph.constant(Tensor::zeros(&[1, d]));
    if crops.n_crops() == 0 {
        return Ok(zero_row.index_rows(&vec![0; crops.slots.len()]));
    }
    let emb = extractor.embed_batch(images.resample(crops.plan.clone()));
    if emb.shape() != [crops.n_crops(), d] {
        return Err(Error::Plugin(format!(
            "extractor {} returned shape {:?}, expected [{}, {d}]",
            extractor.name(),
            emb.shape(),
            crops.n_crops()
        )));
    }
    let pad = crops.n_crops();
    let idx: Vec<usize> = crops.slots.iter().map(|s| s.unwrap_or(pad)).collect();
    Ok(Var::concat_rows(&[emb, zero_row]).index_rows(&idx))
}

pub fn extract_object_features(
    image: &Image,
    mask: &SegMask,
    extractor: &dyn FeatureExtractor,
) -> Result<ObjectFeatureSet> {
    if (mask.height(), mask.width()) != (image.height(), image.width()) {
        return Err(Error::Contract("mask and image sizes differ".into()));
    }
    let crops = crop_plan(&[mask], mask.n_classes(), extractor.input_size());
    let g = Graph::new();
    let feats = g.no_grad(|| object_features(g.constant(images_to_tensor(&[image])), &crops, extractor))?;
    Ok(ObjectFeatureSet {
        n: mask.n_classes(),
        d: extractor.dim(),
        features: feats.value().data().to_vec(),
        present: crops.present(),
    })
}

/// Masked, resampled crops as images (used to train the toy extractor).
pub fn crop_images(image: &Image, mask: &SegMask, size: usize) -> Vec<(usize, Image)> {
    let crops = crop_plan(&[mask], mask.n_classes(), size);
    let t = crate::tensor::resample(&images_to_tensor::<f32>(&[image]), &crops.plan);
    let imgs = crate::data::tensor_to_images(&t);
    crops
        .slots
        .iter()
        .enumerate()
        .filter_map(|(class, s)| s.map(|i| (class, imgs[i].clone())))
        .collect()
}

/// Mean colour of the crop.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanRgbExtractor;

impl FeatureExtractor for MeanRgbExtractor {
    fn name(&self) -> &str {
        "mean_rgb"
    }

    fn dim(&self) -> usize {
        3
    }

    fn input_size(&self) -> usize {
        CROP_SIZE
    }

    fn embed_batch<'g>(&self, crops: Var<'g, f32>) -> Var<'g, f32> {
        crops.spatial_mean()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub dim: usize,
    pub widths: [usize; 3],
    pub steps: usize,
    pub batch: usize,
    pub temperature: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            widths: [8, 16, 32],
            steps: 300,
            batch: 32,
            temperature: 0.2,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Small convolutional encoder trained with the normalized-temperature
/// cross-entropy objective on augmented object crops; frozen after training.
#[derive(Clone, Debug)]
pub struct ToyContrastiveExtractor {
    pub config: ContrastiveConfig,
    pub store: ParamStore<f32>,
    convs: Vec<EqConv2d>,
    head: EqLinear,
}

impl ToyContrastiveExtractor {
    pub fn init(config: ContrastiveConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            let gain = if i == 0 { 1.0 } else { lrelu_gain() };
            convs.push(EqConv2d::new(&mut store, &format!("conv{i}"), cin, w, (3, 3), true, gain, rng));
            cin = w;
        }
        let head = EqLinear::new(&mut store, "head", cin, config.dim, lrelu_gain(), rng);
        Self {
            config,
            store,
            convs,
            head,
        }
    }

    fn forward<'g>(&self, params: &crate::nn::Bound<'g, f32>, x: Var<'g, f32>) -> Var<'g, f32> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(params, h).leaky_relu(LRELU_SLOPE).avg_pool2();
        }
        self.head.forward(params, h.spatial_mean())
    }

    /// Trains on `crops` (images of size `CROP_SIZE`, at least two per class).
    pub fn train(crops: &[(usize, Image)], config: ContrastiveConfig) -> Result<Self> {
        let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
        for (c, _) in crops {
            *per_class.entry(*c).or_default() += 1;
        }
        if per_class.is_empty() || per_class.values().any(|&n| n < 2) {
            return Err(Error::Training(format!(
                "contrastive extractor needs at least two crops per class, have {per_class:?}"
            )));
        }
        if config.batch < 2 {
            return Err(Error::Config("contrastive batch must be at least 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = Self::init(config.clone(), &mut rng);
        let mut opt = Adam::new(
            &model.store,
            AdamConfig {
                lr: config.lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
        );
        let n = config.batch.min(crops.len());
        for step in 0..config.steps {
            let picks: Vec<&Image> = rand::seq::index::sample(&mut rng, crops.len(), n)
                .into_iter()
                .map(|i| &crops[i].1)
                .collect();
            let views: Vec<Image> = (0..2)
                .flat_map(|_| picks.iter().map(|img| jitter(img, &mut rng)).collect::<Vec<_>>())
                .collect();
            let refs: Vec<&Image> = views.iter().collect();
            let g = Graph::new();
            let params = model.store.bind(&g, true);
            let z = model.forward(&params, g.constant(images_to_tensor(&refs)));
            let loss = nt_xent(z, config.temperature);
            if !loss.to_f64().is_finite() {
                return Err(Error::Numeric(format!("contrastive loss not finite at step {step}")));
            }
            let grads = g.grad_tensors(loss, params.vars());
            opt.update(&mut model.store, &grads);
        }
        Ok(model)
    }

    pub fn from_store(config: ContrastiveConfig, store: ParamStore<f32>) -> Result<Self> {
        let mut model = Self::init(config, &mut ChaCha8Rng::seed_from_u64(0));
        let values = store.iter().map(|p| (*p.value).clone()).collect();
        model.store.load_values(values)?;
        Ok(model)
    }
}

impl FeatureExtractor for ToyContrastiveExtractor {
    fn name(&self) -> &str {
        "toy_contrastive"
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn input_size(&self) -> usize {
        CROP_SIZE
    }

    fn embed_batch<'g>(&self, crops: Var<'g, f32>) -> Var<'g, f32> {
        let params = self.store.bind(crops.graph(), false);
        self.forward(&params, crops)
    }
}

/// Random horizontal flip plus a small per-channel gain and offset.
fn jitter(img: &Image, rng: &mut impl Rng) -> Image {
    let base = if rng.random::<bool>() { img.flip_horizontal() } else { img.clone() };
    let gain: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.9..1.1));
    let shift: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let px = base
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v * gain[i % 3] + shift[i % 3]).clamp(-1.0, 1.0))
        .collect();
    Image::new(base.height(), base.width(), px).expect("clamped pixels")
}

/// NT-Xent over `2N` embeddings where rows `i` and `i + N` are two views.
pub fn nt_xent<'g>(z: Var<'g, f32>, temperature: f64) -> Var<'g, f32> {
    let graph = z.graph();
    let m = z.shape()[0];
    let half = m / 2;
    let zn = z.l2_normalize_rows(1e-12);
    let sim = zn.matmul_t(zn, false, true).mul_scalar(1.0 / temperature);
    let mut self_mask = Tensor::zeros(&[m, m]);
    for i in 0..m {
        self_mask.data_mut()[i * m + i] = -1e9;
    }
    let logits = sim.add(graph.constant(self_mask));
    let lse = row_logsumexp(logits);
    let pos: Vec<usize> = (0..m).map(|i| i * m + (i + half) % m).collect();
    let pos_logits = logits.reshape(&[m * m, 1]).index_rows(&pos).reshape(&[m]);
    lse.sub(pos_logits).mean()
}

/// `log(sum(exp(row)))` per row of a 2-D variable, shifted by the row maximum.
pub fn row_logsumexp<'g, E: crate::tensor::Element>(x: Var<'g, E>) -> Var<'g, E> {
    let v = x.value();
    let d = v.dim(1);
    let rows = v.dim(0);
    let maxes: Vec<E> = v
        .data()
        .chunks(d)
        .map(|r| r.iter().copied().fold(E::neg_infinity(), E::max))
        .collect();
    let shift = x.graph().constant(Tensor::from_vec(&[rows], maxes));
    x.sub(shift.expand_last(&[rows, d])).exp().sum_last().ln().add(shift)
}

// ---- positive / negative pairs -----------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NceNegatives {
    #[default]
    WithinPair,
    CrossBatch,
}

impl std::str::FromStr for NceNegatives {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within_pair" => Ok(Self::WithinPair),
            "cross_batch" => Ok(Self::CrossBatch),
            _ => Err(Error::Config(format!("nce_negatives must be within_pair or cross_batch, got {s}"))),
        }
    }
}

/// Row-index pairs `(style row, output row)` for one sample.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairSets {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// Same class present on both sides → positive; distinct classes both present
/// → negative.
pub fn match_pairs(style_present: &[bool], output_present: &[bool]) -> PairSets {
    let n = style_present.len();
    assert_eq!(n, output_present.len(), "feature sets must share n");
    let both: Vec<usize> = (0..n).filter(|&c| style_present[c] && output_present[c]).collect();
    let mut sets = PairSets::default();
    for &c in &both {
        sets.positives.push((c, c));
        for &c2 in &both {
            if c2 != c {
                sets.negatives.push((c, c2));
            }
        }
    }
    sets
}

pub type FeaturePair = (Vec<f32>, Vec<f32>);

pub fn match_positive_negative(
    style_set: &ObjectFeatureSet,
    output_set: &ObjectFeatureSet,
) -> Result<(Vec<FeaturePair>, Vec<FeaturePair>)> {
    if (style_set.n, style_set.d) != (output_set.n, output_set.d) {
        return Err(Error::Contract("feature sets must share n and d".into()));
    }
    let sets = match_pairs(&style_set.present, &output_set.present);
    let collect = |pairs: &[(usize, usize)]| {
        pairs
            .iter()
            .map(|&(a, b)| (style_set.row(a).to_vec(), output_set.row(b).to_vec()))
            .collect()
    };
    Ok((collect(&sets.positives), collect(&sets.negatives)))
}

/// Pairs for a batch whose slots are laid out `[sample * n + class]`.
/// `CrossBatch` adds, as negatives of each positive style row, every present
/// output object of the other samples.
pub fn batch_pairs(style_present: &[bool], output_present: &[bool], n: usize, mode: NceNegatives) -> Vec<PairSets> {
    let b = style_present.len() / n;
    (0..b)
        .map(|i| {
            let local = match_pairs(&style_present[i * n..(i + 1) * n], &output_present[i * n..(i + 1) * n]);
            let mut sets = PairSets {
                positives: local.positives.iter().map(|&(s, o)| (i * n + s, i * n + o)).collect(),
                negatives: local.negatives.iter().map(|&(s, o)| (i * n + s, i * n + o)).collect(),
            };
            if mode == NceNegatives::CrossBatch {
                for &(s, _) in &local.positives {
                    for j in (0..b).filter(|&j| j != i) {
                        for o in (0..n).filter(|&o| output_present[j * n + o]) {
                            sets.negatives.push((i * n + s, j * n + o));
                        }
                    }
                }
            }
            sets
        })
        .collect()
}

// ---- registry ------------------------------------------------------------------

/// Parsed `segmenter` / `extractor` setting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PluginKey {
    Builtin(String),
    Plugin(String),
}

impl PluginKey {
    pub fn parse(s: &str) -> Self {
        match s.strip_prefix("plugin:") {
            Some(name) => PluginKey::Plugin(name.to_string()),
            None => PluginKey::Builtin(s.to_string()),
        }
    }
}

/// User-registered segmenters and extractors, looked up by `plugin:<name>`.
#[derive(Clone, Default)]
pub struct PluginRegistry {
    segmenters: BTreeMap<String, Arc<dyn Segmenter>>,
    extractors: BTreeMap<String, Arc<dyn FeatureExtractor>>,
}

impl PluginRegistry {
    pub fn register_segmenter(&mut self, name: &str, s: Arc<dyn Segmenter>) {
        self.segmenters.insert(name.to_string(), s);
    }

    pub fn register_extractor(&mut self, name: &str, e: Arc<dyn FeatureExtractor>) {
        self.extractors.insert(name.to_string(), e);
    }

    pub fn segmenter(&self, name: &str) -> Result<Arc<dyn Segmenter>> {
        self.segmenters
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Plugin(format!("no segmenter plugin named {name}")))
    }

    pub fn extractor(&self, name: &str) -> Result<Arc<dyn FeatureExtractor>> {
        self.extractors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Plugin(format!("no extractor plugin named {name}")))
    }
}

impl std::fmt::Debug for PluginRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginRegistry")
            .field("segmenters", &self.segmenters.keys().collect::<Vec<_>>())
            .field("extractors", &self.extractors.keys().collect::<Vec<_>>())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_counts() {
        let all = [true; 4];
        let s = match_pairs(&all, &all);
        assert_eq!((s.positives.len(), s.negatives.len()), (4, 12));
        let s = match_pairs(&[true, false], &[false, true]);
        assert!(s.positives.is_empty() && s.negatives.is_empty());
    }

    #[test]
    fn oracle_recovers_palette_centres() {
        let seg = OracleSegmenter::for_toy(4);
        for domain in [Domain::Source, Domain::Target] {
            for class in 0..4 {
                let (a, b) = class_palette(domain, class);
                let mid = [0, 1, 2].map(|i| ((a[i] + b[i]) - 1.0) as f32);
                assert_eq!(seg.classify(mid), class);
            }
        }
    }
}
