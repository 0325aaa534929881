//! The alternating discriminator / generator optimisation loop, translation
//! and model evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, Header, RngState, TensorEntry, FORMAT_VERSION};
use crate::config::TrainConfig;
use crate::data::{augment, images_to_tensor, tensor_to_images, unpaired_batch, Dataset, Domain, Image, Sample, SegMask};
use crate::error::{Error, Result};
use crate::gcn::GcnPair;
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, cycle_loss, generator_objective, info_nce_loss, r1_penalty, style_loss,
    NceConfig,
};
use crate::metrics::{evaluate_clouds, image_features, EvalReport, NdbConfig};
use crate::networks::{init_networks, Networks};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig};
use crate::segmentation::{
    batch_pairs, crop_images, crop_plan, object_features, ContrastiveConfig, FeatureExtractor, MeanRgbExtractor,
    OracleSegmenter, PluginKey, PluginRegistry, Segmenter, ToyContrastiveExtractor, CROP_SIZE,
};
use crate::tensor::Tensor;

/// The feature extractor a model was built with.
#[derive(Clone)]
pub enum ExtractorState {
    Toy(Arc<ToyContrastiveExtractor>),
    MeanRgb,
    Plugin(String, Arc<dyn FeatureExtractor>),
}

impl ExtractorState {
    pub fn get(&self) -> &dyn FeatureExtractor {
        match self {
            ExtractorState::Toy(t) => t.as_ref(),
            ExtractorState::MeanRgb => &MeanRgbExtractor,
            ExtractorState::Plugin(_, p) => p.as_ref(),
        }
    }
}

impl std::fmt::Debug for ExtractorState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ExtractorState({})", self.get().name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslateMode {
    Latent,
    Reference,
}

impl std::str::FromStr for TranslateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(Self::Latent),
            "reference" => Ok(Self::Reference),
            _ => Err(Error::Usage(format!("mode must be latent or reference, got {s}"))),
        }
    }
}

/// Trained networks plus what is needed to translate and evaluate.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub nets: Networks<f32>,
    pub extractor: ExtractorState,
    pub n_classes: Option<usize>,
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
}

impl Model {
    /// Translates `inputs` into domain `domain`. In reference mode `references`
    /// must hold one image per input.
    pub fn translate_batch(
        &self,
        inputs: &[&Image],
        domain: Domain,
        mode: TranslateMode,
        references: Option<&[&Image]>,
        rng: &mut impl Rng,
    ) -> Result<Vec<Image>> {
        let b = inputs.len();
        let domains = vec![domain; b];
        let x: Tensor<f32> = images_to_tensor(inputs);
        let z_dim = self.config.z_dim;
        let s = match mode {
            TranslateMode::Reference => {
                let refs = references.ok_or_else(|| Error::Usage("reference mode needs a reference image".into()))?;
                if refs.len() != b {
                    return Err(Error::Usage("one reference per input is required".into()));
                }
                self.nets.encode_style(&images_to_tensor(refs), &domains)
            }
            TranslateMode::Latent => self.nets.map_latent(&normal_tensor(rng, &[b, z_dim]), &domains),
        };
        let z = if self.config.freeze_z {
            Tensor::zeros(&[b, z_dim])
        } else {
            normal_tensor(rng, &[b, z_dim])
        };
        let y = self.nets.generate(&x, &s, &z);
        if !y.is_finite() {
            return Err(Error::Numeric("generator produced non-finite pixels".into()));
        }
        Ok(tensor_to_images(&y))
    }

    pub fn translate(
        &self,
        x: &Image,
        domain: Domain,
        mode: TranslateMode,
        reference: Option<&Image>,
        seed: u64,
    ) -> Result<Image> {
        if x.height() != self.config.resolution || x.width() != self.config.resolution {
            return Err(Error::Data(format!(
                "input is {}x{}, model expects {r}x{r}",
                x.height(),
                x.width(),
                r = self.config.resolution
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs = reference.map(|r| [r]);
        Ok(self
            .translate_batch(&[x], domain, mode, refs.as_ref().map(|r| &r[..]), &mut rng)?
            .remove(0))
    }

    /// `n` reference-guided translations of `inputs` into the target domain,
    /// input and reference picked round-robin / at random with `seed`.
    pub fn sample_translations(&self, inputs: &[&Image], references: &[&Image], n: usize, seed: u64) -> Result<Vec<Image>> {
        if inputs.is_empty() || references.is_empty() {
            return Err(Error::Data("translation needs inputs and references".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        let picks: Vec<(usize, usize)> = (0..n).map(|i| (i % inputs.len(), rng.random_range(0..references.len()))).collect();
        for chunk in picks.chunks(16) {
            let xs: Vec<&Image> = chunk.iter().map(|&(i, _)| inputs[i]).collect();
            let rs: Vec<&Image> = chunk.iter().map(|&(_, r)| references[r]).collect();
            out.extend(self.translate_batch(&xs, Domain::Target, TranslateMode::Reference, Some(&rs), &mut rng)?);
        }
        Ok(out)
    }

    /// Mean per-class IoU between each input's mask and `segmenter`'s mask of
    /// its reference-guided translation.
    pub fn structure_iou(&self, inputs: &[&Sample], references: &[&Image], segmenter: &dyn Segmenter, seed: u64) -> Result<f64> {
        let images: Vec<&Image> = inputs.iter().map(|s| &s.image).collect();
        let outputs = self.sample_translations(&images, references, inputs.len(), seed)?;
        let mut total = 0.0;
        for (s, y) in inputs.iter().zip(&outputs) {
            let mask = s.mask.clone().unwrap_or_else(|| segmenter.segment(&s.image));
            total += mask.mean_iou(&segmenter.segment(y));
        }
        Ok(total / inputs.len().max(1) as f64)
    }

    /// FID / diversity / NDB / JSD of `generated` against `real`.
    pub fn evaluate_images(&self, real: &[Image], generated: &[Image], ndb: &NdbConfig) -> Result<EvalReport> {
        let ex = self.extractor.get();
        let rc = image_features(real, ex, "real")?;
        let gc = image_features(generated, ex, "generated")?;
        evaluate_clouds(&rc, &gc, ndb, ex.name())
    }

    /// Translates held-out source images with held-out target references and
    /// compares them with the real target images of `train`.
    pub fn evaluate(&self, train: &Dataset, held_out: &Dataset, n_samples: usize, ndb: &NdbConfig) -> Result<EvalReport> {
        if n_samples < 2 {
            return Err(Error::Usage("n_samples must be at least 2".into()));
        }
        let inputs: Vec<&Image> = held_out.domain(Domain::Source).iter().map(|s| &s.image).collect();
        let mut refs: Vec<&Image> = held_out.domain(Domain::Target).iter().map(|s| &s.image).collect();
        if refs.is_empty() {
            refs = train.domain(Domain::Target).iter().map(|s| &s.image).collect();
        }
        let generated = self.sample_translations(&inputs, &refs, n_samples, ndb.seed)?;
        let real: Vec<Image> = train.domain(Domain::Target).iter().map(|s| s.image.clone()).collect();
        self.evaluate_images(&real, &generated, ndb)
    }
}

/// Loss components of one step; `None` for terms that are switched off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub adv_d: f64,
    pub r1: f64,
    pub d_objective: f64,
    pub adv_g: f64,
    pub cycle: f64,
    pub style: f64,
    pub spatio: Option<f64>,
    pub info: Option<f64>,
    pub nce_skipped: usize,
    pub g_objective: f64,
    pub wall_time_s: f64,
}

impl StepMetrics {
    /// The values that must reproduce exactly across identical runs.
    pub fn losses(&self) -> Vec<f64> {
        vec![
            self.adv_d,
            self.r1,
            self.d_objective,
            self.adv_g,
            self.cycle,
            self.style,
            self.spatio.unwrap_or(0.0),
            self.info.unwrap_or(0.0),
            self.g_objective,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Optimizers {
    pub generator: Adam<f32>,
    pub style_encoder: Adam<f32>,
    pub mapping: Adam<f32>,
    pub discriminator: Adam<f32>,
    pub gcn_in: Adam<f32>,
    pub gcn_out: Option<Adam<f32>>,
}

/// All mutable training state.
#[derive(Debug)]
pub struct Trainer {
    pub model: Model,
    pub gcns: GcnPair<f32>,
    pub opt: Optimizers,
    pub step: u64,
    rng: ChaCha8Rng,
    segmenter: Option<Arc<dyn Segmenter>>,
}

impl std::fmt::Debug for dyn Segmenter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Segmenter({})", self.name())
    }
}

const INIT_STREAM: u64 = 11;
const TRAIN_STREAM: u64 = 12;

fn adam(store: &ParamStore<f32>, cfg: &TrainConfig, lr: f64) -> Adam<f32> {
    Adam::new(
        store,
        AdamConfig {
            lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        },
    )
}

fn resolve_segmenter(cfg: &TrainConfig, n_classes: Option<usize>, registry: &PluginRegistry) -> Result<Option<Arc<dyn Segmenter>>> {
    match PluginKey::parse(&cfg.segmenter) {
        PluginKey::Plugin(name) => Ok(Some(registry.segmenter(&name)?)),
        PluginKey::Builtin(b) if b == "oracle" => Ok(n_classes.map(|n| Arc::new(OracleSegmenter::for_toy(n)) as Arc<dyn Segmenter>)),
        PluginKey::Builtin(b) => Err(Error::Config(format!("unknown segmenter {b:?} (oracle or plugin:<name>)"))),
    }
}

/// Masks of the given samples: stored masks first, the segmenter otherwise.
fn sample_masks(samples: &[Sample], segmenter: Option<&Arc<dyn Segmenter>>) -> Option<Vec<SegMask>> {
    samples
        .iter()
        .map(|s| s.mask.clone().or_else(|| segmenter.map(|seg| seg.segment(&s.image))))
        .collect()
}

impl Trainer {
    pub fn new(config: &TrainConfig, train: &Dataset, registry: &PluginRegistry) -> Result<Self> {
        config.validate()?;
        for s in train.domains.iter().flatten() {
            if s.image.height() != config.resolution || s.image.width() != config.resolution {
                return Err(Error::Data(format!(
                    "image size {}x{} differs from resolution {}",
                    s.image.height(),
                    s.image.width(),
                    config.resolution
                )));
            }
        }
        if train.domains.iter().any(|d| d.is_empty()) {
            return Err(Error::Data("training needs images in both domains".into()));
        }
        let segmenter = resolve_segmenter(config, train.n_classes, registry)?;
        let n_classes = train.n_classes.or_else(|| segmenter.as_ref().map(|s| s.n_classes()));
        let extractor = match PluginKey::parse(&config.extractor) {
            PluginKey::Plugin(name) => ExtractorState::Plugin(name.clone(), registry.extractor(&name)?),
            PluginKey::Builtin(b) if b == "mean_rgb" => ExtractorState::MeanRgb,
            PluginKey::Builtin(b) if b == "toy_contrastive" => {
                let mut crops = Vec::new();
                for s in train.domains.iter().flatten() {
                    let mask = s.mask.clone().or_else(|| segmenter.as_ref().map(|seg| seg.segment(&s.image)));
                    match mask {
                        Some(m) => crops.extend(crop_images(&s.image, &m, CROP_SIZE)),
                        None => crops.push((0, crate::data::resize(&s.image, CROP_SIZE))),
                    }
                }
                let cc = ContrastiveConfig {
                    dim: config.feature_dim,
                    steps: config.extractor_steps,
                    seed: config.seed,
                    ..ContrastiveConfig::default()
                };
                ExtractorState::Toy(Arc::new(ToyContrastiveExtractor::train(&crops, cc)?))
            }
            PluginKey::Builtin(b) => {
                return Err(Error::Config(format!(
                    "unknown extractor {b:?} (toy_contrastive, mean_rgb or plugin:<name>)"
                )))
            }
        };
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(INIT_STREAM);
        let nets = init_networks::<f32>(&config.net_config(), &mut init_rng)?;
        let gcns = GcnPair::new(
            config.gcn_config(extractor.get().dim()),
            config.share_gcn_params,
            &mut init_rng,
        )?;
        let opt = Optimizers {
            generator: adam(&nets.generator.store, config, config.lr_g),
            style_encoder: adam(&nets.style_encoder.store, config, config.lr_e),
            mapping: adam(&nets.mapping.store, config, config.lr_mapping),
            discriminator: adam(&nets.discriminator.store, config, config.lr_d),
            gcn_in: adam(&gcns.input.store, config, config.lr_g),
            gcn_out: gcns.output.as_ref().map(|g| adam(&g.store, config, config.lr_g)),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        if n_classes.is_none() && (config.lambda_spatio > 0.0 || config.lambda_info > 0.0) {
            log::warn!("no masks and no segmenter plugin: structural and contrastive losses are disabled");
        }
        Ok(Self {
            model: Model {
                config: config.clone(),
                nets,
                extractor,
                n_classes,
            },
            gcns,
            opt,
            step: 0,
            rng,
            segmenter,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.model.config
    }

    fn structure_available(&self) -> bool {
        self.model.n_classes.is_some() && self.segmenter.is_some()
    }

    /// One discriminator update followed by one generator-side update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        let start = Instant::now();
        let cfg = self.model.config.clone();
        let bs = cfg.batch_size;
        let batch = unpaired_batch(data, bs, &mut self.rng)?;
        let pick = |rng: &mut ChaCha8Rng, idx: &[usize], d: Domain| -> Vec<Sample> {
            idx.iter().map(|&i| augment(&data.domain(d)[i], cfg.flip_probability, rng)).collect()
        };
        let src = pick(&mut self.rng, &batch.source, Domain::Source);
        let tgt = pick(&mut self.rng, &batch.target, Domain::Target);
        let refs = pick(&mut self.rng, &batch.reference, Domain::Target);
        let n_lat = ((cfg.latent_fraction * bs as f64).round() as usize).min(bs);
        let n_ref = bs - n_lat;
        let z = if cfg.freeze_z {
            Tensor::zeros(&[bs, cfg.z_dim])
        } else {
            normal_tensor(&mut self.rng, &[bs, cfg.z_dim])
        };
        let z_map = normal_tensor(&mut self.rng, &[n_lat, cfg.z_dim]);

        let img_t = |s: &[Sample]| -> Tensor<f32> { images_to_tensor(&s.iter().map(|s| &s.image).collect::<Vec<_>>()) };
        let x_t = img_t(&src);
        let y_t = img_t(&tgt);
        let ref_t = img_t(&refs[..n_ref]);
        let src_dom = vec![Domain::Source; bs];
        let tgt_dom = vec![Domain::Target; bs];
        let nets = &self.model.nets;

        // Discriminator phase.
        let (adv_d, r1, d_obj) = {
            let s_hat = {
                let mut parts = Vec::new();
                if n_ref > 0 {
                    parts.push(nets.encode_style(&ref_t, &tgt_dom[..n_ref]));
                }
                if n_lat > 0 {
                    parts.push(nets.map_latent(&z_map, &tgt_dom[..n_lat]));
                }
                concat_rows(&parts)
            };
            let fake = nets.generate(&x_t, &s_hat, &z);
            let g = Graph::new();
            let pd = nets.discriminator.store.bind(&g, true);
            let real = g.leaf(y_t.clone(), true);
            let real_logits = nets.discriminator.forward(&pd, real, &tgt_dom);
            let fake_logits = nets.discriminator.forward(&pd, g.constant(fake), &tgt_dom);
            let adv = adversarial_d_loss(real_logits, fake_logits);
            let r1 = r1_penalty(real, real_logits, cfg.r1_gamma);
            let obj = adv.mul_scalar(cfg.lambda_adv).add(r1);
            let vals = (adv.to_f64(), r1.to_f64(), obj.to_f64());
            check_finite(self.step, &[("adv_d", vals.0), ("r1", vals.1)])?;
            let grads = g.grad_tensors(obj, pd.vars());
            self.opt
                .discriminator
                .update(&mut self.model.nets.discriminator.store, &grads);
            vals
        };

        // Generator / encoder / mapping / graph phase.
        let nets = &self.model.nets;
        let g = Graph::new();
        let pg = nets.generator.store.bind(&g, true);
        let pe = nets.style_encoder.store.bind(&g, true);
        let pm = nets.mapping.store.bind(&g, true);
        let pd = nets.discriminator.store.bind(&g, false);
        let x = g.constant(x_t);
        let mut parts = Vec::new();
        if n_ref > 0 {
            parts.push(nets.style_encoder.forward(&pe, g.constant(ref_t.clone()), &tgt_dom[..n_ref]));
        }
        if n_lat > 0 {
            parts.push(nets.mapping.forward(&pm, g.constant(z_map), &tgt_dom[..n_lat]));
        }
        let s_hat = if parts.len() == 1 { parts[0] } else { Var::concat_rows(&parts) };
        let zv = g.constant(z);
        let y_hat = nets.generator.forward(&pg, x, s_hat, zv);
        let adv_g = adversarial_g_loss(nets.discriminator.forward(&pd, y_hat, &tgt_dom));
        let s_tilde = nets.style_encoder.forward(&pe, x, &src_dom);
        let x_cyc = nets.generator.forward(&pg, y_hat, s_tilde, zv);
        let cycle = cycle_loss(x, x_cyc)?;
        let s_rec = nets.style_encoder.forward(&pe, y_hat, &tgt_dom);
        let style = style_loss(s_hat, s_rec)?;

        let mut spatio = None;
        let mut info = None;
        let mut nce_skipped = 0;
        let mut gcn_vars: (Vec<Var<f32>>, Vec<Var<f32>>) = (Vec::new(), Vec::new());
        let want_structure = cfg.lambda_spatio > 0.0 || (cfg.lambda_info > 0.0 && n_ref > 0);
        if want_structure && self.structure_available() {
            let n = self.model.n_classes.expect("checked");
            let seg = self.segmenter.as_ref().expect("checked");
            let ex = self.model.extractor.get();
            let out_masks: Vec<SegMask> = tensor_to_images(&y_hat.value()).iter().map(|im| seg.segment(im)).collect();
            let out_crops = crop_plan(&out_masks.iter().collect::<Vec<_>>(), n, ex.input_size());
            let f_out = object_features(y_hat, &out_crops, ex)?;
            if cfg.lambda_spatio > 0.0 {
                let in_masks = sample_masks(&src, Some(seg)).expect("segmenter available");
                let in_crops = crop_plan(&in_masks.iter().collect::<Vec<_>>(), n, ex.input_size());
                let f_in = object_features(x, &in_crops, ex)?;
                let (l, vin, vout) = self.gcns.loss(&g, f_in, f_out, n, true);
                spatio = Some(l);
                gcn_vars = (vin, vout);
            }
            if cfg.lambda_info > 0.0 && n_ref > 0 {
                let ref_masks = sample_masks(&refs[..n_ref], Some(seg)).expect("segmenter available");
                let ref_crops = crop_plan(&ref_masks.iter().collect::<Vec<_>>(), n, ex.input_size());
                let f_style = object_features(g.constant(ref_t), &ref_crops, ex)?;
                let out_rows: Vec<usize> = (0..n_ref * n).collect();
                let f_out_ref = f_out.index_rows(&out_rows);
                let pairs = batch_pairs(&ref_crops.present(), &out_crops.present()[..n_ref * n], n, cfg.nce_negatives);
                let nce = info_nce_loss(f_style, f_out_ref, &pairs, NceConfig { eta: cfg.nce_eta })?;
                nce_skipped = nce.skipped;
                info = Some(nce.loss);
            }
        }
        let g_obj = generator_objective(
            &g,
            &[
                (cfg.lambda_adv, Some(adv_g)),
                (cfg.lambda_spatio, spatio),
                (cfg.lambda_info, info),
                (cfg.lambda_cycle, Some(cycle)),
                (cfg.lambda_style, Some(style)),
            ],
        );
        let mut metrics = StepMetrics {
            step: self.step + 1,
            adv_d,
            r1,
            d_objective: d_obj,
            adv_g: adv_g.to_f64(),
            cycle: cycle.to_f64(),
            style: style.to_f64(),
            spatio: spatio.map(|v| v.to_f64()),
            info: info.map(|v| v.to_f64()),
            nce_skipped,
            g_objective: g_obj.to_f64(),
            wall_time_s: 0.0,
        };
        check_finite(
            self.step,
            &[
                ("adv_g", metrics.adv_g),
                ("cycle", metrics.cycle),
                ("style", metrics.style),
                ("spatio", metrics.spatio.unwrap_or(0.0)),
                ("info", metrics.info.unwrap_or(0.0)),
            ],
        )?;

        let mut wrt: Vec<Var<f32>> = Vec::new();
        let groups = [pg.vars().len(), pe.vars().len(), pm.vars().len(), gcn_vars.0.len(), gcn_vars.1.len()];
        wrt.extend_from_slice(pg.vars());
        wrt.extend_from_slice(pe.vars());
        wrt.extend_from_slice(pm.vars());
        wrt.extend_from_slice(&gcn_vars.0);
        wrt.extend_from_slice(&gcn_vars.1);
        let mut grads = g.grad_tensors(g_obj, &wrt).into_iter();
        let mut take = |n: usize| -> Vec<_> { grads.by_ref().take(n).collect() };
        let (gg, ge, gm, gi, go) = (take(groups[0]), take(groups[1]), take(groups[2]), take(groups[3]), take(groups[4]));
        drop(g);
        let nets = &mut self.model.nets;
        self.opt.generator.update(&mut nets.generator.store, &gg);
        self.opt.style_encoder.update(&mut nets.style_encoder.store, &ge);
        self.opt.mapping.update(&mut nets.mapping.store, &gm);
        if !gi.is_empty() {
            self.opt.gcn_in.update(&mut self.gcns.input.store, &gi);
        }
        if let (Some(out), Some(opt)) = (self.gcns.output.as_mut(), self.opt.gcn_out.as_mut()) {
            if !go.is_empty() {
                opt.update(&mut out.store, &go);
            }
        }
        self.step += 1;
        metrics.wall_time_s = start.elapsed().as_secs_f64();
        Ok(metrics)
    }

    /// Trains until `config.iterations`, writing checkpoints and the metrics
    /// log into `out_dir` when given.
    pub fn run(&mut self, data: &Dataset, held_out: &Dataset, out_dir: Option<&Path>) -> Result<Vec<StepMetrics>> {
        let cfg = self.model.config.clone();
        let mut log = match out_dir {
            Some(dir) => Some(MetricsLog::open(dir, self.step)?),
            None => None,
        };
        let mut history = Vec::new();
        while self.step < cfg.iterations {
            let m = self.train_step(data)?;
            if let Some(l) = log.as_mut() {
                l.write(&serde_json::to_value(&m)?)?;
            }
            if self.step.is_multiple_of(100) {
                log::info!(
                    "step {} adv_d {:.4} adv_g {:.4} cycle {:.4} style {:.4} spatio {:?} info {:?} ({:.2}s)",
                    m.step,
                    m.adv_d,
                    m.adv_g,
                    m.cycle,
                    m.style,
                    m.spatio,
                    m.info,
                    m.wall_time_s
                );
            }
            history.push(m);
            if cfg.eval_every > 0 && self.step.is_multiple_of(cfg.eval_every) && !held_out.domain(Domain::Source).is_empty() {
                let k = cfg.ndb_k.min(data.domain(Domain::Target).len());
                let report = self.model.evaluate(
                    data,
                    held_out,
                    cfg.eval_samples,
                    &NdbConfig {
                        k,
                        seed: cfg.seed,
                        ..Default::default()
                    },
                )?;
                if let Some(l) = log.as_mut() {
                    l.write(&serde_json::json!({ "step": self.step, "eval": report }))?;
                }
            }
            if let Some(dir) = out_dir {
                if (cfg.checkpoint_every > 0 && self.step.is_multiple_of(cfg.checkpoint_every)) || self.step == cfg.iterations {
                    self.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        Ok(history)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut entries = Vec::new();
        let mut tensors = BTreeMap::new();
        let mut steps = BTreeMap::new();
        let mut add_group = |group: &str, store: &ParamStore<f32>, opt: Option<&Adam<f32>>| {
            for (i, p) in store.iter().enumerate() {
                let mut put = |kind: &str, t: &Tensor<f32>| {
                    let name = format!("{group}/{kind}/{}", p.name);
                    entries.push(TensorEntry {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                    });
                    tensors.insert(name, t.clone());
                };
                put("param", &p.value);
                if let Some(o) = opt {
                    put("adam_m", &o.m[i]);
                    put("adam_v", &o.v[i]);
                }
            }
            if let Some(o) = opt {
                steps.insert(group.to_string(), o.step);
            }
        };
        let nets = &self.model.nets;
        add_group("generator", &nets.generator.store, Some(&self.opt.generator));
        add_group("style_encoder", &nets.style_encoder.store, Some(&self.opt.style_encoder));
        add_group("mapping", &nets.mapping.store, Some(&self.opt.mapping));
        add_group("discriminator", &nets.discriminator.store, Some(&self.opt.discriminator));
        add_group("gcn_in", &self.gcns.input.store, Some(&self.opt.gcn_in));
        if let (Some(out), Some(opt)) = (&self.gcns.output, &self.opt.gcn_out) {
            add_group("gcn_out", &out.store, Some(opt));
        }
        let extractor = match &self.model.extractor {
            ExtractorState::Toy(t) => {
                add_group("extractor", &t.store, None);
                Some(t.config.clone())
            }
            _ => None,
        };
        Ok(Checkpoint {
            header: Header {
                format_version: FORMAT_VERSION,
                iteration: self.step,
                config: self.model.config.clone(),
                n_classes: self.model.n_classes,
                rng: rng_state(&self.rng),
                extractor,
                optimizer_steps: steps,
                tensors: entries,
            },
            tensors,
        })
    }

    /// Rebuilds the full training state. Plugins named in the stored config
    /// must be registered in `registry`.
    pub fn from_checkpoint(ckpt: &Checkpoint, registry: &PluginRegistry) -> Result<Self> {
        let h = &ckpt.header;
        let cfg = &h.config;
        let model = Model::from_checkpoint(ckpt, registry)?;
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let mut gcns = GcnPair::new(cfg.gcn_config(model.extractor.get().dim()), cfg.share_gcn_params, &mut dummy)?;
        load_store(ckpt, "gcn_in", &mut gcns.input.store)?;
        if let Some(out) = gcns.output.as_mut() {
            load_store(ckpt, "gcn_out", &mut out.store)?;
        }
        let nets = &model.nets;
        let opt = Optimizers {
            generator: load_adam(ckpt, "generator", &nets.generator.store, cfg, cfg.lr_g)?,
            style_encoder: load_adam(ckpt, "style_encoder", &nets.style_encoder.store, cfg, cfg.lr_e)?,
            mapping: load_adam(ckpt, "mapping", &nets.mapping.store, cfg, cfg.lr_mapping)?,
            discriminator: load_adam(ckpt, "discriminator", &nets.discriminator.store, cfg, cfg.lr_d)?,
            gcn_in: load_adam(ckpt, "gcn_in", &gcns.input.store, cfg, cfg.lr_g)?,
            gcn_out: match &gcns.output {
                Some(out) => Some(load_adam(ckpt, "gcn_out", &out.store, cfg, cfg.lr_g)?),
                None => None,
            },
        };
        let segmenter = resolve_segmenter(cfg, model.n_classes, registry)?;
        Ok(Self {
            model,
            gcns,
            opt,
            step: h.iteration,
            rng: restore_rng(&h.rng)?,
            segmenter,
        })
    }

    /// Replaces the run length (used to continue a finished run).
    pub fn set_iterations(&mut self, iterations: u64) {
        self.model.config.iterations = iterations;
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.sgc";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.txt";

fn concat_rows(parts: &[Tensor<f32>]) -> Tensor<f32> {
    let cols = parts[0].dim(1);
    let rows: usize = parts.iter().map(|p| p.dim(0)).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::from_vec(&[rows, cols], data)
}

fn check_finite(step: u64, values: &[(&str, f64)]) -> Result<()> {
    if values.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let dump = values
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ");
    Err(Error::Numeric(format!("non-finite loss at step {}: {dump}", step + 1)))
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    RngState {
        seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(s: &RngState) -> Result<ChaCha8Rng> {
    let bad = || Error::Format("invalid rng state".into());
    if s.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos.parse::<u128>().map_err(|_| bad())?);
    Ok(rng)
}

fn load_store(ckpt: &Checkpoint, group: &str, store: &mut ParamStore<f32>) -> Result<()> {
    let values = store
        .iter()
        .map(|p| ckpt.tensor(&format!("{group}/param/{}", p.name)).cloned())
        .collect::<Result<Vec<_>>>()?;
    store.load_values(values)
}

fn load_adam(ckpt: &Checkpoint, group: &str, store: &ParamStore<f32>, cfg: &TrainConfig, lr: f64) -> Result<Adam<f32>> {
    let mut a = adam(store, cfg, lr);
    a.step = *ckpt
        .header
        .optimizer_steps
        .get(group)
        .ok_or_else(|| Error::Format(format!("no optimizer state for {group}")))?;
    for (i, p) in store.iter().enumerate() {
        a.m[i] = ckpt.tensor(&format!("{group}/adam_m/{}", p.name))?.clone();
        a.v[i] = ckpt.tensor(&format!("{group}/adam_v/{}", p.name))?.clone();
    }
    Ok(a)
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint, registry: &PluginRegistry) -> Result<Self> {
        let h = &ckpt.header;
        let cfg = h.config.clone();
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let mut nets = init_networks::<f32>(&cfg.net_config(), &mut dummy)?;
        load_store(ckpt, "generator", &mut nets.generator.store)?;
        load_store(ckpt, "style_encoder", &mut nets.style_encoder.store)?;
        load_store(ckpt, "mapping", &mut nets.mapping.store)?;
        load_store(ckpt, "discriminator", &mut nets.discriminator.store)?;
        let extractor = match (PluginKey::parse(&cfg.extractor), &h.extractor) {
            (PluginKey::Plugin(name), _) => ExtractorState::Plugin(name.clone(), registry.extractor(&name)?),
            (PluginKey::Builtin(b), _) if b == "mean_rgb" => ExtractorState::MeanRgb,
            (PluginKey::Builtin(_), Some(cc)) => {
                let mut t = ToyContrastiveExtractor::init(cc.clone(), &mut dummy);
                load_store(ckpt, "extractor", &mut t.store)?;
                ExtractorState::Toy(Arc::new(t))
            }
            (PluginKey::Builtin(b), None) => {
                return Err(Error::Format(format!("checkpoint lacks the weights of extractor {b}")))
            }
        };
        Ok(Self {
            config: cfg,
            nets,
            extractor,
            n_classes: h.n_classes,
        })
    }

    pub fn load(path: &Path, registry: &PluginRegistry) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, registry)
    }
}

/// Append-only JSON-lines log. Reopening at step `k` drops records of later
/// steps so a resumed run does not duplicate them.
pub struct MetricsLog {
    file: fs::File,
}

impl MetricsLog {
    pub fn open(dir: &Path, resume_step: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path: PathBuf = dir.join(METRICS_FILE);
        let kept: Vec<String> = if resume_step > 0 && path.exists() {
            fs::read_to_string(&path)
                .map_err(|e| Error::io(&path, e))?
                .lines()
                .filter(|l| {
                    serde_json::from_str::<serde_json::Value>(l)
                        .ok()
                        .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                        .is_some_and(|s| s <= resume_step)
                })
                .map(str::to_string)
                .collect()
        } else {
            Vec::new()
        };
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for l in kept {
            writeln!(file, "{l}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { file })
    }

    pub fn write(&mut self, v: &serde_json::Value) -> Result<()> {
        writeln!(self.file, "{v}").map_err(|e| Error::io("metrics log", e))
    }
}

/// Runs a complete training job into `out_dir`: writes the resolved config,
/// then trains (from scratch or from `resume`) and returns the step history.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
    registry: &PluginRegistry,
) -> Result<(Trainer, Vec<StepMetrics>)> {
    let (train_set, held_out) = dataset.split(config.held_out_fraction)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut t = Trainer::from_checkpoint(&ckpt, registry)?;
            t.set_iterations(config.iterations);
            t.model.config.checkpoint_every = config.checkpoint_every;
            t
        }
        None => Trainer::new(config, &train_set, registry)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let snap = out_dir.join(CONFIG_SNAPSHOT);
    fs::write(&snap, trainer.config().to_text()).map_err(|e| Error::io(&snap, e))?;
    let history = trainer.run(&train_set, &held_out, Some(out_dir))?;
    Ok((trainer, history))
}
