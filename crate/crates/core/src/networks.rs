//! Generator, style encoder, mapping network and discriminator.
//!
//! All convolutional trunks are built from pre-activation residual blocks
//! whose output is `(residual + shortcut) / sqrt(2)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Domain;
use crate::error::{Error, Result};
use crate::nn::{lrelu_gain, AdaIn, Bound, EqConv2d, EqLinear, ParamStore, LRELU_SLOPE, NORM_EPS};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub resolution: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub style_dim: usize,
    pub z_dim: usize,
    pub mapping_hidden: usize,
    pub mapping_layers: usize,
    pub down_blocks: usize,
    pub intermediate_blocks: usize,
    pub encoder_units: usize,
    /// Generator down blocks stop halving once the feature map reaches this size.
    pub bottleneck_size: usize,
    /// Encoder / discriminator units stop halving at this size.
    pub head_size: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            base_width: 32,
            max_width: 256,
            style_dim: 64,
            z_dim: 16,
            mapping_hidden: 128,
            mapping_layers: 8,
            down_blocks: 4,
            intermediate_blocks: 4,
            encoder_units: 6,
            bottleneck_size: 16,
            head_size: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("resolution", self.resolution),
            ("base_width", self.base_width),
            ("max_width", self.max_width),
            ("style_dim", self.style_dim),
            ("z_dim", self.z_dim),
            ("mapping_hidden", self.mapping_hidden),
            ("mapping_layers", self.mapping_layers),
            ("bottleneck_size", self.bottleneck_size),
            ("head_size", self.head_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.max_width < self.base_width {
            return Err(Error::Config("max_width must be >= base_width".into()));
        }
        if !self.intermediate_blocks.is_multiple_of(2) {
            return Err(Error::Config("intermediate_blocks must be even".into()));
        }
        Ok(())
    }
}

/// Layer kinds recorded at construction, for architecture inspection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerKind {
    Conv { kernel: usize },
    Linear,
    InstanceNorm,
    AdaIn,
    LeakyRelu { slope: f64 },
    AvgPool,
    Upsample,
    GlobalPool,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Norm {
    None,
    Instance,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Resample {
    Keep,
    Down,
    Up,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm: Norm,
    ada1: Option<AdaIn>,
    ada2: Option<AdaIn>,
    conv1: EqConv2d,
    conv2: EqConv2d,
    skip: Option<EqConv2d>,
    resample: Resample,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<E: Element>(
        store: &mut ParamStore<E>,
        arch: &mut Vec<LayerKind>,
        name: &str,
        cin: usize,
        cout: usize,
        norm: Norm,
        resample: Resample,
        cond_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // Down blocks widen in their second conv, up blocks in their first.
        let mid = if resample == Resample::Up { cout } else { cin };
        let g = lrelu_gain();
        let ada = |store: &mut ParamStore<E>, tag: &str, ch: usize, rng: &mut _| {
            (norm == Norm::Adaptive).then(|| AdaIn::new(store, &format!("{name}.{tag}"), cond_dim, ch, rng))
        };
        let ada1 = ada(store, "adain1", cin, rng);
        let conv1 = EqConv2d::new(store, &format!("{name}.conv1"), cin, mid, (3, 3), true, g, rng);
        let ada2 = ada(store, "adain2", mid, rng);
        let conv2 = EqConv2d::new(store, &format!("{name}.conv2"), mid, cout, (3, 3), true, g, rng);
        let skip = (cin != cout).then(|| EqConv2d::new(store, &format!("{name}.skip"), cin, cout, (1, 1), false, 1.0, rng));
        let norm_kind = match norm {
            Norm::None => None,
            Norm::Instance => Some(LayerKind::InstanceNorm),
            Norm::Adaptive => Some(LayerKind::AdaIn),
        };
        for _ in 0..2 {
            arch.extend(norm_kind);
            arch.push(LayerKind::LeakyRelu { slope: LRELU_SLOPE });
            arch.push(LayerKind::Conv { kernel: 3 });
        }
        match resample {
            Resample::Down => arch.push(LayerKind::AvgPool),
            Resample::Up => arch.push(LayerKind::Upsample),
            Resample::Keep => {}
        }
        if skip.is_some() {
            arch.push(LayerKind::Conv { kernel: 1 });
        }
        Self {
            norm,
            ada1,
            ada2,
            conv1,
            conv2,
            skip,
            resample,
        }
    }

    fn normalize<'g, E: Element>(
        &self,
        p: &Bound<'g, E>,
        ada: &Option<AdaIn>,
        x: Var<'g, E>,
        cond: Option<Var<'g, E>>,
    ) -> Var<'g, E> {
        match self.norm {
            Norm::None => x,
            Norm::Instance => x.instance_norm(NORM_EPS),
            Norm::Adaptive => ada
                .as_ref()
                .expect("adaptive block has AdaIN layers")
                .forward(p, x, cond.expect("adaptive block needs a condition")),
        }
    }

    fn forward<'g, E: Element>(&self, p: &Bound<'g, E>, x: Var<'g, E>, cond: Option<Var<'g, E>>) -> Var<'g, E> {
        let mut h = self.normalize(p, &self.ada1, x, cond).leaky_relu(LRELU_SLOPE);
        match self.resample {
            Resample::Down => h = h.avg_pool2(),
            Resample::Up => h = h.upsample2(),
            Resample::Keep => {}
        }
        h = self.conv1.forward(p, h);
        h = self.normalize(p, &self.ada2, h, cond).leaky_relu(LRELU_SLOPE);
        h = self.conv2.forward(p, h);

        let mut s = x;
        if self.resample == Resample::Up {
            s = s.upsample2();
        }
        if let Some(skip) = &self.skip {
            s = skip.forward(p, s);
        }
        if self.resample == Resample::Down {
            s = s.avg_pool2();
        }
        h.add(s).mul_scalar(std::f64::consts::FRAC_1_SQRT_2)
    }
}

/// Picks row `b * k + sel[b]` of a `[B, k * w]` variable laid out as k
/// consecutive width-`w` blocks per row.
fn select_branch<'g, E: Element>(x: Var<'g, E>, k: usize, sel: &[usize]) -> Var<'g, E> {
    let s = x.shape();
    let (b, w) = (s[0], s[1] / k);
    assert_eq!(b, sel.len(), "one branch index per sample");
    let idx: Vec<usize> = sel.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    x.reshape(&[b * k, w]).index_rows(&idx)
}

fn domain_indices(domains: &[Domain]) -> Vec<usize> {
    domains.iter().map(|d| d.index()).collect()
}

// ---- generator -------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Generator<E> {
    pub store: ParamStore<E>,
    pub arch: Vec<LayerKind>,
    stem: EqConv2d,
    encode: Vec<ResBlock>,
    decode: Vec<ResBlock>,
    out_norm: AdaIn,
    to_rgb: EqConv2d,
}

impl<E: Element> Generator<E> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mut arch = vec![LayerKind::Conv { kernel: 3 }];
        let cond = cfg.style_dim + cfg.z_dim;
        let stem = EqConv2d::new(&mut store, "g.stem", 3, cfg.base_width, (3, 3), true, 1.0, rng);

        // (cin, cout, resampled) per down block, mirrored by the up blocks.
        let mut plan = Vec::new();
        let (mut size, mut width) = (cfg.resolution, cfg.base_width);
        for _ in 0..cfg.down_blocks {
            let down = size > cfg.bottleneck_size && size % 2 == 0;
            let cout = if down { (width * 2).min(cfg.max_width) } else { width };
            plan.push((width, cout, down));
            if down {
                size /= 2;
            }
            width = cout;
        }
        let mut encode = Vec::new();
        for (i, &(cin, cout, down)) in plan.iter().enumerate() {
            let rs = if down { Resample::Down } else { Resample::Keep };
            encode.push(ResBlock::new(&mut store, &mut arch, &format!("g.down{i}"), cin, cout, Norm::Instance, rs, cond, rng));
        }
        let half = cfg.intermediate_blocks / 2;
        for i in 0..half {
            encode.push(ResBlock::new(&mut store, &mut arch, &format!("g.mid{i}"), width, width, Norm::Instance, Resample::Keep, cond, rng));
        }
        let mut decode = Vec::new();
        for i in half..cfg.intermediate_blocks {
            decode.push(ResBlock::new(&mut store, &mut arch, &format!("g.mid{i}"), width, width, Norm::Adaptive, Resample::Keep, cond, rng));
        }
        for (i, &(cin, cout, down)) in plan.iter().enumerate().rev() {
            let rs = if down { Resample::Up } else { Resample::Keep };
            decode.push(ResBlock::new(&mut store, &mut arch, &format!("g.up{i}"), cout, cin, Norm::Adaptive, rs, cond, rng));
        }
        let out_norm = AdaIn::new(&mut store, "g.out_norm", cond, cfg.base_width, rng);
        let to_rgb = EqConv2d::new(&mut store, "g.to_rgb", cfg.base_width, 3, (1, 1), true, lrelu_gain(), rng);
        arch.extend([
            LayerKind::AdaIn,
            LayerKind::LeakyRelu { slope: LRELU_SLOPE },
            LayerKind::Conv { kernel: 1 },
            LayerKind::Tanh,
        ]);
        Self {
            store,
            arch,
            stem,
            encode,
            decode,
            out_norm,
            to_rgb,
        }
    }

    /// `x [B, 3, H, W]`, style `s [B, style_dim]`, latent `z [B, z_dim]`.
    pub fn forward<'g>(&self, p: &Bound<'g, E>, x: Var<'g, E>, s: Var<'g, E>, z: Var<'g, E>) -> Var<'g, E> {
        let cond = Var::concat_last(&[s, z]);
        let mut h = self.stem.forward(p, x);
        for blk in &self.encode {
            h = blk.forward(p, h, None);
        }
        for blk in &self.decode {
            h = blk.forward(p, h, Some(cond));
        }
        let h = self.out_norm.forward(p, h, cond).leaky_relu(LRELU_SLOPE);
        self.to_rgb.forward(p, h).tanh()
    }
}

// ---- style encoder and discriminator trunk ---------------------------------------

#[derive(Clone, Debug)]
struct Trunk {
    stem: EqConv2d,
    units: Vec<ResBlock>,
    width: usize,
    size: usize,
}

impl Trunk {
    fn new<E: Element>(store: &mut ParamStore<E>, arch: &mut Vec<LayerKind>, name: &str, cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        arch.push(LayerKind::Conv { kernel: 3 });
        let stem = EqConv2d::new(store, &format!("{name}.stem"), 3, cfg.base_width, (3, 3), true, 1.0, rng);
        let (mut size, mut width) = (cfg.resolution, cfg.base_width);
        let mut units = Vec::new();
        for i in 0..cfg.encoder_units {
            let down = size > cfg.head_size && size % 2 == 0;
            let cout = if down { (width * 2).min(cfg.max_width) } else { width };
            let rs = if down { Resample::Down } else { Resample::Keep };
            units.push(ResBlock::new(store, arch, &format!("{name}.unit{i}"), width, cout, Norm::None, rs, 0, rng));
            if down {
                size /= 2;
            }
            width = cout;
        }
        arch.push(LayerKind::LeakyRelu { slope: LRELU_SLOPE });
        Self { stem, units, width, size }
    }

    fn forward<'g, E: Element>(&self, p: &Bound<'g, E>, x: Var<'g, E>) -> Var<'g, E> {
        let mut h = self.stem.forward(p, x);
        for u in &self.units {
            h = u.forward(p, h, None);
        }
        h.leaky_relu(LRELU_SLOPE)
    }
}

#[derive(Clone, Debug)]
pub struct StyleEncoder<E> {
    pub store: ParamStore<E>,
    pub arch: Vec<LayerKind>,
    trunk: Trunk,
    heads: [EqLinear; 2],
}

impl<E: Element> StyleEncoder<E> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mut arch = Vec::new();
        let trunk = Trunk::new(&mut store, &mut arch, "e", cfg, rng);
        arch.extend([LayerKind::GlobalPool, LayerKind::Linear, LayerKind::Linear]);
        let heads = [0, 1].map(|k| EqLinear::new(&mut store, &format!("e.head{k}"), trunk.width, cfg.style_dim, lrelu_gain(), rng));
        Self {
            store,
            arch,
            trunk,
            heads,
        }
    }

    /// Style vectors `[B, style_dim]`, one head per domain.
    pub fn forward<'g>(&self, p: &Bound<'g, E>, x: Var<'g, E>, domains: &[Domain]) -> Var<'g, E> {
        let h = self.trunk.forward(p, x).spatial_mean();
        let both = Var::concat_last(&[self.heads[0].forward(p, h), self.heads[1].forward(p, h)]);
        select_branch(both, 2, &domain_indices(domains))
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<E> {
    pub store: ParamStore<E>,
    pub arch: Vec<LayerKind>,
    trunk: Trunk,
    fc: EqLinear,
}

impl<E: Element> Discriminator<E> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mut arch = Vec::new();
        let trunk = Trunk::new(&mut store, &mut arch, "d", cfg, rng);
        arch.push(LayerKind::Linear);
        let fan_in = trunk.width * trunk.size * trunk.size;
        let fc = EqLinear::new(&mut store, "d.fc", fan_in, 2, lrelu_gain(), rng);
        Self { store, arch, trunk, fc }
    }

    /// One logit per sample, taken from the branch of its domain.
    pub fn forward<'g>(&self, p: &Bound<'g, E>, x: Var<'g, E>, domains: &[Domain]) -> Var<'g, E> {
        let h = self.trunk.forward(p, x);
        let b = h.shape()[0];
        let flat = h.reshape(&[b, self.trunk.width * self.trunk.size * self.trunk.size]);
        select_branch(self.fc.forward(p, flat), 2, &domain_indices(domains)).reshape(&[b])
    }

    /// Both branch logits `[B, 2]`.
    pub fn logits<'g>(&self, p: &Bound<'g, E>, x: Var<'g, E>) -> Var<'g, E> {
        let h = self.trunk.forward(p, x);
        let b = h.shape()[0];
        self.fc
            .forward(p, h.reshape(&[b, self.trunk.width * self.trunk.size * self.trunk.size]))
    }
}

#[derive(Clone, Debug)]
pub struct MappingNetwork<E> {
    pub store: ParamStore<E>,
    pub arch: Vec<LayerKind>,
    trunk: Vec<EqLinear>,
    heads: [EqLinear; 2],
}

impl<E: Element> MappingNetwork<E> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mut arch = Vec::new();
        let mut din = cfg.z_dim;
        let mut trunk = Vec::new();
        for i in 0..cfg.mapping_layers {
            let gain = if i == 0 { 1.0 } else { lrelu_gain() };
            trunk.push(EqLinear::new(&mut store, &format!("m.fc{i}"), din, cfg.mapping_hidden, gain, rng));
            arch.extend([LayerKind::Linear, LayerKind::LeakyRelu { slope: LRELU_SLOPE }]);
            din = cfg.mapping_hidden;
        }
        let heads = [0, 1].map(|k| EqLinear::new(&mut store, &format!("m.head{k}"), din, cfg.style_dim, lrelu_gain(), rng));
        arch.extend([LayerKind::Linear, LayerKind::Linear]);
        Self {
            store,
            arch,
            trunk,
            heads,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g, E>, z: Var<'g, E>, domains: &[Domain]) -> Var<'g, E> {
        let mut h = z;
        for fc in &self.trunk {
            h = fc.forward(p, h).leaky_relu(LRELU_SLOPE);
        }
        let both = Var::concat_last(&[self.heads[0].forward(p, h), self.heads[1].forward(p, h)]);
        select_branch(both, 2, &domain_indices(domains))
    }
}

/// The four trainable networks.
#[derive(Clone, Debug)]
pub struct Networks<E> {
    pub config: NetConfig,
    pub generator: Generator<E>,
    pub style_encoder: StyleEncoder<E>,
    pub mapping: MappingNetwork<E>,
    pub discriminator: Discriminator<E>,
}

/// Builds all networks with N(0, 1) raw weights, zero biases and unit AdaIN
/// scale biases.
pub fn init_networks<E: Element>(config: &NetConfig, rng: &mut impl Rng) -> Result<Networks<E>> {
    config.validate()?;
    Ok(Networks {
        config: config.clone(),
        generator: Generator::new(config, rng),
        style_encoder: StyleEncoder::new(config, rng),
        mapping: MappingNetwork::new(config, rng),
        discriminator: Discriminator::new(config, rng),
    })
}

impl<E: Element> Networks<E> {
    pub fn stores(&self) -> [(&'static str, &ParamStore<E>); 4] {
        [
            ("generator", &self.generator.store),
            ("style_encoder", &self.style_encoder.store),
            ("mapping", &self.mapping.store),
            ("discriminator", &self.discriminator.store),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.stores().iter().all(|(_, s)| s.all_finite())
    }

    /// `G(x, s, z)` without gradient tracking.
    pub fn generate(&self, x: &Tensor<E>, s: &Tensor<E>, z: &Tensor<E>) -> Tensor<E> {
        let g = Graph::new();
        g.no_grad(|| {
            let p = self.generator.store.bind(&g, false);
            let y = self.generator.forward(&p, g.constant(x.clone()), g.constant(s.clone()), g.constant(z.clone()));
            (*y.value()).clone()
        })
    }

    pub fn encode_style(&self, x: &Tensor<E>, domains: &[Domain]) -> Tensor<E> {
        let g = Graph::new();
        g.no_grad(|| {
            let p = self.style_encoder.store.bind(&g, false);
            (*self.style_encoder.forward(&p, g.constant(x.clone()), domains).value()).clone()
        })
    }

    pub fn map_latent(&self, z: &Tensor<E>, domains: &[Domain]) -> Tensor<E> {
        let g = Graph::new();
        g.no_grad(|| {
            let p = self.mapping.store.bind(&g, false);
            (*self.mapping.forward(&p, g.constant(z.clone()), domains).value()).clone()
        })
    }

    pub fn discriminate(&self, x: &Tensor<E>, domains: &[Domain]) -> Tensor<E> {
        let g = Graph::new();
        g.no_grad(|| {
            let p = self.discriminator.store.bind(&g, false);
            (*self.discriminator.forward(&p, g.constant(x.clone()), domains).value()).clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mini() -> NetConfig {
        NetConfig {
            resolution: 8,
            base_width: 4,
            max_width: 8,
            style_dim: 6,
            z_dim: 3,
            mapping_hidden: 5,
            mapping_layers: 2,
            bottleneck_size: 4,
            head_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn generator_preserves_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nets = init_networks::<f32>(&mini(), &mut rng).unwrap();
        let x = Tensor::from_vec(&[2, 3, 8, 8], (0..384).map(|i| ((i as f32) * 0.1).sin()).collect());
        let s = Tensor::full(&[2, 6], 0.3);
        let z = Tensor::full(&[2, 3], -0.2);
        let y = nets.generate(&x, &s, &z);
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
        let st = nets.encode_style(&x, &[Domain::Source, Domain::Target]);
        assert_eq!(st.shape(), &[2, 6]);
        let d = nets.discriminate(&x, &[Domain::Source, Domain::Target]);
        assert_eq!(d.shape(), &[2]);
    }
}
