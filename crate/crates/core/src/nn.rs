//! Parameter storage and the equalized-learning-rate layers shared by every
//! network.
//!
//! Raw weights are stored as draws from N(0, 1) and multiplied at run time by
//! `gain / sqrt(fan_in)`, so every weight sees the same effective step size
//! under Adam.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::tensor::{cst, Element, Tensor};

/// Negative slope of every leaky ReLU in the model.
pub const LRELU_SLOPE: f64 = 0.2;

/// He gain for layers whose input went through a leaky ReLU.
pub fn lrelu_gain() -> f64 {
    (2.0 / (1.0 + LRELU_SLOPE * LRELU_SLOPE)).sqrt()
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Convolution, fully-connected or affine-transform weight (N(0, 1) at init).
    Weight,
    /// Additive bias (zero at init).
    Bias,
    /// Bias of an AdaIN scaling vector (one at init).
    AdaInScaleBias,
}

#[derive(Clone, Debug)]
pub struct Param<E> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Arc<Tensor<E>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(i: usize) -> Self {
        Self(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered parameter list of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E> {
    params: Vec<Param<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<E>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| cst(rng.sample::<f64, _>(StandardNormal))).collect();
        self.add(name, ParamKind::Weight, Tensor::from_vec(shape, data))
    }

    pub fn add_const(&mut self, name: impl Into<String>, kind: ParamKind, shape: &[usize], v: f64) -> ParamId {
        self.add(name, kind, Tensor::full(shape, cst(v)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Param<E> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor<E> {
        Arc::make_mut(&mut self.params[index].value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Puts every parameter on `graph`; gradients are tracked when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph<E>, trainable: bool) -> Bound<'g, E> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| graph.leaf_arc(p.value.clone(), trainable))
                .collect(),
        }
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
        }
    }

    /// Replaces values by position; shapes must agree.
    pub fn load_values(&mut self, values: Vec<Tensor<E>>) -> crate::Result<()> {
        if values.len() != self.params.len() {
            return Err(crate::Error::Format(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(crate::Error::Format(format!(
                    "parameter {} has shape {:?}, stored {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = Arc::new(v);
        }
        Ok(())
    }
}

/// Parameters of one network placed on a graph.
pub struct Bound<'g, E> {
    vars: Vec<Var<'g, E>>,
}

impl<'g, E: Element> Bound<'g, E> {
    pub fn get(&self, id: ParamId) -> Var<'g, E> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, E>] {
        &self.vars
    }
}

/// Stride-1 convolution with equalized learning rate.
#[derive(Clone, Debug)]
pub struct EqConv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    scale: f64,
    pad: (usize, usize),
}

impl EqConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[cout, cin, kernel.0, kernel.1], rng);
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), ParamKind::Bias, &[cout], 0.0));
        Self {
            weight,
            bias,
            scale: gain / ((cin * kernel.0 * kernel.1) as f64).sqrt(),
            pad: (kernel.0 / 2, kernel.1 / 2),
        }
    }

    pub fn forward<'g, E: Element>(&self, p: &Bound<'g, E>, x: Var<'g, E>) -> Var<'g, E> {
        let w = p.get(self.weight).mul_scalar(self.scale);
        let y = x.conv2d(w, self.pad);
        match self.bias {
            Some(b) => y.add_bias(p.get(b)),
            None => y,
        }
    }
}

/// Fully-connected layer with equalized learning rate; weight stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct EqLinear {
    pub weight: ParamId,
    pub bias: ParamId,
    scale: f64,
}

impl EqLinear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_bias(store, name, din, dout, gain, ParamKind::Bias, 0.0, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_bias<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
        bias_kind: ParamKind,
        bias_init: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[din, dout], rng);
        let bias = store.add_const(format!("{name}.bias"), bias_kind, &[dout], bias_init);
        Self {
            weight,
            bias,
            scale: gain / (din as f64).sqrt(),
        }
    }

    pub fn forward<'g, E: Element>(&self, p: &Bound<'g, E>, x: Var<'g, E>) -> Var<'g, E> {
        let w = p.get(self.weight).mul_scalar(self.scale);
        x.matmul(w).add_bias(p.get(self.bias))
    }
}

/// Adaptive instance normalisation: instance-normalise, then scale and shift
/// each channel by affine functions of a conditioning vector.
#[derive(Clone, Debug)]
pub struct AdaIn {
    pub gamma: EqLinear,
    pub beta: EqLinear,
}

impl AdaIn {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, cond_dim: usize, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            gamma: EqLinear::with_bias(
                store,
                &format!("{name}.gamma"),
                cond_dim,
                channels,
                1.0,
                ParamKind::AdaInScaleBias,
                1.0,
                rng,
            ),
            beta: EqLinear::new(store, &format!("{name}.beta"), cond_dim, channels, 1.0, rng),
        }
    }

    pub fn forward<'g, E: Element>(&self, p: &Bound<'g, E>, x: Var<'g, E>, cond: Var<'g, E>) -> Var<'g, E> {
        let scale = self.gamma.forward(p, cond);
        let shift = self.beta.forward(p, cond);
        x.instance_norm(NORM_EPS).modulate(scale, shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn modulated_instance_norm_has_requested_channel_statistics() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(
            &[1, 2, 4, 4],
            (0..32).map(|i| ((i * 7 % 11) as f64).sin() * 3.0 + 1.0).collect(),
        ));
        let x = x.instance_norm(0.0);
        let scale = g.constant(Tensor::from_vec(&[1, 2], vec![1.7, -0.4]));
        let shift = g.constant(Tensor::from_vec(&[1, 2], vec![0.3, 2.0]));
        let y = x.modulate(scale, shift).value();
        for (c, (a, b)) in [(1.7, 0.3), (-0.4, 2.0)].into_iter().enumerate() {
            let p = &y.data()[c * 16..(c + 1) * 16];
            let m = p.iter().sum::<f64>() / 16.0;
            let v = p.iter().map(|e| (e - m).powi(2)).sum::<f64>() / 16.0;
            assert!((m - b).abs() < 1e-3);
            assert!((v - a * a).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_layers_start_with_zero_bias_and_unit_normal_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let lin = EqLinear::new(&mut store, "fc", 200, 100, 1.0, &mut rng);
        let w = &store.get(lin.weight).value;
        let n = w.numel() as f64;
        let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let sd = (w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 1.0).abs() < 0.05);
        assert!(store.get(lin.bias).value.data().iter().all(|&b| b == 0.0));
    }
}
