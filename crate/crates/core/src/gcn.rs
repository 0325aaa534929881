//! Graph convolution over object-feature nodes with a learned, symmetric
//! adjacency, and the structural loss comparing the graphs of an input image
//! and its translation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{lrelu_gain, Bound, EqConv2d, EqLinear, ParamId, ParamStore, LRELU_SLOPE};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub in_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub out_dim: usize,
    /// Channel widths of the 1-D convolutions of the edge scoring network.
    pub phi_widths: Vec<usize>,
    pub phi_kernel: usize,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            in_dim: 128,
            layers: 2,
            hidden: 64,
            out_dim: 32,
            phi_widths: vec![8, 8, 16, 16, 32],
            phi_kernel: 3,
        }
    }
}

impl GcnConfig {
    /// Node widths `d_0, ..., d_L`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim];
        d.extend(std::iter::repeat_n(self.hidden, self.layers.saturating_sub(1)));
        d.push(self.out_dim);
        d
    }
}

/// Edge scoring network: `|q_i - q_j|` treated as a one-channel signal along
/// the feature axis, five 1-D convolutions, one linear layer, sigmoid.
#[derive(Clone, Debug)]
pub struct EdgeScorer {
    convs: Vec<EqConv2d>,
    fc: EqLinear,
    width: usize,
}

impl EdgeScorer {
    fn new<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize, cfg: &GcnConfig, rng: &mut impl Rng) -> Self {
        let mut cin = 1;
        let mut convs = Vec::new();
        for (i, &w) in cfg.phi_widths.iter().enumerate() {
            let gain = if i == 0 { 1.0 } else { lrelu_gain() };
            convs.push(EqConv2d::new(
                store,
                &format!("{name}.conv{i}"),
                cin,
                w,
                (1, cfg.phi_kernel),
                true,
                gain,
                rng,
            ));
            cin = w;
        }
        let fc = EqLinear::new(store, &format!("{name}.fc"), cin * dim, 1, lrelu_gain(), rng);
        Self { convs, fc, width: cin }
    }

    /// Scores for rows of `diffs [P, d]`, shape `[P, 1]`, each in (0, 1).
    pub fn score<'g, E: Element>(&self, p: &Bound<'g, E>, diffs: Var<'g, E>) -> Var<'g, E> {
        let s = diffs.shape();
        let (pairs, d) = (s[0], s[1]);
        let mut h = diffs.abs().reshape(&[pairs, 1, 1, d]);
        for conv in &self.convs {
            h = conv.forward(p, h).leaky_relu(LRELU_SLOPE);
        }
        self.fc.forward(p, h.reshape(&[pairs, self.width * d])).sigmoid()
    }
}

#[derive(Clone, Debug)]
struct GcnLayer {
    theta: ParamId,
    theta_scale: f64,
    scorer: EdgeScorer,
}

/// Stacked graph convolution with per-layer learned adjacency and a final
/// row-wise softmax.
#[derive(Clone, Debug)]
pub struct Gcn<E> {
    pub config: GcnConfig,
    pub store: ParamStore<E>,
    layers: Vec<GcnLayer>,
}

impl<E: Element> Gcn<E> {
    pub fn new(config: GcnConfig, name: &str, rng: &mut impl Rng) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("gcn_layers must be at least 1".into()));
        }
        let mut store = ParamStore::new();
        let dims = config.dims();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let scorer = EdgeScorer::new(&mut store, &format!("{name}.phi{k}"), w[0], &config, rng);
                let theta = store.add_normal(format!("{name}.theta{k}"), &[w[0], w[1]], rng);
                let gain = if k == 0 { 1.0 } else { lrelu_gain() };
                GcnLayer {
                    theta,
                    theta_scale: gain / (w[0] as f64).sqrt(),
                    scorer,
                }
            })
            .collect();
        Ok(Self { config, store, layers })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Effective (scaled) `Θ_k` on the graph.
    pub fn theta<'g>(&self, p: &Bound<'g, E>, k: usize) -> Var<'g, E> {
        p.get(self.layers[k].theta).mul_scalar(self.layers[k].theta_scale)
    }

    /// `A[i, j] = φ_k(|q_i - q_j|)` off the diagonal, `A[i, i] = 1`.
    pub fn adjacency<'g>(&self, p: &Bound<'g, E>, k: usize, q: Var<'g, E>) -> Var<'g, E> {
        let n = q.shape()[0];
        let eye = q.graph().constant(identity(n));
        if n == 1 {
            return eye;
        }
        let scores = self.layers[k].scorer.score(p, q.pairwise_diff());
        scores.reshape(&[n * (n - 1) / 2]).symmetric_fill(n).add(eye)
    }

    /// Softmax-normalised node embeddings `[n, d_L]` of node features `[n, d_0]`.
    pub fn embed<'g>(&self, p: &Bound<'g, E>, q0: Var<'g, E>) -> Var<'g, E> {
        let mut q = q0;
        for k in 0..self.layers.len() {
            let a = self.adjacency(p, k, q);
            q = gcn_layer(q, a, self.theta(p, k));
        }
        q.softmax_last()
    }

    /// Checked variant of [`Gcn::adjacency`] for arbitrary input.
    pub fn try_adjacency<'g>(&self, p: &Bound<'g, E>, k: usize, q: Var<'g, E>) -> Result<Var<'g, E>> {
        if !q.value().is_finite() {
            return Err(Error::Numeric("non-finite node features".into()));
        }
        Ok(self.adjacency(p, k, q))
    }
}

fn identity<E: Element>(n: usize) -> Tensor<E> {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = E::one();
    }
    t
}

/// `ρ(A · Q · Θ)` with leaky ReLU ρ.
pub fn gcn_layer<'g, E: Element>(q: Var<'g, E>, a: Var<'g, E>, theta: Var<'g, E>) -> Var<'g, E> {
    a.matmul(q.matmul(theta)).leaky_relu(LRELU_SLOPE)
}

/// Squared Frobenius distance between the input and output graph embeddings,
/// averaged over the samples of a batch. `q_in` and `q_out` are `[B * n, d]`.
#[allow(clippy::too_many_arguments)]
pub fn spatio_loss<'g, E: Element>(
    q_in: Var<'g, E>,
    q_out: Var<'g, E>,
    n: usize,
    gcn_in: &Gcn<E>,
    p_in: &Bound<'g, E>,
    gcn_out: &Gcn<E>,
    p_out: &Bound<'g, E>,
) -> Var<'g, E> {
    let rows = q_in.shape()[0];
    assert_eq!(q_in.shape(), q_out.shape(), "graph inputs must match");
    assert_eq!(rows % n, 0, "rows must be a multiple of n");
    let b = rows / n;
    let mut total: Option<Var<'g, E>> = None;
    for i in 0..b {
        let idx: Vec<usize> = (i * n..(i + 1) * n).collect();
        let ein = gcn_in.embed(p_in, q_in.index_rows(&idx));
        let eout = gcn_out.embed(p_out, q_out.index_rows(&idx));
        let term = ein.sub(eout).square().sum();
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    total.expect("at least one sample").mul_scalar(1.0 / b as f64)
}

/// Both graph networks of the structural loss; `out` is absent when the two
/// sides share parameters.
#[derive(Clone, Debug)]
pub struct GcnPair<E> {
    pub input: Gcn<E>,
    pub output: Option<Gcn<E>>,
}

impl<E: Element> GcnPair<E> {
    pub fn new(config: GcnConfig, share: bool, rng: &mut impl Rng) -> Result<Self> {
        let input = Gcn::new(config.clone(), "gcn_in", rng)?;
        let output = if share {
            None
        } else {
            Some(Gcn::new(config, "gcn_out", rng)?)
        };
        Ok(Self { input, output })
    }

    pub fn loss<'g>(&self, graph: &'g Graph<E>, q_in: Var<'g, E>, q_out: Var<'g, E>, n: usize, trainable: bool) -> (Var<'g, E>, Vec<Var<'g, E>>, Vec<Var<'g, E>>) {
        let p_in = self.input.store.bind(graph, trainable);
        match &self.output {
            Some(out) => {
                let p_out = out.store.bind(graph, trainable);
                let l = spatio_loss(q_in, q_out, n, &self.input, &p_in, out, &p_out);
                (l, p_in.vars().to_vec(), p_out.vars().to_vec())
            }
            None => {
                let l = spatio_loss(q_in, q_out, n, &self.input, &p_in, &self.input, &p_in);
                (l, p_in.vars().to_vec(), Vec::new())
            }
        }
    }
}
