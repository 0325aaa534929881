//! Training objectives. Reductions are means over all elements so magnitudes
//! do not depend on resolution or batch size.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::segmentation::{row_logsumexp, PairSets};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_spatio: f64,
    pub lambda_info: f64,
    pub lambda_cycle: f64,
    pub lambda_style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_spatio: 1.0,
            lambda_info: 2.0,
            lambda_cycle: 2.0,
            lambda_style: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_adv,
            self.lambda_spatio,
            self.lambda_info,
            self.lambda_cycle,
            self.lambda_style,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            lambda_adv: self.lambda_adv * a,
            lambda_spatio: self.lambda_spatio * a,
            lambda_info: self.lambda_info * a,
            lambda_cycle: self.lambda_cycle * a,
            lambda_style: self.lambda_style * a,
        }
    }
}

/// `mean(-log σ(real)) + mean(-log(1 - σ(fake)))`.
pub fn adversarial_d_loss<'g, E: Element>(real_logit: Var<'g, E>, fake_logit: Var<'g, E>) -> Var<'g, E> {
    real_logit.neg().softplus().mean().add(fake_logit.softplus().mean())
}

/// Non-saturating generator loss `mean(-log σ(fake))`.
pub fn adversarial_g_loss<'g, E: Element>(fake_logit: Var<'g, E>) -> Var<'g, E> {
    fake_logit.neg().softplus().mean()
}

/// `(γ / 2) · mean_b ‖∇_x D(x_b)‖²` for `x` a leaf that tracks gradients and
/// `logits = D(x)` one per sample. The result stays differentiable with
/// respect to the discriminator parameters.
pub fn r1_penalty<'g, E: Element>(x: Var<'g, E>, logits: Var<'g, E>, gamma: f64) -> Var<'g, E> {
    let graph = x.graph();
    let b = x.shape()[0];
    if gamma == 0.0 {
        return graph.scalar(0.0);
    }
    match graph.grad(logits.sum(), &[x], true).remove(0) {
        Some(gx) => gx.square().sum().mul_scalar(0.5 * gamma / b as f64),
        None => graph.scalar(0.0),
    }
}

/// Mean absolute error between an image and its reconstruction.
pub fn cycle_loss<'g, E: Element>(x: Var<'g, E>, x_cycled: Var<'g, E>) -> Result<Var<'g, E>> {
    if x.shape() != x_cycled.shape() {
        return Err(Error::Contract(format!(
            "cycle loss shapes differ: {:?} vs {:?}",
            x.shape(),
            x_cycled.shape()
        )));
    }
    Ok(x.sub(x_cycled).abs().mean())
}

/// Mean absolute error between the injected and the recovered style.
pub fn style_loss<'g, E: Element>(s_hat: Var<'g, E>, s_recovered: Var<'g, E>) -> Result<Var<'g, E>> {
    if s_hat.shape() != s_recovered.shape() {
        return Err(Error::Contract("style vectors differ in shape".into()));
    }
    Ok(s_hat.sub(s_recovered).abs().mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NceConfig {
    pub eta: f64,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self { eta: 0.07 }
    }
}

/// Contrastive object loss and the number of samples skipped for lack of a
/// positive pair.
pub struct NceOutput<'g, E> {
    pub loss: Var<'g, E>,
    pub skipped: usize,
}

/// For each sample: `-log(Σ_pos exp(sim/η) / (Σ_pos exp(sim/η) + Σ_neg exp(sim/η)))`
/// with cosine similarities between rows of `style [M, d]` and `output [M', d]`,
/// averaged over all samples (skipped ones count as zero).
pub fn info_nce_loss<'g, E: Element>(
    style: Var<'g, E>,
    output: Var<'g, E>,
    pairs: &[PairSets],
    cfg: NceConfig,
) -> Result<NceOutput<'g, E>> {
    let graph = style.graph();
    if cfg.eta <= 0.0 {
        return Err(Error::Config(format!("nce eta must be positive, got {}", cfg.eta)));
    }
    if style.shape()[1] != output.shape()[1] {
        return Err(Error::Contract("style and output features differ in dimension".into()));
    }
    if pairs.is_empty() {
        return Ok(NceOutput {
            loss: graph.scalar(0.0),
            skipped: 0,
        });
    }
    let m_out = output.shape()[0];
    let eps = 1e-12;
    let sim = style
        .l2_normalize_rows(eps)
        .matmul_t(output.l2_normalize_rows(eps), false, true)
        .mul_scalar(1.0 / cfg.eta);
    let flat = sim.reshape(&[style.shape()[0] * m_out, 1]);
    let mut total: Option<Var<'g, E>> = None;
    let mut skipped = 0;
    for set in pairs {
        if set.positives.is_empty() {
            skipped += 1;
            continue;
        }
        let pos_idx: Vec<usize> = set.positives.iter().map(|&(s, o)| s * m_out + o).collect();
        let all_idx: Vec<usize> = pos_idx
            .iter()
            .copied()
            .chain(set.negatives.iter().map(|&(s, o)| s * m_out + o))
            .collect();
        let lse = |idx: &[usize]| row_logsumexp(flat.index_rows(idx).reshape(&[1, idx.len()])).sum();
        let term = lse(&all_idx).sub(lse(&pos_idx));
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    let loss = match total {
        Some(t) => t.mul_scalar(1.0 / pairs.len() as f64),
        None => graph.scalar(0.0),
    };
    Ok(NceOutput { loss, skipped })
}

/// Per-component loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents<T> {
    pub adv_g: T,
    pub spatio: T,
    pub info: T,
    pub cycle: T,
    pub style: T,
    pub adv_d: T,
    pub r1: T,
}

/// `(generator objective, discriminator objective)` on plain numbers.
pub fn total_loss(c: &LossComponents<f64>, w: &LossWeights) -> (f64, f64) {
    let g = w.lambda_adv * c.adv_g
        + w.lambda_spatio * c.spatio
        + w.lambda_info * c.info
        + w.lambda_cycle * c.cycle
        + w.lambda_style * c.style;
    let d = w.lambda_adv * c.adv_d + c.r1;
    (g, d)
}

/// Weighted generator objective on the graph; zero-weighted terms are dropped.
pub fn generator_objective<'g, E: Element>(
    graph: &'g Graph<E>,
    terms: &[(f64, Option<Var<'g, E>>)],
) -> Var<'g, E> {
    terms
        .iter()
        .filter(|(w, t)| *w != 0.0 && t.is_some())
        .map(|(w, t)| t.expect("filtered").mul_scalar(*w))
        .reduce(|a, b| a.add(b))
        .unwrap_or_else(|| graph.constant(Tensor::scalar(E::zero())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adversarial_values() {
        let g = Graph::<f64>::new();
        let r = g.constant(Tensor::from_vec(&[1], vec![1.0]));
        let f = g.constant(Tensor::from_vec(&[1], vec![-1.0]));
        let want = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((adversarial_d_loss(r, f).to_f64() - want).abs() < 1e-12);
        let z = g.constant(Tensor::from_vec(&[1], vec![0.0]));
        assert!((adversarial_g_loss(z).to_f64() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nce_single_positive_single_negative() {
        let g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        let o = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, -1.0, 0.0]));
        let pairs = [PairSets {
            positives: vec![(0, 0)],
            negatives: vec![(0, 1)],
        }];
        let out = info_nce_loss(s, o, &pairs, NceConfig { eta: 1.0 }).unwrap();
        let e = std::f64::consts::E;
        assert!((out.loss.to_f64() + (e / (e + 1.0 / e)).ln()).abs() < 1e-12);
    }
}
