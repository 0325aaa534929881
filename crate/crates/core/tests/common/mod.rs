#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use stylegraph_core::autograd::gradcheck::{relative_error, Comparison};
use stylegraph_core::networks::NetConfig;
use stylegraph_core::nn::{Bound, ParamStore};
use stylegraph_core::{Graph, Tensor, Var};

/// Tiny networks that keep finite-difference checks cheap.
pub fn mini_net() -> NetConfig {
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

pub fn randn(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Compares the analytic gradient of `f` with respect to the parameters in
/// `store` against central differences on `samples` randomly chosen
/// coordinates. Coordinates whose perturbation crosses a kink are skipped and
/// replaced by fresh draws.
pub fn param_gradcheck<F>(store: &mut ParamStore<f64>, samples: usize, h: f64, rng: &mut impl Rng, f: F) -> Comparison
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Var<'g, f64>,
{
    let grads: Vec<Vec<f64>> = {
        let g = Graph::new();
        let p = store.bind(&g, true);
        let out = f(&g, &p);
        g.grad(out, p.vars(), false)
            .into_iter()
            .zip(store.iter())
            .map(|(gr, par)| match gr {
                Some(v) => v.value().to_f64_vec(),
                None => vec![0.0; par.value.numel()],
            })
            .collect()
    };
    let eval = |store: &ParamStore<f64>| -> (f64, Vec<bool>) {
        let g = Graph::new();
        g.track_activation_pattern();
        let p = store.bind(&g, false);
        let v = f(&g, &p).to_f64();
        (v, g.activation_pattern().unwrap_or_default())
    };
    let sizes: Vec<usize> = store.iter().map(|p| p.value.numel()).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    while analytic.len() < samples && skipped < 20 * samples {
        let t = rng.random_range(0..sizes.len());
        let e = rng.random_range(0..sizes[t]);
        let orig = store.value_mut(t).data()[e];
        store.value_mut(t).data_mut()[e] = orig + h;
        let (fp, pp) = eval(store);
        store.value_mut(t).data_mut()[e] = orig - h;
        let (fm, pm) = eval(store);
        store.value_mut(t).data_mut()[e] = orig;
        if pp != pm {
            skipped += 1;
            continue;
        }
        analytic.push(grads[t][e]);
        numeric.push((fp - fm) / (2.0 * h));
    }
    Comparison {
        error: relative_error(&analytic, &numeric),
        compared: analytic.len(),
        skipped,
    }
}
