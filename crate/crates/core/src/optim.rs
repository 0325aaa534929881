use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::{cst, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias correction; one instance per parameter group.
#[derive(Clone, Debug)]
pub struct Adam<E> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(store: &ParamStore<E>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<E>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched
    /// and their moments are not advanced.
    pub fn update(&mut self, store: &mut ParamStore<E>, grads: &[Option<Arc<Tensor<E>>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (cst::<E>(beta1), cst::<E>(beta2));
        let (ob1, ob2) = (cst::<E>(1.0 - beta1), cst::<E>(1.0 - beta2));
        let step_size = cst::<E>(lr / c1);
        let c2s = cst::<E>(c2.sqrt());
        let eps = cst::<E>(eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(i).data_mut();
            for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mj = b1 * *mj + ob1 * gj;
                *vj = b2 * *vj + ob2 * gj * gj;
                *pj -= step_size * *mj / ((*vj).sqrt() / c2s + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", ParamKind::Weight, Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]));
        let mut opt = Adam::new(
            &store,
            AdamConfig {
                lr: 1e-2,
                beta1: 0.0,
                beta2: 0.99,
                eps: 1e-8,
            },
        );
        let g = Arc::new(Tensor::from_vec(&[3], vec![4.0, -0.1, 0.0]));
        opt.update(&mut store, &[Some(g)]);
        let w = store.get(crate::nn::ParamId::from_index(0)).value.data().to_vec();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 1.99).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }
}
