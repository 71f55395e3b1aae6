//! SGD with momentum and weight decay over a slimmable weight store.
//!
//! One momentum buffer per tensor, shared across all sampled widths. Weight
//! decay touches the full allocation every step, including slices the
//! current step's sampled widths never activated, so rarely-sampled outer
//! groups keep shrinking instead of freezing at stale magnitudes.

use super::elem::Elem;
use super::net::{GradStore, LayerParams, SlimmableWeights};
use super::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct SgdState<E: Elem> {
    params: BTreeMap<String, LayerParams<E>>,
    bn: BTreeMap<String, (Tensor<E>, Tensor<E>)>,
}

impl<E: Elem> SgdState<E> {
    pub fn zeros_like(w: &SlimmableWeights<E>) -> Self {
        let g = GradStore::zeros_like(w);
        SgdState {
            params: g.params,
            bn: g.bn,
        }
    }
}

fn update<E: Elem>(w: &mut [E], g: &[E], v: &mut [E], h: &SgdHyper) {
    let lr = E::from_f64(h.lr);
    let mom = E::from_f64(h.momentum);
    let wd = E::from_f64(h.weight_decay);
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = mom * *vi + gi + wd * *wi;
        *wi -= lr * *vi;
    }
}

/// w <- w - lr * v where v <- momentum * v + (g + weight_decay * w).
pub fn sgd_step<E: Elem>(
    weights: &mut SlimmableWeights<E>,
    grads: &GradStore<E>,
    state: &mut SgdState<E>,
    h: &SgdHyper,
) {
    for (id, p) in weights.params.iter_mut() {
        let g = &grads.params[id];
        let v = state.params.get_mut(id).expect("state mirrors weights");
        update(p.weight.data_mut(), g.weight.data(), v.weight.data_mut(), h);
        update(p.bias.data_mut(), g.bias.data(), v.bias.data_mut(), h);
    }
    for (id, b) in weights.bn.iter_mut() {
        let (dg, db) = &grads.bn[id];
        let (vg, vb) = state.bn.get_mut(id).expect("state mirrors weights");
        update(b.gamma.data_mut(), dg.data(), vg.data_mut(), h);
        update(b.beta.data_mut(), db.data(), vb.data_mut(), h);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f32) -> (SlimmableWeights<f32>, GradStore<f32>) {
        let mut params = BTreeMap::new();
        params.insert(
            "w".to_string(),
            LayerParams {
                weight: Tensor::from_vec(&[1], vec![w]),
                bias: Tensor::zeros(&[1]),
            },
        );
        let weights = SlimmableWeights {
            params,
            bn: BTreeMap::new(),
        };
        let grads = GradStore::zeros_like(&weights);
        (weights, grads)
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let (mut w, mut g) = scalar_store(1.0);
        g.params.get_mut("w").unwrap().weight.data_mut()[0] = 5.0;
        let mut st = SgdState::zeros_like(&w);
        sgd_step(
            &mut w,
            &g,
            &mut st,
            &SgdHyper {
                lr: 0.0,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
        );
        assert_eq!(w.params["w"].weight.data()[0], 1.0);
    }

    #[test]
    fn plain_sgd_definition() {
        let (mut w, mut g) = scalar_store(1.0);
        g.params.get_mut("w").unwrap().weight.data_mut()[0] = 1.0;
        let mut st = SgdState::zeros_like(&w);
        sgd_step(
            &mut w,
            &g,
            &mut st,
            &SgdHyper {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
        );
        assert!((w.params["w"].weight.data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates() {
        let (mut w, mut g) = scalar_store(0.0);
        g.params.get_mut("w").unwrap().weight.data_mut()[0] = 1.0;
        let mut st = SgdState::zeros_like(&w);
        let h = SgdHyper {
            lr: 1.0,
            momentum: 0.5,
            weight_decay: 0.0,
        };
        sgd_step(&mut w, &g, &mut st, &h); // v=1,   w=-1
        sgd_step(&mut w, &g, &mut st, &h); // v=1.5, w=-2.5
        assert!((w.params["w"].weight.data()[0] + 2.5).abs() < 1e-7);
    }
}
