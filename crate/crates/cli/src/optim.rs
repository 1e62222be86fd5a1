//! AdamW with one learning rate per parameter group and global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use vsod_core::{ParamGroup, ParamId, ParamStore, Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<S> {
    pub first: Tensor<S>,
    pub second: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub lr_adapter: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    /// Updates taken so far.
    pub step: u64,
    pub moments: BTreeMap<ParamId, Moments<S>>,
}

/// `L2` norm over every gradient entry.
pub fn global_norm<S: Scalar>(grads: &[(ParamId, Tensor<S>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [(ParamId, Tensor<S>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = S::from_f64_lossy(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

impl<S: Scalar> AdamW<S> {
    pub fn new(lr_adapter: f64, lr_other: f64, weight_decay: f64) -> Self {
        Self {
            lr_adapter,
            lr_other,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Learning rate of a group; frozen parameters have none.
    pub fn learning_rate(&self, group: ParamGroup) -> Option<f64> {
        match group {
            ParamGroup::Frozen => None,
            ParamGroup::Adapter => Some(self.lr_adapter),
            ParamGroup::Other => Some(self.lr_other),
        }
    }

    /// One decoupled-weight-decay update. Gradients of frozen parameters
    /// are ignored.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)]) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - BETA1.powi(t);
        let bias2 = 1.0 - BETA2.powi(t);
        for (id, grad) in grads {
            let Some(lr) = self.learning_rate(store.get(*id).group) else {
                continue;
            };
            let m = self.moments.entry(*id).or_insert_with(|| Moments {
                first: Tensor::zeros(grad.shape()),
                second: Tensor::zeros(grad.shape()),
            });
            let param = store.value_mut(*id);
            let (first, second) = (m.first.data_mut(), m.second.data_mut());
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad.data()[i].to_f64_lossy();
                let m1 = BETA1 * first[i].to_f64_lossy() + (1.0 - BETA1) * g;
                let m2 = BETA2 * second[i].to_f64_lossy() + (1.0 - BETA2) * g * g;
                first[i] = S::from_f64_lossy(m1);
                second[i] = S::from_f64_lossy(m2);
                let value = p.to_f64_lossy();
                let step = (m1 / bias1) / ((m2 / bias2).sqrt() + EPSILON) + self.weight_decay * value;
                *p = S::from_f64_lossy(value - lr * step);
            }
        }
    }
}
