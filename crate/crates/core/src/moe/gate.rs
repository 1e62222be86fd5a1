use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::fan_in_uniform;
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Indices of the `k` largest values, largest first; ties go to the lower
/// index.
pub fn top_k_indices<S: Scalar>(values: &[S], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Outcome of gating one input.
#[derive(Clone, Debug)]
pub struct GateDecision<'g, S: Scalar> {
    /// Chosen experts, highest logit first.
    pub selected: Vec<usize>,
    /// Renormalized weights of the selected experts, in selection order.
    pub weights: Var<'g, S>,
    /// Renormalized weights scattered to all experts (zeros elsewhere).
    pub dense_weights: Var<'g, S>,
    /// Full softmax probabilities restricted to the selected experts; the
    /// differentiable load surrogate.
    pub smooth_load: Var<'g, S>,
}

/// Keeps the top-`k` logits and renormalizes a softmax over them.
pub fn route_logits<'g, S: Scalar>(logits: Var<'g, S>, k: usize) -> Result<GateDecision<'g, S>> {
    let n = logits.numel();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("top-{k} routing over {n} experts")));
    }
    let logits = logits.reshape(&[n])?;
    let chosen = top_k_indices(&logits.data(), k);
    let weights = logits.index_select(&chosen)?.softmax(0)?;
    let dense_weights = weights.scatter(chosen.clone(), vec![n])?;
    let smooth_load = logits
        .softmax(0)?
        .index_select(&chosen)?
        .scatter(chosen.clone(), vec![n])?;
    Ok(GateDecision {
        selected: chosen,
        weights,
        dense_weights,
        smooth_load,
    })
}

/// Linear scorer from the pooled low-rank map to per-expert logits.
#[derive(Clone, Debug)]
pub struct GateNetwork {
    pub weight: ParamId,
    pub bias: ParamId,
    pub experts: usize,
    pub top_k: usize,
    rank: usize,
}

impl GateNetwork {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        rank: usize,
        experts: usize,
        top_k: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[experts, rank], rank, rng),
            ParamGroup::Adapter,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[experts]), ParamGroup::Adapter);
        Self {
            weight,
            bias,
            experts,
            top_k,
            rank,
        }
    }

    pub fn logits<'g, S: Scalar>(&self, s: &Session<'g, S>, z: Var<'g, S>) -> Result<Var<'g, S>> {
        let pooled = z.global_avg_pool()?.reshape(&[self.rank, 1])?;
        s.param(self.weight)
            .matmul(pooled)?
            .add(s.param(self.bias).reshape(&[self.experts, 1])?)?
            .reshape(&[self.experts])
    }

    pub fn forward<'g, S: Scalar>(&self, s: &Session<'g, S>, z: Var<'g, S>) -> Result<GateDecision<'g, S>> {
        route_logits(self.logits(s, z)?, self.top_k)
    }

    pub fn param_count(&self) -> usize {
        self.experts * self.rank + self.experts
    }
}
