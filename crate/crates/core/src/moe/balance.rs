//! Importance/load statistics and the load-balancing regularizer.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::GateRecord;

/// Per-expert importance and load for one gate.
#[derive(Clone, Debug)]
pub struct GateStatistics<'g, S: Scalar> {
    /// Sum of renormalized gate weights per expert.
    pub importance: Var<'g, S>,
    /// Differentiable load: sum of softmax probabilities of selected experts.
    pub load: Var<'g, S>,
    /// Hard selection counts, for reporting.
    pub hard_load: Vec<usize>,
    pub events: usize,
}

impl<'g, S: Scalar> GateStatistics<'g, S> {
    /// Statistics from fixed values; `load` doubles as the hard count.
    pub fn from_values(graph: &'g Graph<S>, importance: &[f64], load: &[f64]) -> Result<Self> {
        if importance.len() != load.len() {
            return Err(Error::shape("GateStatistics", &[importance.len()], &[load.len()]));
        }
        let n = importance.len();
        Ok(Self {
            importance: graph.constant(Tensor::from_f64(&[n], importance)?),
            load: graph.constant(Tensor::from_f64(&[n], load)?),
            hard_load: load.iter().map(|&v| v.round().max(0.0) as usize).collect(),
            events: 1,
        })
    }

    /// Adds two accumulators for the same gate.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            importance: self.importance.add(other.importance)?,
            load: self.load.add(other.load)?,
            hard_load: self.hard_load.iter().zip(&other.hard_load).map(|(a, b)| a + b).collect(),
            events: self.events + other.events,
        })
    }

    /// Groups records by gate key and sums them.
    pub fn from_records(records: &[GateRecord<'g, S>]) -> Result<BTreeMap<String, Self>> {
        let mut out: BTreeMap<String, Self> = BTreeMap::new();
        for r in records {
            let stats = Self {
                importance: r.importance,
                load: r.smooth_load,
                hard_load: r.hard_load.clone(),
                events: 1,
            };
            let merged = match out.get(&r.key) {
                Some(prev) => prev.merge(&stats)?,
                None => stats,
            };
            out.insert(r.key.clone(), merged);
        }
        Ok(out)
    }
}

/// Squared coefficient of variation with population variance.
pub fn cv_squared<'g, S: Scalar>(x: Var<'g, S>) -> Result<Var<'g, S>> {
    let mean = x.mean();
    if mean.item() <= S::zero() {
        return Err(Error::EmptyBatch);
    }
    let var = x.sub(mean)?.square().mean();
    var.div(mean.square())
}

/// `λ·[(σ(I)/μ(I))² + (σ(L)/μ(L))²]`.
pub fn load_balance_loss<'g, S: Scalar>(stats: &GateStatistics<'g, S>, lambda: f64) -> Result<Var<'g, S>> {
    if stats.events == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(cv_squared(stats.importance)?
        .add(cv_squared(stats.load)?)?
        .scale(S::from_f64_lossy(lambda)))
}

/// Mean of the per-gate balance losses over every gate that fired.
pub fn moe_regularizer<'g, S: Scalar>(
    graph: &'g Graph<S>,
    records: &[GateRecord<'g, S>],
    lambda: f64,
) -> Result<Var<'g, S>> {
    let per_gate = GateStatistics::from_records(records)?;
    if per_gate.is_empty() {
        return Ok(graph.scalar(S::zero()));
    }
    let n = per_gate.len();
    let mut total: Option<Var<'g, S>> = None;
    for stats in per_gate.values() {
        let l = load_balance_loss(stats, lambda)?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    Ok(total.expect("nonempty").scale(S::one() / S::from_usize(n).unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_stats_give_zero() {
        let g = Graph::<f64>::new();
        let s = GateStatistics::from_values(&g, &[5., 5., 5.], &[5., 5., 5.]).unwrap();
        assert_eq!(load_balance_loss(&s, 1e-2).unwrap().item(), 0.0);
    }

    #[test]
    fn hand_computed_cv() {
        let g = Graph::<f64>::new();
        let s = GateStatistics::from_values(&g, &[1., 3.], &[2., 2.]).unwrap();
        let l = load_balance_loss(&s, 1e-2).unwrap().item();
        assert!((l - 2.5e-3).abs() < 1e-12, "{l}");
    }

    #[test]
    fn skew_is_positive_and_empty_errors() {
        let g = Graph::<f64>::new();
        let s = GateStatistics::from_values(&g, &[2., 0., 0.], &[1., 1., 1.]).unwrap();
        assert!(load_balance_loss(&s, 1e-2).unwrap().item() > 0.0);
        let empty = GateStatistics::from_values(&g, &[0., 0.], &[0., 0.]).unwrap();
        assert_eq!(load_balance_loss(&empty, 1e-2).unwrap_err(), Error::EmptyBatch);
    }

    proptest! {
        #[test]
        fn scale_invariant(vals in proptest::collection::vec(0.1f64..10.0, 3), c in 0.01f64..100.0) {
            let g = Graph::<f64>::new();
            let load = [1.0, 2.0, 3.0];
            let a = GateStatistics::from_values(&g, &vals, &load).unwrap();
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            let b = GateStatistics::from_values(&g, &scaled, &load).unwrap();
            let la = load_balance_loss(&a, 1e-2).unwrap().item();
            let lb = load_balance_loss(&b, 1e-2).unwrap().item();
            prop_assert!((la - lb).abs() <= 1e-12 * la.max(1.0));
        }
    }
}
