use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::autodiff::{ConvSpec, Var};
use crate::error::Result;
use crate::nn::Conv2d;
use crate::params::{ParamGroup, ParamStore, Session};
use crate::scalar::Scalar;

use super::dispatch::ExpertGroupKind;
use super::gate::GateNetwork;
use super::GateRecord;

/// Number of experts in every group.
pub const EXPERTS_PER_GROUP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertKind {
    Conv3x3,
    Conv5x5,
    DepthwisePointwise,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; EXPERTS_PER_GROUP] =
        [ExpertKind::Conv3x3, ExpertKind::Conv5x5, ExpertKind::DepthwisePointwise];

    /// Parameters of one expert acting on `rank` channels.
    pub fn param_count(self, rank: usize) -> usize {
        match self {
            ExpertKind::Conv3x3 => rank * rank * 9,
            ExpertKind::Conv5x5 => rank * rank * 25,
            ExpertKind::DepthwisePointwise => rank * 9 + rank * rank,
        }
    }
}

/// A shape-preserving convolutional map on the `r×H×W` low-rank feature.
/// Bias-free, so zeroed kernels give an exactly zero output.
#[derive(Clone, Debug)]
pub struct Expert {
    pub kind: ExpertKind,
    pub convs: Vec<Conv2d>,
}

impl Expert {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        kind: ExpertKind,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Adapter;
        let convs = match kind {
            ExpertKind::Conv3x3 => vec![Conv2d::same(store, &format!("{name}.conv3"), rank, rank, 3, false, g, rng)],
            ExpertKind::Conv5x5 => vec![Conv2d::same(store, &format!("{name}.conv5"), rank, rank, 5, false, g, rng)],
            ExpertKind::DepthwisePointwise => vec![
                Conv2d::new(
                    store,
                    &format!("{name}.depthwise"),
                    rank,
                    rank,
                    3,
                    ConvSpec::same(3).with_groups(rank),
                    false,
                    g,
                    rng,
                ),
                Conv2d::same(store, &format!("{name}.pointwise"), rank, rank, 1, false, g, rng),
            ],
        };
        Self { kind, convs }
    }

    pub fn forward<'g, S: Scalar>(&self, s: &Session<'g, S>, z: Var<'g, S>) -> Result<Var<'g, S>> {
        self.convs.iter().try_fold(z, |x, conv| conv.forward(s, x))
    }
}

/// Three experts and the gate that mixes the top-K of them.
#[derive(Debug)]
pub struct ExpertGroup {
    pub kind: ExpertGroupKind,
    pub experts: Vec<Expert>,
    pub gate: GateNetwork,
    invocations: AtomicUsize,
}

impl ExpertGroup {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        kind: ExpertGroupKind,
        rank: usize,
        top_k: usize,
        rng: &mut R,
    ) -> Self {
        let experts = ExpertKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &k)| Expert::new(store, &format!("{name}.expert{i}"), k, rank, rng))
            .collect();
        let gate = GateNetwork::new(store, &format!("{name}.gate"), rank, EXPERTS_PER_GROUP, top_k, rng);
        Self {
            kind,
            experts,
            gate,
            invocations: AtomicUsize::new(0),
        }
    }

    /// How many times this group has run since construction or the last
    /// [`ExpertGroup::reset_invocations`].
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn reset_invocations(&self) {
        self.invocations.store(0, Ordering::Relaxed);
    }

    /// Gate, run the selected experts, and mix them with the renormalized
    /// weights. Emits a [`GateRecord`] under `key`.
    pub fn forward<'g, S: Scalar>(&self, s: &Session<'g, S>, z: Var<'g, S>, key: &str) -> Result<Var<'g, S>> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let decision = self.gate.forward(s, z)?;
        let mut mixed: Option<Var<'g, S>> = None;
        for (j, &e) in decision.selected.iter().enumerate() {
            let w = decision.weights.index_select(&[j])?.reshape(&[1, 1, 1])?;
            let out = self.experts[e].forward(s, z)?.mul(w)?;
            mixed = Some(match mixed {
                Some(acc) => acc.add(out)?,
                None => out,
            });
        }
        s.record_gate(GateRecord {
            key: format!("{key}.{}", self.kind.as_str()),
            importance: decision.dense_weights,
            smooth_load: decision.smooth_load,
            hard_load: (0..EXPERTS_PER_GROUP)
                .map(|e| usize::from(decision.selected.contains(&e)))
                .collect(),
        });
        Ok(mixed.expect("top-k is at least 1"))
    }

    pub fn param_count(&self, rank: usize) -> usize {
        self.experts.iter().map(|e| e.kind.param_count(rank)).sum::<usize>() + self.gate.param_count()
    }
}
