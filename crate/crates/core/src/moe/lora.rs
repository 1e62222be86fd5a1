use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, Linear};
use crate::params::{ParamGroup, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::dispatch::{ExpertGroupKind, Modality, ModalityDispatcher};
use super::experts::ExpertGroup;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraMoeConfig {
    pub rank: usize,
    pub top_k: usize,
    /// Run the modality-routed expert groups; plain LoRA when false.
    pub experts: bool,
}

impl Default for LoraMoeConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            top_k: 2,
            experts: true,
        }
    }
}

/// `W0·x + B·(A·x)` for `x` of shape `k×N`.
pub fn low_rank_update<'g, S: Scalar>(
    x: Var<'g, S>,
    w0: Var<'g, S>,
    a: Var<'g, S>,
    b: Var<'g, S>,
) -> Result<Var<'g, S>> {
    w0.matmul(x)?.add(b.matmul(a.matmul(x)?)?)
}

/// A frozen projection with a trainable low-rank update whose
/// intermediate `A·x` is additionally refined by modality-routed
/// convolutional experts.
#[derive(Debug)]
pub struct LoraMoeLayer {
    pub name: String,
    pub base: Linear,
    pub lora_a: ParamId,
    pub lora_b: ParamId,
    pub config: LoraMoeConfig,
    pub dispatcher: ModalityDispatcher,
    /// Indexed by [`ExpertGroupKind::index`].
    pub groups: Vec<ExpertGroup>,
}

impl LoraMoeLayer {
    /// Wraps an existing frozen projection. `A` starts as small uniform
    /// noise and `B` as zeros, so the wrapped output initially equals the
    /// frozen one.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        base: Linear,
        config: LoraMoeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, k) = (base.out_dim, base.in_dim);
        if config.rank == 0 || config.rank * 4 > d.min(k) {
            return Err(Error::invalid(format!(
                "{name}: rank {} exceeds min(d, k)/4 for a {d}×{k} projection",
                config.rank
            )));
        }
        if config.top_k == 0 || config.top_k > super::EXPERTS_PER_GROUP {
            return Err(Error::invalid(format!("{name}: top-k {} out of range", config.top_k)));
        }
        let r = config.rank;
        let lora_a = store.add(format!("{name}.lora_a"), fan_in_uniform(&[r, k], k, rng), ParamGroup::Adapter);
        let lora_b = store.add(format!("{name}.lora_b"), Tensor::zeros(&[d, r]), ParamGroup::Adapter);
        let groups = ExpertGroupKind::ALL
            .iter()
            .map(|&g| ExpertGroup::new(store, &format!("{name}.{}", g.as_str()), g, r, config.top_k, rng))
            .collect();
        Ok(Self {
            name: name.to_string(),
            base,
            lora_a,
            lora_b,
            config,
            dispatcher: ModalityDispatcher,
            groups,
        })
    }

    pub fn group(&self, kind: ExpertGroupKind) -> &ExpertGroup {
        &self.groups[kind.index()]
    }

    fn check_input<S: Scalar>(&self, x: Var<'_, S>) -> Result<()> {
        let shape = x.shape();
        match shape[..] {
            [k, _] if k == self.base.in_dim => Ok(()),
            _ => Err(Error::shape("lora_forward", &shape, &[self.base.in_dim, 0])),
        }
    }

    /// The frozen projection alone.
    pub fn frozen_forward<'g, S: Scalar>(&self, s: &Session<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        self.check_input(x)?;
        self.base.forward(s, x)
    }

    /// `W0·x + B·A·x`, no experts.
    pub fn lora_forward<'g, S: Scalar>(&self, s: &Session<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        self.check_input(x)?;
        let z = s.param(self.lora_a).matmul(x)?;
        self.base.forward(s, x)?.add(s.param(self.lora_b).matmul(z)?)
    }

    /// `W0·x + B·A·x + B·D(A·x)` where `D` routes the low-rank map through
    /// the groups active for `modality`. `spatial` is the `(H, W)` layout
    /// of the `N` tokens in `x`.
    pub fn moe_lora_forward<'g, S: Scalar>(
        &self,
        s: &Session<'g, S>,
        x: Var<'g, S>,
        spatial: (usize, usize),
        modality: Modality,
    ) -> Result<Var<'g, S>> {
        if !self.config.experts {
            return self.lora_forward(s, x);
        }
        self.check_input(x)?;
        let tokens = x.shape()[1];
        let (h, w) = spatial;
        if h * w != tokens {
            return Err(Error::invalid(format!(
                "{}: {tokens} tokens do not factor into {h}×{w}",
                self.name
            )));
        }
        if h == 1 && w > 1 {
            return Err(Error::invalid(format!(
                "{}: 1-D token layout 1×{w} has no spatial structure for the experts",
                self.name
            )));
        }
        let r = self.config.rank;
        let z = s.param(self.lora_a).matmul(x)?;
        let zmap = z.reshape(&[r, h, w])?;
        let mut routed = None;
        for kind in self.dispatcher.route(modality) {
            let out = self.group(kind).forward(s, zmap, &self.name)?;
            routed = Some(match routed {
                Some(acc) => out.add(acc)?,
                None => out,
            });
        }
        let routed = routed.expect("dispatcher activates two groups").reshape(&[r, tokens])?;
        let b = s.param(self.lora_b);
        self.base
            .forward(s, x)?
            .add(b.matmul(z)?)?
            .add(b.matmul(routed)?)
    }

    /// Trainable scalars: `r·k + d·r` plus every expert and gate.
    pub fn trainable_count(&self) -> usize {
        let r = self.config.rank;
        r * self.base.in_dim
            + self.base.out_dim * r
            + self.groups.iter().map(|g| g.param_count(r)).sum::<usize>()
    }
}

/// A projection that is either the frozen original or an adapter-wrapped
/// version sharing its weights.
#[derive(Debug)]
pub enum Projection {
    Frozen(Linear),
    Adapted(Box<LoraMoeLayer>),
}

/// How injected adapters behave on a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterMode {
    /// Adapters skipped: the frozen trunk as originally built.
    Bypass,
    Active(Modality),
}

impl Projection {
    pub fn forward<'g, S: Scalar>(
        &self,
        s: &Session<'g, S>,
        x: Var<'g, S>,
        spatial: (usize, usize),
        mode: AdapterMode,
    ) -> Result<Var<'g, S>> {
        match (self, mode) {
            (Projection::Frozen(l), _) => l.forward(s, x),
            (Projection::Adapted(l), AdapterMode::Bypass) => l.frozen_forward(s, x),
            (Projection::Adapted(l), AdapterMode::Active(m)) => l.moe_lora_forward(s, x, spatial, m),
        }
    }

    pub fn base(&self) -> &Linear {
        match self {
            Projection::Frozen(l) => l,
            Projection::Adapted(l) => &l.base,
        }
    }

    pub fn adapter(&self) -> Option<&LoraMoeLayer> {
        match self {
            Projection::Frozen(_) => None,
            Projection::Adapted(l) => Some(l),
        }
    }

    pub fn is_adapted(&self) -> bool {
        matches!(self, Projection::Adapted(_))
    }
}

/// An attention block whose query and value projections can be wrapped.
pub trait AttentionProjections {
    fn block_name(&self) -> &str;
    fn query_mut(&mut self) -> &mut Projection;
    fn value_mut(&mut self) -> &mut Projection;
}

/// Replaces the q and v projections of `block` with adapter layers built by
/// `factory` from the frozen originals. Key and output projections are not
/// touched. Already-wrapped projections are left as they are.
pub fn inject_into_attention<B, F>(block: &mut B, mut factory: F) -> Result<()>
where
    B: AttentionProjections + ?Sized,
    F: FnMut(&str, Linear) -> Result<LoraMoeLayer>,
{
    let name = block.block_name().to_string();
    for (slot, which) in [(0, "q"), (1, "v")] {
        let proj = if slot == 0 { block.query_mut() } else { block.value_mut() };
        if let Projection::Frozen(base) = proj {
            let layer = factory(&format!("{name}.{which}"), base.clone())?;
            *proj = Projection::Adapted(Box::new(layer));
        }
    }
    Ok(())
}
