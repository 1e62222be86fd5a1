//! Low-rank adaptation with modality-routed convolutional experts.

mod balance;
mod dispatch;
mod experts;
mod gate;
mod lora;

pub use balance::{cv_squared, load_balance_loss, moe_regularizer, GateStatistics};
pub use dispatch::{ExpertGroupKind, Modality, ModalityDispatcher};
pub use experts::{Expert, ExpertGroup, ExpertKind, EXPERTS_PER_GROUP};
pub use gate::{route_logits, top_k_indices, GateDecision, GateNetwork};
pub use lora::{
    inject_into_attention, low_rank_update, AdapterMode, AttentionProjections, LoraMoeConfig, LoraMoeLayer,
    Projection,
};

use crate::autodiff::Var;
use crate::scalar::Scalar;

/// One gating event, emitted as a side record of an expert-group forward.
#[derive(Clone, Debug)]
pub struct GateRecord<'g, S: Scalar> {
    /// `<layer>.<group>`; records with equal keys come from the same gate.
    pub key: String,
    pub importance: Var<'g, S>,
    pub smooth_load: Var<'g, S>,
    pub hard_load: Vec<usize>,
}
