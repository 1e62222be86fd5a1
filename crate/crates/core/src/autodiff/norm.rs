use crate::error::Result;
use crate::scalar::{lit, Scalar};

use super::graph::Var;

impl<'g, S: Scalar> Var<'g, S> {
    /// Normalizes to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(self, axis: usize, eps: f64) -> Result<Var<'g, S>> {
        let centered = self.sub(self.mean_axis(axis)?)?;
        let var = centered.square().mean_axis(axis)?;
        centered.div(var.add_scalar(lit(eps)).sqrt())
    }
}
