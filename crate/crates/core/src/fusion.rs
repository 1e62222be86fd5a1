//! Cross-modal fusion of the RGB and depth pyramids.
//!
//! `UimLite` concatenates the two modalities per level, mixes them with a
//! 1×1 convolution and modulates the result by a coarse prior computed from
//! the deepest level. `RfbLite` then enlarges the receptive field with three
//! dilated depthwise 3×3 branches and a residual projection.

use rand::Rng;

use crate::autodiff::{concat, ConvSpec, Var};
use crate::encoder::{EncoderConfig, FeaturePyramid, PyramidSource, LEVELS};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{ParamGroup, ParamStore, Session};
use crate::scalar::{lit, Scalar};

pub const RFB_DILATIONS: [usize; 3] = [1, 3, 5];

#[derive(Debug)]
pub struct RfbLite {
    pub branches: Vec<Conv2d>,
    pub project: Conv2d,
}

impl RfbLite {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, name: &str, ch: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Other;
        let branches = RFB_DILATIONS
            .iter()
            .map(|&d| {
                let spec = ConvSpec::same_dilated(3, d).with_groups(ch);
                Conv2d::new(store, &format!("{name}.dil{d}"), ch, ch, 3, spec, true, g, rng)
            })
            .collect();
        let project = Conv2d::same(store, &format!("{name}.project"), ch, ch, 1, true, g, rng);
        Self { branches, project }
    }

    pub fn forward<'g, S: Scalar>(&self, s: &Session<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let mut summed = self.branches[0].forward(s, x)?;
        for b in &self.branches[1..] {
            summed = summed.add(b.forward(s, x)?)?;
        }
        let mixed = self.project.forward(s, summed.gelu())?;
        x.add(mixed)
    }
}

#[derive(Debug)]
pub struct UimLite {
    /// `2·C4 → 1` prior logits from the deepest concatenated level.
    pub prior: Conv2d,
    /// Per level `2·C_i → C_i`.
    pub mix: Vec<Conv2d>,
}

#[derive(Debug)]
pub struct Fusion {
    pub uim: UimLite,
    pub rfb: Vec<RfbLite>,
}

/// Fused pyramid plus the coarse prior logits that guided it.
#[derive(Clone, Debug)]
pub struct FusionOutput<'g, S: Scalar> {
    pub pyramid: FeaturePyramid<'g, S>,
    pub prior: Var<'g, S>,
}

impl Fusion {
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, config: &EncoderConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Other;
        let deepest = config.widths[LEVELS - 1];
        let prior = Conv2d::same(store, "fusion.uim.prior", 2 * deepest, 1, 1, true, g, rng);
        let mix = (0..LEVELS)
            .map(|i| {
                let c = config.widths[i];
                Conv2d::same(store, &format!("fusion.uim.mix{}", i + 1), 2 * c, c, 1, true, g, rng)
            })
            .collect();
        let rfb = (0..LEVELS)
            .map(|i| RfbLite::new(store, &format!("fusion.rfb{}", i + 1), config.widths[i], rng))
            .collect();
        Self {
            uim: UimLite { prior, mix },
            rfb,
        }
    }

    pub fn forward<'g, S: Scalar>(
        &self,
        s: &Session<'g, S>,
        rgb: &FeaturePyramid<'g, S>,
        depth: &FeaturePyramid<'g, S>,
    ) -> Result<FusionOutput<'g, S>> {
        for (a, b) in rgb.levels.iter().zip(&depth.levels) {
            if a.shape() != b.shape() {
                return Err(Error::shape("fuse_modalities", &a.shape(), &b.shape()));
            }
        }
        let deepest = concat(&[rgb.levels[LEVELS - 1], depth.levels[LEVELS - 1]], 0)?;
        let prior = self.uim.prior.forward(s, deepest)?;
        let two: S = lit(2.0);
        let mut levels = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let (r, d) = (rgb.levels[i], depth.levels[i]);
            let shape = r.shape();
            let mixed = self.uim.mix[i].forward(s, concat(&[r, d], 0)?)?;
            // 2·σ(0) = 1, so a zero prior leaves the mix untouched.
            let gate = prior.resize_bilinear(shape[1], shape[2])?.sigmoid().scale(two);
            levels.push(self.rfb[i].forward(s, mixed.mul(gate)?)?);
        }
        Ok(FusionOutput {
            pyramid: FeaturePyramid::new(levels, PyramidSource::Fused)?,
            prior,
        })
    }
}
