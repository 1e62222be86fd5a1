//! U-shaped decoder with per-level coarse-mask and edge heads.

use rand::Rng;

use crate::autodiff::{concat, Var};
use crate::encoder::{EncoderConfig, FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d};
use crate::params::{ParamGroup, ParamStore, Session};
use crate::scalar::Scalar;

/// Levels carrying coarse and edge heads (1..=3, finest first).
pub const SUPERVISED_LEVELS: usize = 3;

/// A 1×1 channel-reducing conv then a 3×3 conv, each followed by channel
/// norm and GELU.
#[derive(Debug)]
pub struct ConvBlock {
    pub convs: [Conv2d; 2],
    pub norms: [ChannelNorm; 2],
}

impl ConvBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Other;
        Self {
            convs: [
                Conv2d::same(store, &format!("{name}.conv1"), in_ch, out_ch, 1, true, g, rng),
                Conv2d::same(store, &format!("{name}.conv2"), out_ch, out_ch, 3, true, g, rng),
            ],
            norms: [
                ChannelNorm::new(store, &format!("{name}.norm1"), out_ch, g),
                ChannelNorm::new(store, &format!("{name}.norm2"), out_ch, g),
            ],
        }
    }

    pub fn forward<'g, S: Scalar>(&self, s: &Session<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let mut x = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = norm.forward(s, conv.forward(s, x)?)?.gelu();
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutputs<'g, S: Scalar> {
    /// `X_D^1..X_D^4`, finest first.
    pub features: Vec<Var<'g, S>>,
    /// Coarse-mask logits at levels 1..3.
    pub coarse: Vec<Var<'g, S>>,
    /// Edge logits at levels 1..3.
    pub edges: Vec<Var<'g, S>>,
}

impl<'g, S: Scalar> DecoderOutputs<'g, S> {
    /// Decoder feature at level `i` (1 = finest).
    pub fn feature(&self, i: usize) -> Var<'g, S> {
        self.features[i - 1]
    }
}

#[derive(Debug)]
pub struct Decoder {
    pub widths: [usize; LEVELS],
    pub top: Conv2d,
    /// Blocks for levels 1..3, finest first.
    pub blocks: Vec<ConvBlock>,
    pub coarse_heads: Vec<Conv2d>,
    pub edge_heads: Vec<Conv2d>,
}

impl Decoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        encoder: &EncoderConfig,
        widths: [usize; LEVELS],
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Other;
        let top = Conv2d::same(store, "decoder.top", encoder.widths[LEVELS - 1], widths[LEVELS - 1], 1, true, g, rng);
        let blocks = (0..LEVELS - 1)
            .map(|i| {
                ConvBlock::new(
                    store,
                    &format!("decoder.block{}", i + 1),
                    widths[i + 1] + encoder.widths[i],
                    widths[i],
                    rng,
                )
            })
            .collect();
        let head = |store: &mut ParamStore<S>, rng: &mut R, kind: &str, i: usize| {
            Conv2d::same(store, &format!("decoder.{kind}{}", i + 1), widths[i], 1, 1, true, g, rng)
        };
        let coarse_heads = (0..SUPERVISED_LEVELS).map(|i| head(store, rng, "coarse", i)).collect();
        let edge_heads = (0..SUPERVISED_LEVELS).map(|i| head(store, rng, "edge", i)).collect();
        Self {
            widths,
            top,
            blocks,
            coarse_heads,
            edge_heads,
        }
    }

    pub fn forward<'g, S: Scalar>(
        &self,
        s: &Session<'g, S>,
        encoder: &FeaturePyramid<'g, S>,
    ) -> Result<DecoderOutputs<'g, S>> {
        if encoder.levels.len() != LEVELS {
            return Err(Error::invalid(format!("decoder needs {LEVELS} levels, got {}", encoder.levels.len())));
        }
        let mut features = vec![self.top.forward(s, encoder.levels[LEVELS - 1])?];
        for i in (0..LEVELS - 1).rev() {
            let skip = encoder.levels[i];
            let shape = skip.shape();
            let up = features.last().expect("seeded").resize_bilinear(shape[1], shape[2])?;
            features.push(self.blocks[i].forward(s, concat(&[up, skip], 0)?)?);
        }
        features.reverse();
        let heads = |hs: &[Conv2d]| -> Result<Vec<_>> {
            hs.iter().zip(&features).map(|(h, &f)| h.forward(s, f)).collect()
        };
        let coarse = heads(&self.coarse_heads)?;
        let edges = heads(&self.edge_heads)?;
        Ok(DecoderOutputs {
            features,
            coarse,
            edges,
        })
    }
}
