//! Frozen four-stage attention trunk shared by both modalities, with
//! adapter-wrapped query and value projections.

use rand::Rng;

use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::moe::{inject_into_attention, AdapterMode, AttentionProjections, LoraMoeConfig, LoraMoeLayer, Projection};
use crate::nn::{ChannelNorm, Linear};
use crate::params::{ParamGroup, ParamStore, Session};
use crate::scalar::{lit, Scalar};

/// Number of pyramid levels.
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub widths: [usize; LEVELS],
    /// Token stride of each stage relative to the input.
    pub strides: [usize; LEVELS],
    pub heads: [usize; LEVELS],
    /// Attention blocks per stage.
    pub depths: [usize; LEVELS],
    pub mlp_ratio: usize,
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 64, 128],
            strides: [4, 8, 16, 32],
            heads: [1, 2, 4, 8],
            depths: [1, 1, 2, 2],
            mlp_ratio: 4,
            input_size: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let increasing = |v: &[usize]| v.windows(2).all(|p| p[0] < p[1]);
        if !increasing(&self.widths) || !increasing(&self.strides) {
            return Err(Error::invalid("encoder widths and strides must be strictly increasing"));
        }
        for (i, (&w, &h)) in self.widths.iter().zip(&self.heads).enumerate() {
            if h == 0 || w % h != 0 {
                return Err(Error::invalid(format!("stage {i}: width {w} not divisible into {h} heads")));
            }
        }
        let mut prev = 1;
        for &s in &self.strides {
            if s % prev != 0 {
                return Err(Error::invalid(format!("stride {s} is not a multiple of {prev}")));
            }
            prev = s;
        }
        if self.depths.contains(&0) {
            return Err(Error::invalid("every stage needs at least one block"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::invalid("mlp_ratio must be positive"));
        }
        self.check_input(self.input_size, self.input_size)
    }

    fn deepest_stride(&self) -> usize {
        self.strides[LEVELS - 1]
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let s = self.deepest_stride();
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::invalid(format!("input {h}×{w} is not divisible by {s}")));
        }
        Ok(())
    }

    /// `(C, H, W)` of every level for an `h×w` input.
    pub fn level_shapes(&self, h: usize, w: usize) -> [(usize, usize, usize); LEVELS] {
        std::array::from_fn(|i| (self.widths[i], h / self.strides[i], w / self.strides[i]))
    }
}

/// Which stream a pyramid came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidSource {
    Rgb,
    Depth,
    Fused,
}

/// Four feature maps, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<'g, S: Scalar> {
    pub levels: Vec<Var<'g, S>>,
    pub source: PyramidSource,
}

impl<'g, S: Scalar> FeaturePyramid<'g, S> {
    pub fn new(levels: Vec<Var<'g, S>>, source: PyramidSource) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(Error::invalid(format!("pyramid needs {LEVELS} levels, got {}", levels.len())));
        }
        for (i, l) in levels.iter().enumerate() {
            if l.shape().len() != 3 {
                return Err(Error::invalid(format!("level {} is not C×H×W: {:?}", i + 1, l.shape())));
            }
        }
        Ok(Self { levels, source })
    }

    /// Level `i`, counting from 1 at the finest.
    pub fn level(&self, i: usize) -> Var<'g, S> {
        self.levels[i - 1]
    }
}

/// Pre-norm transformer block with global multi-head attention over the
/// `C×N` token layout.
#[derive(Debug)]
pub struct AttentionBlock {
    name: String,
    pub norm1: ChannelNorm,
    pub query: Projection,
    pub key: Linear,
    pub value: Projection,
    pub output: Linear,
    pub norm2: ChannelNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl AttentionBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        let f = ParamGroup::Frozen;
        let hidden = dim * mlp_ratio;
        Self {
            name: name.to_string(),
            norm1: ChannelNorm::new(store, &format!("{name}.norm1"), dim, f),
            query: Projection::Frozen(Linear::new(store, &format!("{name}.q"), dim, dim, true, f, rng)),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, true, f, rng),
            value: Projection::Frozen(Linear::new(store, &format!("{name}.v"), dim, dim, true, f, rng)),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, true, f, rng),
            norm2: ChannelNorm::new(store, &format!("{name}.norm2"), dim, f),
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), dim, hidden, true, f, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), hidden, dim, true, f, rng),
            heads,
            dim,
        }
    }

    /// `x` is `C×N` with the tokens laid out as `spatial`.
    pub fn forward<'g, S: Scalar>(
        &self,
        s: &Session<'g, S>,
        x: Var<'g, S>,
        spatial: (usize, usize),
        mode: AdapterMode,
    ) -> Result<Var<'g, S>> {
        let y = self.norm1.forward(s, x)?;
        let q = self.query.forward(s, y, spatial, mode)?;
        let k = self.key.forward(s, y)?;
        let v = self.value.forward(s, y, spatial, mode)?;
        let head_dim = self.dim / self.heads;
        let scale: S = lit(1.0 / (head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(0, h * head_dim, head_dim)?;
            let kh = k.slice(0, h * head_dim, head_dim)?;
            let vh = v.slice(0, h * head_dim, head_dim)?;
            let attn = qh.transpose()?.matmul(kh)?.scale(scale).softmax(1)?;
            outs.push(vh.matmul(attn.transpose()?)?);
        }
        let attended = if outs.len() == 1 { outs[0] } else { concat(&outs, 0)? };
        let x = x.add(self.output.forward(s, attended)?)?;
        let m = self.mlp_in.forward(s, self.norm2.forward(s, x)?)?.gelu();
        x.add(self.mlp_out.forward(s, m)?)
    }
}

impl AttentionProjections for AttentionBlock {
    fn block_name(&self) -> &str {
        &self.name
    }

    fn query_mut(&mut self) -> &mut Projection {
        &mut self.query
    }

    fn value_mut(&mut self) -> &mut Projection {
        &mut self.value
    }
}

/// Patch merging followed by attention blocks.
#[derive(Debug)]
pub struct Stage {
    /// Space-to-depth factor relative to the previous stage.
    pub patch: usize,
    pub embed: Linear,
    pub blocks: Vec<AttentionBlock>,
}

/// The shared trunk. One instance serves both modalities.
#[derive(Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Stage>,
}

impl Encoder {
    /// Builds the frozen trunk and wraps every q/v projection with a
    /// [`LoraMoeLayer`].
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        config: EncoderConfig,
        lora: LoraMoeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(LEVELS);
        let (mut prev_ch, mut prev_stride) = (3, 1);
        for i in 0..LEVELS {
            let patch = config.strides[i] / prev_stride;
            let name = format!("encoder.stage{}", i + 1);
            let embed = Linear::new(
                store,
                &format!("{name}.embed"),
                prev_ch * patch * patch,
                config.widths[i],
                true,
                ParamGroup::Frozen,
                rng,
            );
            let blocks = (0..config.depths[i])
                .map(|b| {
                    AttentionBlock::new(
                        store,
                        &format!("{name}.block{}", b + 1),
                        config.widths[i],
                        config.heads[i],
                        config.mlp_ratio,
                        rng,
                    )
                })
                .collect();
            stages.push(Stage { patch, embed, blocks });
            prev_ch = config.widths[i];
            prev_stride = config.strides[i];
        }
        for block in stages.iter_mut().flat_map(|st| st.blocks.iter_mut()) {
            inject_into_attention(block, |name, base| LoraMoeLayer::new(store, name, base, lora, rng))?;
        }
        Ok(Self { config, stages })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &AttentionBlock> {
        self.stages.iter().flat_map(|st| st.blocks.iter())
    }

    /// Every injected adapter layer, block order, q before v.
    pub fn adapters(&self) -> impl Iterator<Item = &LoraMoeLayer> {
        self.blocks()
            .flat_map(|b| [b.query.adapter(), b.value.adapter()])
            .flatten()
    }

    /// One pass of a `3×H×W` image through the trunk.
    pub fn encode<'g, S: Scalar>(
        &self,
        s: &Session<'g, S>,
        image: Var<'g, S>,
        mode: AdapterMode,
    ) -> Result<FeaturePyramid<'g, S>> {
        let shape = image.shape();
        let [3, h, w] = shape[..] else {
            return Err(Error::invalid(format!("encoder input must be 3×H×W, got {shape:?}")));
        };
        self.config.check_input(h, w)?;
        let mut x = image;
        let mut levels = Vec::with_capacity(LEVELS);
        for (i, stage) in self.stages.iter().enumerate() {
            let (c, lh, lw) = (self.config.widths[i], h / self.config.strides[i], w / self.config.strides[i]);
            let patches = x.patchify(stage.patch)?;
            let pc = patches.shape()[0];
            let tokens = stage.embed.forward(s, patches.reshape(&[pc, lh * lw])?)?;
            let tokens = stage
                .blocks
                .iter()
                .try_fold(tokens, |t, block| block.forward(s, t, (lh, lw), mode))?;
            x = tokens.reshape(&[c, lh, lw])?;
            levels.push(x);
        }
        let source = match mode {
            AdapterMode::Active(crate::moe::Modality::Depth) => PyramidSource::Depth,
            _ => PyramidSource::Rgb,
        };
        FeaturePyramid::new(levels, source)
    }
}

/// Encodes one modality with its adapters active.
pub fn encode_modality<'g, S: Scalar>(
    encoder: &Encoder,
    s: &Session<'g, S>,
    image: Var<'g, S>,
    modality: crate::moe::Modality,
) -> Result<FeaturePyramid<'g, S>> {
    encoder.encode(s, image, AdapterMode::Active(modality))
}
