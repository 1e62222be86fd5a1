//! The assembled network and the per-clip forward pass.

use rand::Rng;

use crate::autodiff::Var;
use crate::clip::VideoClip;
use crate::decoder::{Decoder, DecoderOutputs};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::memory::{
    append_resized, DecoderFeature, EntryTag, FusionState, GatedMlf, MemoryBank, MemoryDecoder, MemoryDecoderState,
    TemporalMemory,
};
use crate::moe::{LoraMoeConfig, Modality};
use crate::params::{ParamStore, Session};
use crate::scalar::Scalar;

/// How the final mask is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryVariant {
    /// Upsampled finest coarse mask; no memory.
    Baseline,
    /// Memory over the finest encoder feature and decoder features.
    Memory,
    /// Memory over the gated multi-level fusion.
    MemoryGatedMlf,
}

impl MemoryVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            MemoryVariant::Baseline => "baseline",
            MemoryVariant::Memory => "+mem",
            MemoryVariant::MemoryGatedMlf => "+mem+gated-mlf",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryConfig {
    pub variant: MemoryVariant,
    pub feature: DecoderFeature,
    /// Bank capacity `T`.
    pub capacity: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub hidden: usize,
    pub detach: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            variant: MemoryVariant::MemoryGatedMlf,
            feature: DecoderFeature::Level2,
            capacity: 4,
            key_dim: 16,
            value_dim: 16,
            hidden: 16,
            detach: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lora: LoraMoeConfig,
    pub decoder_widths: [usize; LEVELS],
    pub memory: MemoryConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            lora: LoraMoeConfig::default(),
            decoder_widths: [16, 16, 32, 32],
            memory: MemoryConfig::default(),
        }
    }
}

/// Memory-path modules, present unless the variant is the baseline.
#[derive(Debug)]
pub struct MemoryPath {
    pub gated_mlf: Option<GatedMlf>,
    pub memory: TemporalMemory,
    pub decoder: MemoryDecoder,
}

#[derive(Debug)]
pub struct VsodModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub decoder: Decoder,
    pub memory: Option<MemoryPath>,
}

/// Everything produced for one frame.
#[derive(Clone, Debug)]
pub struct PredictionBundle<'g, S: Scalar> {
    /// Final mask logits at input resolution.
    pub logits: Var<'g, S>,
    /// `sigmoid(logits)`.
    pub mask: Var<'g, S>,
    pub decoder: DecoderOutputs<'g, S>,
    /// Gated-fusion intermediates, when that path is active.
    pub fusion_state: Option<FusionState<'g, S>>,
    /// Memory attention of this frame's read.
    pub attention: Option<Var<'g, S>>,
}

/// Per-frame bundles plus the final bank bookkeeping.
#[derive(Clone, Debug)]
pub struct ClipOutput<'g, S: Scalar> {
    pub frames: Vec<PredictionBundle<'g, S>>,
    pub bank_tags: Vec<EntryTag>,
    pub evicted: Vec<EntryTag>,
    pub pseudo_inits: usize,
    pub writes: usize,
}

/// Per-clip knobs that do not change parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClipOptions {
    /// Overrides the bank capacity (test-time memory size).
    pub capacity: Option<usize>,
    /// Pins the gated-fusion gate to a constant.
    pub force_gate: Option<f64>,
}

impl VsodModel {
    /// Builds every module. The frozen trunk is created first, so two
    /// models built from equal RNG states share trunk weights regardless
    /// of the memory configuration.
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, config: ModelConfig, rng: &mut R) -> Result<Self> {
        let m = &config.memory;
        if m.capacity == 0 || m.key_dim == 0 || m.value_dim == 0 || m.hidden == 0 {
            return Err(Error::invalid("memory dimensions must be positive"));
        }
        let encoder = Encoder::new(store, config.encoder.clone(), config.lora, rng)?;
        let fusion = Fusion::new(store, &config.encoder, rng);
        let decoder = Decoder::new(store, &config.encoder, config.decoder_widths, rng);
        let memory = match m.variant {
            MemoryVariant::Baseline => None,
            variant => {
                let gated_mlf =
                    (variant == MemoryVariant::MemoryGatedMlf).then(|| GatedMlf::new(store, &config.encoder.widths, rng));
                let in_ch = config.encoder.widths[0]
                    + m.feature.levels().iter().map(|&l| config.decoder_widths[l - 1]).sum::<usize>();
                let memory = TemporalMemory::new(store, in_ch, m.key_dim, m.value_dim, m.detach, rng);
                let decoder = MemoryDecoder::new(store, in_ch, m.value_dim, m.hidden, rng);
                Some(MemoryPath {
                    gated_mlf,
                    memory,
                    decoder,
                })
            }
        };
        Ok(Self {
            config,
            encoder,
            fusion,
            decoder,
            memory,
        })
    }

    /// Encodes both modalities through the shared trunk and fuses them.
    pub fn encode_frame<'g, S: Scalar>(
        &self,
        s: &Session<'g, S>,
        rgb: Var<'g, S>,
        depth: Var<'g, S>,
    ) -> Result<FeaturePyramid<'g, S>> {
        let rgb = crate::encoder::encode_modality(&self.encoder, s, rgb, Modality::Rgb)?;
        let depth = crate::encoder::encode_modality(&self.encoder, s, depth, Modality::Depth)?;
        Ok(self.fusion.forward(s, &rgb, &depth)?.pyramid)
    }

    /// Runs the whole clip. Frame 0 seeds the memory from its own finest
    /// coarse mask; no prompt of any kind is taken.
    pub fn process_clip<'g, S: Scalar>(
        &self,
        s: &Session<'g, S>,
        clip: &VideoClip<S>,
        options: ClipOptions,
    ) -> Result<ClipOutput<'g, S>> {
        let (h, w) = clip.size();
        let capacity = options.capacity.unwrap_or(self.config.memory.capacity);
        let mut bank = MemoryBank::new(capacity)?;
        let mut state = MemoryDecoderState::default();
        let mut frames = Vec::with_capacity(clip.len());
        let (mut pseudo_inits, mut writes) = (0, 0);
        for t in 0..clip.len() {
            let rgb = s.constant(clip.rgb[t].clone());
            let depth = s.constant(clip.depth[t].clone());
            let pyramid = self.encode_frame(s, rgb, depth)?;
            let decoded = self.decoder.forward(s, &pyramid)?;
            let Some(path) = &self.memory else {
                let logits = decoded.coarse[0].resize_bilinear(h, w)?;
                frames.push(PredictionBundle {
                    logits,
                    mask: logits.sigmoid(),
                    decoder: decoded,
                    fusion_state: None,
                    attention: None,
                });
                continue;
            };
            let extra: Vec<_> = self.config.memory.feature.levels().iter().map(|&l| decoded.feature(l)).collect();
            let (x_f, fusion_state) = match &path.gated_mlf {
                Some(g) => {
                    let st = g.forward(s, &pyramid, &extra, options.force_gate)?;
                    (st.memory_input, Some(st))
                }
                None => (append_resized(pyramid.level(1), &extra)?, None),
            };
            if t == 0 {
                let shape = x_f.shape();
                let pseudo = decoded.coarse[0].sigmoid().resize_bilinear(shape[1], shape[2])?;
                path.memory.pseudo_init(s, &mut bank, x_f, pseudo)?;
                pseudo_inits += 1;
            }
            let read = path.memory.read(s, &bank, x_f)?;
            let (low, next) = path.decoder.step(s, x_f, read.context, &state, None)?;
            state = next;
            path.memory.write(s, &mut bank, clip.frames[t], read.query, x_f, low.sigmoid())?;
            writes += 1;
            let logits = low.resize_bilinear(h, w)?;
            frames.push(PredictionBundle {
                logits,
                mask: logits.sigmoid(),
                decoder: decoded,
                fusion_state,
                attention: Some(read.attention),
            });
        }
        Ok(ClipOutput {
            frames,
            bank_tags: bank.tags(),
            evicted: bank.evicted().to_vec(),
            pseudo_inits,
            writes,
        })
    }
}
