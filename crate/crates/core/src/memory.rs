//! Gated multi-level feature fusion, the FIFO key/value memory with
//! pseudo-mask initialization, and the recurrent memory decoder.

use std::collections::VecDeque;

use rand::Rng;

use crate::autodiff::{concat, Var};
use crate::encoder::{FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{ParamGroup, ParamStore, Session};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Two 1×1 convolutions with a GELU between them.
#[derive(Debug)]
pub struct Ffn {
    pub expand: Conv2d,
    pub contract: Conv2d,
}

impl Ffn {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        hidden: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Other;
        Self {
            expand: Conv2d::same(store, &format!("{name}.expand"), in_ch, hidden, 1, true, g, rng),
            contract: Conv2d::same(store, &format!("{name}.contract"), hidden, out_ch, 1, true, g, rng),
        }
    }

    pub fn forward<'g, S: Scalar>(&self, s: &Session<'g, S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        self.contract.forward(s, self.expand.forward(s, x)?.gelu())
    }
}

/// Which decoder features join the memory input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderFeature {
    Level1,
    Level2,
    Both,
}

impl DecoderFeature {
    pub fn levels(self) -> &'static [usize] {
        match self {
            DecoderFeature::Level1 => &[1],
            DecoderFeature::Level2 => &[2],
            DecoderFeature::Both => &[1, 2],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderFeature::Level1 => "d1",
            DecoderFeature::Level2 => "d2",
            DecoderFeature::Both => "d1+d2",
        }
    }
}

/// Intermediate maps of one gated multi-level fusion.
#[derive(Clone, Debug)]
pub struct FusionState<'g, S: Scalar> {
    /// Compressed multi-level context.
    pub compressed: Var<'g, S>,
    /// Context after spatial and channel attention.
    pub enhanced: Var<'g, S>,
    /// Per-pixel, per-channel gate in (0, 1).
    pub gate: Var<'g, S>,
    /// Refined blend of the enhanced and shallowest encoder features.
    pub refined: Var<'g, S>,
    /// Memory input: the refined map followed by the decoder features.
    pub memory_input: Var<'g, S>,
}

#[derive(Debug)]
pub struct GatedMlf {
    pub channels: usize,
    pub compress: Ffn,
    pub spatial: Conv2d,
    pub channel: Conv2d,
    pub gate: Conv2d,
    pub refine: Ffn,
}

impl GatedMlf {
    /// `widths` are the encoder level widths; the output keeps the finest
    /// one.
    pub fn new<S: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<S>, widths: &[usize; LEVELS], rng: &mut R) -> Self {
        let g = ParamGroup::Other;
        let c = widths[0];
        let total: usize = widths.iter().sum();
        Self {
            channels: c,
            compress: Ffn::new(store, "gmlf.compress", total, 2 * c, c, rng),
            spatial: Conv2d::same(store, "gmlf.spatial", 1, 1, 7, true, g, rng),
            channel: Conv2d::same(store, "gmlf.channel", c, c, 1, true, g, rng),
            gate: Conv2d::same(store, "gmlf.gate", 2 * c, c, 1, true, g, rng),
            refine: Ffn::new(store, "gmlf.refine", c, 2 * c, c, rng),
        }
    }

    /// Runs the fusion. `decoder_features` are appended to the refined map
    /// after resizing to the finest encoder resolution. `force_gate`
    /// replaces the learned gate with a constant.
    pub fn forward<'g, S: Scalar>(
        &self,
        s: &Session<'g, S>,
        encoder: &FeaturePyramid<'g, S>,
        decoder_features: &[Var<'g, S>],
        force_gate: Option<f64>,
    ) -> Result<FusionState<'g, S>> {
        if encoder.levels.len() != LEVELS {
            return Err(Error::invalid(format!("gated fusion needs {LEVELS} levels, got {}", encoder.levels.len())));
        }
        let finest = encoder.level(1);
        let shape = finest.shape();
        let (h, w) = (shape[1], shape[2]);
        let resized = encoder
            .levels
            .iter()
            .map(|l| l.resize_bilinear(h, w))
            .collect::<Result<Vec<_>>>()?;
        let compressed = self.compress.forward(s, concat(&resized, 0)?)?;
        let spatial = self.spatial.forward(s, compressed.channel_mean()?)?.sigmoid();
        let channel = self.channel.forward(s, compressed.global_avg_pool()?)?.sigmoid();
        let enhanced = compressed.mul(channel)?.mul(spatial)?;
        let gate = match force_gate {
            Some(v) => s.constant(Tensor::full(&[self.channels, h, w], lit(v))),
            None => self.gate.forward(s, concat(&[finest, enhanced], 0)?)?.sigmoid(),
        };
        let blended = gate.mul(enhanced)?.add(gate.one_minus().mul(finest)?)?;
        let refined = self.refine.forward(s, blended)?;
        let memory_input = append_resized(refined, decoder_features)?;
        Ok(FusionState {
            compressed,
            enhanced,
            gate,
            refined,
            memory_input,
        })
    }
}

/// `concat(base, resize(extra_i))` along channels at `base`'s resolution.
pub fn append_resized<'g, S: Scalar>(base: Var<'g, S>, extra: &[Var<'g, S>]) -> Result<Var<'g, S>> {
    let shape = base.shape();
    let mut parts = vec![base];
    for e in extra {
        parts.push(e.resize_bilinear(shape[1], shape[2])?);
    }
    if parts.len() == 1 {
        Ok(base)
    } else {
        concat(&parts, 0)
    }
}

/// Origin of a memory entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryTag {
    /// Seeded from the first frame's coarse mask.
    Pseudo,
    Frame(usize),
}

#[derive(Clone, Debug)]
pub struct MemoryEntry<'g, S: Scalar> {
    pub tag: EntryTag,
    /// `d_k × tokens`.
    pub key: Var<'g, S>,
    /// `d_v × tokens`.
    pub value: Var<'g, S>,
}

/// FIFO of at most `capacity` key/value entries.
#[derive(Clone, Debug)]
pub struct MemoryBank<'g, S: Scalar> {
    entries: VecDeque<MemoryEntry<'g, S>>,
    capacity: usize,
    evicted: Vec<EntryTag>,
}

impl<'g, S: Scalar> MemoryBank<'g, S> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("memory capacity must be positive"));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity + 1),
            capacity,
            evicted: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Tags oldest first.
    pub fn tags(&self) -> Vec<EntryTag> {
        self.entries.iter().map(|e| e.tag).collect()
    }

    /// Tags of evicted entries, in eviction order.
    pub fn evicted(&self) -> &[EntryTag] {
        &self.evicted
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry<'g, S>> {
        self.entries.iter()
    }

    /// Appends an entry and evicts the oldest when over capacity.
    pub fn push(&mut self, entry: MemoryEntry<'g, S>) -> Result<Option<EntryTag>> {
        if let Some(first) = self.entries.front() {
            if first.key.shape()[0] != entry.key.shape()[0] || first.value.shape()[0] != entry.value.shape()[0] {
                return Err(Error::shape("memory_write", &first.value.shape(), &entry.value.shape()));
            }
        }
        self.entries.push_back(entry);
        if self.entries.len() > self.capacity {
            let tag = self.entries.pop_front().expect("over capacity").tag;
            self.evicted.push(tag);
            return Ok(Some(tag));
        }
        Ok(None)
    }
}

/// Result of reading the bank.
#[derive(Clone, Debug)]
pub struct MemoryRead<'g, S: Scalar> {
    /// Query map `d_k×H×W`; doubles as the next write key.
    pub query: Var<'g, S>,
    /// `tokens × stored tokens`, rows sum to 1.
    pub attention: Var<'g, S>,
    /// Temporally aggregated map `d_v×H×W`.
    pub context: Var<'g, S>,
}

/// Query/key projection and the value encoder. The value encoder is the
/// single projection used both by pseudo initialization and by writes.
#[derive(Debug)]
pub struct TemporalMemory {
    pub query: Conv2d,
    pub value_encoder: Conv2d,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Store detached keys and values, cutting backprop through time.
    pub detach: bool,
}

impl TemporalMemory {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        in_ch: usize,
        key_dim: usize,
        value_dim: usize,
        detach: bool,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Other;
        Self {
            query: Conv2d::same(store, "memory.query", in_ch, key_dim, 1, true, g, rng),
            value_encoder: Conv2d::same(store, "memory.value", in_ch, value_dim, 1, true, g, rng),
            key_dim,
            value_dim,
            detach,
        }
    }

    pub fn project_query<'g, S: Scalar>(&self, s: &Session<'g, S>, x_f: Var<'g, S>) -> Result<Var<'g, S>> {
        self.query.forward(s, x_f)
    }

    /// Value of `x_f` modulated by the probability map `p` (`1×H×W`).
    pub fn encode_value<'g, S: Scalar>(&self, s: &Session<'g, S>, x_f: Var<'g, S>, p: Var<'g, S>) -> Result<Var<'g, S>> {
        let (fs, ps) = (x_f.shape(), p.shape());
        if fs.len() != 3 || ps.len() != 3 || ps[0] != 1 || fs[1..] != ps[1..] {
            return Err(Error::shape("value_encoder", &fs, &ps));
        }
        self.value_encoder.forward(s, x_f.mul(p)?)
    }

    fn entry<'g, S: Scalar>(&self, tag: EntryTag, key: Var<'g, S>, value: Var<'g, S>) -> Result<MemoryEntry<'g, S>> {
        let tokens = |v: Var<'g, S>, d: usize| -> Result<Var<'g, S>> {
            let v = if self.detach { v.detach() } else { v };
            v.reshape(&[d, v.numel() / d])
        };
        Ok(MemoryEntry {
            tag,
            key: tokens(key, self.key_dim)?,
            value: tokens(value, self.value_dim)?,
        })
    }

    /// Seeds an empty bank from the first frame: the key is the projection
    /// of `x_f0`, the value encodes `x_f0` masked by the pseudo mask `p0`.
    pub fn pseudo_init<'g, S: Scalar>(
        &self,
        s: &Session<'g, S>,
        bank: &mut MemoryBank<'g, S>,
        x_f0: Var<'g, S>,
        p0: Var<'g, S>,
    ) -> Result<()> {
        if !bank.is_empty() {
            return Err(Error::MemoryNotEmpty(bank.len()));
        }
        let key = self.project_query(s, x_f0)?;
        let value = self.encode_value(s, x_f0, p0)?;
        bank.push(self.entry(EntryTag::Pseudo, key, value)?)?;
        Ok(())
    }

    /// Appends `(q_t, ValueEncoder(x_f·p_t))` under `Frame(frame)`.
    pub fn write<'g, S: Scalar>(
        &self,
        s: &Session<'g, S>,
        bank: &mut MemoryBank<'g, S>,
        frame: usize,
        q_t: Var<'g, S>,
        x_f: Var<'g, S>,
        p_t: Var<'g, S>,
    ) -> Result<Option<EntryTag>> {
        let (qs, fs) = (q_t.shape(), x_f.shape());
        if qs.len() != 3 || qs[0] != self.key_dim || qs[1..] != fs[1..] {
            return Err(Error::shape("memory_write", &qs, &fs));
        }
        let value = self.encode_value(s, x_f, p_t)?;
        bank.push(self.entry(EntryTag::Frame(frame), q_t, value)?)
    }

    /// Scaled dot-product attention of every query token over every stored
    /// token.
    pub fn read<'g, S: Scalar>(&self, s: &Session<'g, S>, bank: &MemoryBank<'g, S>, x_f: Var<'g, S>) -> Result<MemoryRead<'g, S>> {
        if bank.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let query = self.project_query(s, x_f)?;
        let shape = query.shape();
        let (h, w) = (shape[1], shape[2]);
        let q = query.reshape(&[self.key_dim, h * w])?;
        let keys: Vec<_> = bank.entries().map(|e| e.key).collect();
        let values: Vec<_> = bank.entries().map(|e| e.value).collect();
        let k = if keys.len() == 1 { keys[0] } else { concat(&keys, 1)? };
        let v = if values.len() == 1 { values[0] } else { concat(&values, 1)? };
        let scale: S = lit(1.0 / (self.key_dim as f64).sqrt());
        let attention = q.transpose()?.matmul(k)?.scale(scale).softmax(1)?;
        let context = v.matmul(attention.transpose()?)?.reshape(&[self.value_dim, h, w])?;
        Ok(MemoryRead {
            query,
            attention,
            context,
        })
    }
}

/// Recurrent state of the memory decoder.
#[derive(Clone, Debug)]
pub struct MemoryDecoderState<'g, S: Scalar> {
    pub hidden: Option<Var<'g, S>>,
    pub step: usize,
}

impl<S: Scalar> Default for MemoryDecoderState<'_, S> {
    fn default() -> Self {
        Self { hidden: None, step: 0 }
    }
}

/// Convolutional gated recurrence over `(x_f, context, h)` with a 1×1
/// mask head.
#[derive(Debug)]
pub struct MemoryDecoder {
    pub hidden: usize,
    pub update: Conv2d,
    pub candidate: Conv2d,
    pub head: Conv2d,
}

impl MemoryDecoder {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        in_ch: usize,
        context_ch: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Other;
        let total = in_ch + context_ch + hidden;
        Self {
            hidden,
            update: Conv2d::same(store, "memdec.update", total, hidden, 3, true, g, rng),
            candidate: Conv2d::same(store, "memdec.candidate", total, hidden, 3, true, g, rng),
            head: Conv2d::same(store, "memdec.head", hidden, 1, 1, true, g, rng),
        }
    }

    /// One step. Returns low-resolution mask logits and the next state.
    /// `force_update` pins the update gate to a constant.
    pub fn step<'g, S: Scalar>(
        &self,
        s: &Session<'g, S>,
        x_f: Var<'g, S>,
        context: Var<'g, S>,
        state: &MemoryDecoderState<'g, S>,
        force_update: Option<f64>,
    ) -> Result<(Var<'g, S>, MemoryDecoderState<'g, S>)> {
        let shape = x_f.shape();
        let hidden_shape = [self.hidden, shape[1], shape[2]];
        let prev = match state.hidden {
            Some(h) if h.shape() != hidden_shape => {
                return Err(Error::shape("memory_decode state", &h.shape(), &hidden_shape));
            }
            Some(h) => h,
            None => s.constant(Tensor::zeros(&hidden_shape)),
        };
        let joint = concat(&[x_f, context, prev], 0)?;
        let z = match force_update {
            Some(v) => s.constant(Tensor::full(&hidden_shape, lit(v))),
            None => self.update.forward(s, joint)?.sigmoid(),
        };
        let candidate = self.candidate.forward(s, joint)?.tanh();
        let hidden = z.one_minus().mul(prev)?.add(z.mul(candidate)?)?;
        let logits = self.head.forward(s, hidden)?;
        Ok((
            logits,
            MemoryDecoderState {
                hidden: Some(hidden),
                step: state.step + 1,
            },
        ))
    }
}
