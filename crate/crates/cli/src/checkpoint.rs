//! Binary checkpoints.
//!
//! Layout, little-endian throughout: magic `M4CK`, format version `u32`,
//! entry count `u32`, then per entry a `u16` name length, the UTF-8 name,
//! a `u8` dtype code (0 = f32, 1 = f64, 2 = u8), a `u8` rank, one `u32`
//! per dimension and the raw values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use vsod_core::{ParamStore, Scalar, Tensor};

use crate::config::RunConfig;
use crate::optim::{AdamW, Moments};

pub const MAGIC: &[u8; 4] = b"M4CK";
pub const VERSION: u32 = 1;
pub const DTYPE_U8: u8 = 2;

pub const CONFIG_ENTRY: &str = "meta.config";
pub const STEP_ENTRY: &str = "meta.step";
const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("checkpoint config differs in {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),
    #[error("checkpoint config: {0}")]
    Config(String),
}

/// Raw values of one entry.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => f32::DTYPE_CODE,
            Payload::F64(_) => f64::DTYPE_CODE,
            Payload::U8(_) => DTYPE_U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * S::BYTES);
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        match S::DTYPE_CODE {
            0 => Payload::F32(bytes.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => Payload::F64(bytes.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        }
    }

    fn to_values<S: Scalar>(&self) -> Option<Vec<S>> {
        let mut bytes = Vec::new();
        match self {
            Payload::F32(v) if S::DTYPE_CODE == f32::DTYPE_CODE => v.iter().for_each(|x| bytes.extend(x.to_le_bytes())),
            Payload::F64(v) if S::DTYPE_CODE == f64::DTYPE_CODE => v.iter().for_each(|x| bytes.extend(x.to_le_bytes())),
            _ => return None,
        }
        Some(bytes.chunks(S::BYTES).map(S::read_le).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

/// An ordered list of named entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, payload: Payload) {
        self.entries.push(Entry {
            name: name.into(),
            dims,
            payload,
        });
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend((e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.dtype());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend((d as u32).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Format("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let payload = match dtype {
                0 => Payload::F32(r.take(n * 4)?.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => Payload::F64(r.take(n * 8)?.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => Payload::U8(r.take(n)?.to_vec()),
                d => return Err(CheckpointError::Format(format!("{name}: unknown dtype code {d}"))),
            };
            entries.push(Entry { name, dims, payload });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        fs::write(path, self.encode()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

/// Everything needed to resume: parameters, optimizer moments, config and
/// step counter.
pub fn snapshot<S: Scalar>(store: &ParamStore<S>, optimizer: &AdamW<S>, config: &RunConfig) -> Checkpoint {
    let mut ck = Checkpoint::default();
    for (_, p) in store.iter() {
        ck.push(p.name.clone(), p.value.shape().to_vec(), Payload::from_tensor(&p.value));
    }
    for (id, m) in &optimizer.moments {
        let name = &store.get(*id).name;
        ck.push(format!("{FIRST_MOMENT}{name}"), m.first.shape().to_vec(), Payload::from_tensor(&m.first));
        ck.push(format!("{SECOND_MOMENT}{name}"), m.second.shape().to_vec(), Payload::from_tensor(&m.second));
    }
    let text = config.to_text().into_bytes();
    ck.push(CONFIG_ENTRY, vec![text.len()], Payload::U8(text));
    ck.push(STEP_ENTRY, vec![8], Payload::U8(optimizer.step.to_le_bytes().to_vec()));
    ck
}

/// The stored run configuration.
pub fn stored_config(ck: &Checkpoint) -> Result<RunConfig, CheckpointError> {
    let Some(Entry {
        payload: Payload::U8(bytes),
        ..
    }) = ck.get(CONFIG_ENTRY)
    else {
        return Err(CheckpointError::Format(format!("missing {CONFIG_ENTRY}")));
    };
    let text = std::str::from_utf8(bytes).map_err(|_| CheckpointError::Format("config is not UTF-8".into()))?;
    RunConfig::parse(text).map_err(|e| CheckpointError::Config(e.to_string()))
}

pub fn stored_step(ck: &Checkpoint) -> Result<u64, CheckpointError> {
    match ck.get(STEP_ENTRY) {
        Some(Entry {
            payload: Payload::U8(b), ..
        }) if b.len() == 8 => Ok(u64::from_le_bytes(b[..].try_into().unwrap())),
        _ => Err(CheckpointError::Format(format!("missing {STEP_ENTRY}"))),
    }
}

fn tensor<S: Scalar>(e: &Entry) -> Result<Tensor<S>, CheckpointError> {
    let values = e
        .payload
        .to_values::<S>()
        .ok_or_else(|| CheckpointError::Mismatch(format!("{}: dtype {} does not match the model", e.name, e.payload.dtype())))?;
    if values.len() != e.payload.len() || e.dims.iter().product::<usize>() != values.len() {
        return Err(CheckpointError::Format(format!("{}: dims disagree with payload", e.name)));
    }
    Tensor::new(&e.dims, values).map_err(|err| CheckpointError::Format(format!("{}: {err}", e.name)))
}

/// Copies every parameter from `ck` into `store`. Every store parameter
/// must be present with its exact shape.
pub fn restore_params<S: Scalar>(ck: &Checkpoint, store: &mut ParamStore<S>) -> Result<(), CheckpointError> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let entry = ck
            .get(&name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing parameter {name}")))?;
        let t = tensor::<S>(entry)?;
        store
            .set(id, t)
            .map_err(|e| CheckpointError::Mismatch(format!("{name}: {e}")))?;
    }
    let known = |n: &str| {
        store.id(n).is_some()
            || n == CONFIG_ENTRY
            || n == STEP_ENTRY
            || n.strip_prefix(FIRST_MOMENT).or_else(|| n.strip_prefix(SECOND_MOMENT)).is_some_and(|p| store.id(p).is_some())
    };
    if let Some(extra) = ck.entries.iter().find(|e| !known(&e.name)) {
        return Err(CheckpointError::Mismatch(format!("unexpected entry {}", extra.name)));
    }
    Ok(())
}

/// Rebuilds optimizer state for `store` from `ck`.
pub fn restore_optimizer<S: Scalar>(
    ck: &Checkpoint,
    store: &ParamStore<S>,
    config: &RunConfig,
) -> Result<AdamW<S>, CheckpointError> {
    let mut opt = AdamW::new(config.lr_adapter, config.lr_other, config.weight_decay);
    opt.step = stored_step(ck)?;
    let mut moments = BTreeMap::new();
    for e in &ck.entries {
        let Some(name) = e.name.strip_prefix(FIRST_MOMENT) else {
            continue;
        };
        let id = store
            .id(name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("moment for unknown parameter {name}")))?;
        let second = ck
            .get(&format!("{SECOND_MOMENT}{name}"))
            .ok_or_else(|| CheckpointError::Format(format!("missing second moment of {name}")))?;
        moments.insert(
            id,
            Moments {
                first: tensor(e)?,
                second: tensor(second)?,
            },
        );
    }
    opt.moments = moments;
    Ok(opt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vsod_core::ParamGroup;

    fn sample() -> (ParamStore<f32>, AdamW<f32>) {
        let mut store = ParamStore::new();
        let a = store.add("a.w", Tensor::from_f64(&[2, 3], &[0.1, -0.2, 0.3, 1e-30, f64::MAX / 1e300, -0.0]).unwrap(), ParamGroup::Adapter);
        store.add("b", Tensor::from_f64(&[1], &[7.0]).unwrap(), ParamGroup::Frozen);
        let mut opt = AdamW::new(1e-4, 1e-3, 5e-4);
        opt.update(&mut store, &[(a, Tensor::full(&[2, 3], 0.5))]);
        (store, opt)
    }

    #[test]
    fn encode_decode_is_byte_identical() {
        let (store, opt) = sample();
        let ck = snapshot(&store, &opt, &RunConfig::default());
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn restore_is_lossless() {
        let (store, opt) = sample();
        let cfg = RunConfig::default();
        let ck = snapshot(&store, &opt, &cfg);
        let mut fresh = ParamStore::<f32>::new();
        fresh.add("a.w", Tensor::zeros(&[2, 3]), ParamGroup::Adapter);
        fresh.add("b", Tensor::zeros(&[1]), ParamGroup::Frozen);
        restore_params(&ck, &mut fresh).unwrap();
        let opt2 = restore_optimizer(&ck, &fresh, &cfg).unwrap();
        assert_eq!(opt2, opt);
        assert_eq!(snapshot(&fresh, &opt2, &cfg).encode(), ck.encode());
        assert_eq!(stored_config(&ck).unwrap(), cfg);
    }

    #[test]
    fn mismatches_are_reported() {
        let (store, opt) = sample();
        let ck = snapshot(&store, &opt, &RunConfig::default());
        let mut other = ParamStore::<f32>::new();
        other.add("a.w", Tensor::zeros(&[3, 2]), ParamGroup::Adapter);
        other.add("b", Tensor::zeros(&[1]), ParamGroup::Frozen);
        assert!(matches!(restore_params(&ck, &mut other), Err(CheckpointError::Mismatch(_))));
        let mut wrong_dtype = store.cast::<f64>();
        assert!(matches!(restore_params(&ck, &mut wrong_dtype), Err(CheckpointError::Mismatch(_))));
    }

    #[test]
    fn corrupt_bytes_are_format_errors() {
        let (store, opt) = sample();
        let bytes = snapshot(&store, &opt, &RunConfig::default()).encode();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(CheckpointError::Format(_))));
        assert!(matches!(Checkpoint::decode(b"M4CX"), Err(CheckpointError::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::decode(&extra), Err(CheckpointError::Format(_))));
    }
}
