//! The training loop: clip-parallel forward/backward, AdamW with two
//! learning rates, per-epoch checkpoints and the frozen-trunk audit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use vsod_core::losses::{total_loss, LossValues};
use vsod_core::moe::moe_regularizer;
use vsod_core::{ClipOptions, Graph, ParamGroup, ParamId, ParamStore, Session, Tensor, VideoClip, VsodModel};
use vsod_data::loader::flip_horizontal;
use vsod_data::{load_clip, pseudo_depth, read_manifest, sub_clip, ClipSampler, ManifestEntry, Window};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{DepthSource, RunConfig};
use crate::error::{Result, RunError};
use crate::optim::{clip_global_norm, AdamW};

/// Whole sequences of one split, loaded once.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub sequences: BTreeMap<String, VideoClip<f32>>,
}

impl Dataset {
    /// Loads every sequence listed in `root/manifest.txt`, substituting
    /// depth if requested.
    pub fn load(root: &Path, size: usize, depth: DepthSource) -> Result<Self> {
        let entries = read_manifest(root)?;
        if entries.is_empty() {
            return Err(RunError::Usage(format!("{} lists no sequences", root.display())));
        }
        let mut sequences = BTreeMap::new();
        for e in &entries {
            let clip = load_clip::<f32>(root, &e.sequence, 0, e.length, size)?;
            let clip = match depth {
                DepthSource::Actual => clip,
                DepthSource::Pseudo(mode) => pseudo_depth(&clip, mode),
            };
            sequences.insert(e.sequence.clone(), clip);
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            sequences,
        })
    }

    pub fn window(&self, w: &Window, len: usize) -> Result<VideoClip<f32>> {
        let seq = self
            .sequences
            .get(&w.sequence)
            .ok_or_else(|| RunError::Usage(format!("unknown sequence {}", w.sequence)))?;
        Ok(sub_clip(seq, w.start, len)?)
    }

    pub fn frame_count(&self) -> usize {
        self.sequences.values().map(|c| c.len()).sum()
    }
}

/// Builds the model for `config` with its seeded initialization.
pub fn build_model(config: &RunConfig) -> Result<(ParamStore<f32>, VsodModel)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = VsodModel::new(&mut store, config.model_config(), &mut rng)?;
    Ok((store, model))
}

/// Gradient of every bound parameter.
pub type Gradients = Vec<(ParamId, Tensor<f32>)>;

/// Forward and backward of one clip: loss values and parameter gradients.
pub fn clip_gradients(
    model: &VsodModel,
    store: &ParamStore<f32>,
    clip: &VideoClip<f32>,
    moe_lambda: f64,
) -> Result<(LossValues, Gradients)> {
    let graph = Graph::new();
    let s = Session::new(&graph, store);
    let out = model.process_clip(&s, clip, ClipOptions::default())?;
    let moe = moe_regularizer(&graph, &s.gate_records(), moe_lambda)?;
    let frames: Vec<_> = out.frames.iter().map(|b| (b.logits, &b.decoder)).collect();
    let loss = total_loss(&s, &frames, &clip.gt, moe)?;
    let values = loss.values();
    if ![values.total, values.pred, values.aux, values.moe].iter().all(|v| v.is_finite()) {
        return Err(RunError::Numeric(format!(
            "non-finite loss on {} frames {:?}: total {} pred {} aux {} moe {}",
            clip.sequence, clip.frames, values.total, values.pred, values.aux, values.moe
        )));
    }
    loss.total.backward()?;
    Ok((values, s.param_grads()))
}

/// Losses and gradient norm of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based index of the completed step.
    pub step: u64,
    pub losses: LossValues,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepLog {
    /// `step,L_total,L_pred,L_aux,L_moe`.
    pub fn csv(&self) -> String {
        let l = &self.losses;
        format!("{},{:.8},{:.8},{:.8},{:.8}", self.step, l.total, l.pred, l.aux, l.moe)
    }
}

pub const LOG_HEADER: &str = "step,L_total,L_pred,L_aux,L_moe";

pub struct Trainer {
    pub config: RunConfig,
    pub store: ParamStore<f32>,
    pub model: VsodModel,
    pub optimizer: AdamW<f32>,
    pub train: Dataset,
    sampler: ClipSampler,
    frozen: Vec<(ParamId, Tensor<f32>)>,
    epoch_cache: Option<(u64, Vec<Window>)>,
}

impl Trainer {
    /// A fresh run on `config.data/train`.
    pub fn new(config: RunConfig) -> Result<Self> {
        let train = Dataset::load(&config.data.join("train"), config.input_size, config.depth)?;
        Self::with_dataset(config, train)
    }

    pub fn with_dataset(config: RunConfig, train: Dataset) -> Result<Self> {
        config.validate().map_err(RunError::Usage)?;
        let (store, model) = build_model(&config)?;
        let sampler = ClipSampler::new(&train.entries, config.clip_len, config.seed)?;
        let frozen = store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Frozen)
            .map(|(id, p)| (id, p.value.clone()))
            .collect();
        let optimizer = AdamW::new(config.lr_adapter, config.lr_other, config.weight_decay);
        Ok(Self {
            config,
            store,
            model,
            optimizer,
            train,
            sampler,
            frozen,
            epoch_cache: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: RunConfig, train: Dataset, ck: &Checkpoint) -> Result<Self> {
        let stored = checkpoint::stored_config(ck)?;
        let diff = stored.architecture_diff(&config);
        if !diff.is_empty() {
            return Err(checkpoint::CheckpointError::ConfigMismatch(diff).into());
        }
        let mut t = Self::with_dataset(config, train)?;
        checkpoint::restore_params(ck, &mut t.store)?;
        t.optimizer = checkpoint::restore_optimizer(ck, &t.store, &t.config)?;
        t.frozen = t
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Frozen)
            .map(|(id, p)| (id, p.value.clone()))
            .collect();
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.len().div_ceil(self.config.batch)
    }

    /// Total optimizer steps of the run.
    pub fn total_steps(&self) -> usize {
        if self.config.steps > 0 {
            self.config.steps
        } else {
            self.config.epochs * self.steps_per_epoch()
        }
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step
    }

    fn window_at(&mut self, index: u64) -> Window {
        let per_epoch = self.sampler.len() as u64;
        let epoch = index / per_epoch;
        if self.epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.epoch_cache = Some((epoch, self.sampler.epoch(epoch)));
        }
        self.epoch_cache.as_ref().unwrap().1[(index % per_epoch) as usize].clone()
    }

    /// The clips of step `step` (0-based): the next `batch` windows of the
    /// sampler's epoch stream.
    pub fn batch(&mut self, step: u64) -> Result<Vec<VideoClip<f32>>> {
        let b = self.config.batch as u64;
        (0..b)
            .map(|i| {
                let w = self.window_at(step * b + i);
                let clip = self.train.window(&w, self.config.clip_len)?;
                Ok(if self.config.flip && self.flip_coin(step, i) {
                    flip_horizontal(&clip)
                } else {
                    clip
                })
            })
            .collect()
    }

    fn flip_coin(&self, step: u64, i: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (step << 8) ^ i ^ 0xF11F);
        rng.gen_bool(0.5)
    }

    /// One optimizer step over the next batch.
    pub fn step(&mut self) -> Result<StepLog> {
        let clips = self.batch(self.optimizer.step)?;
        let (model, store, lambda) = (&self.model, &self.store, self.config.moe_lambda);
        let results: Vec<_> = clips
            .par_iter()
            .map(|clip| clip_gradients(model, store, clip, lambda))
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        let mut losses = LossValues::default();
        let mut grads: BTreeMap<ParamId, Tensor<f32>> = BTreeMap::new();
        for (values, clip_grads) in &results {
            losses.total += values.total / n;
            losses.pred += values.pred / n;
            losses.aux += values.aux / n;
            losses.moe += values.moe / n;
            for (id, g) in clip_grads {
                match grads.get_mut(id) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                    None => {
                        grads.insert(*id, g.clone());
                    }
                }
            }
        }
        let inv = (1.0 / n) as f32;
        let mut grads: Vec<_> = grads.into_iter().map(|(id, g)| (id, g.map(|v| v * inv))).collect();
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(RunError::Numeric(format!(
                "non-finite gradient norm at step {}: total {} pred {} aux {} moe {}",
                self.optimizer.step + 1,
                losses.total,
                losses.pred,
                losses.aux,
                losses.moe
            )));
        }
        self.optimizer.update(&mut self.store, &grads);
        Ok(StepLog {
            step: self.optimizer.step,
            losses,
            grad_norm,
        })
    }

    /// Errors if any frozen parameter changed since construction.
    pub fn check_frozen(&self) -> Result<()> {
        for (id, value) in &self.frozen {
            if self.store.value(*id) != value {
                return Err(RunError::Numeric(format!("frozen parameter {} changed", self.store.get(*id).name)));
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        checkpoint::snapshot(&self.store, &self.optimizer, &self.config)
    }

    /// Runs until `total_steps`, calling `on_step` after each step and
    /// `on_epoch` at every epoch boundary and at the end.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
        mut on_epoch: impl FnMut(&Self, usize) -> Result<()>,
    ) -> Result<Vec<StepLog>> {
        let total = self.total_steps() as u64;
        let per_epoch = self.steps_per_epoch() as u64;
        let mut logs = Vec::new();
        while self.optimizer.step < total {
            let log = self.step()?;
            on_step(&log)?;
            logs.push(log);
            if log.step % per_epoch == 0 || log.step == total {
                self.check_frozen()?;
                on_epoch(self, log.step.div_ceil(per_epoch) as usize)?;
            }
        }
        Ok(logs)
    }
}

/// Trainable and frozen scalar counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamAudit {
    pub frozen: usize,
    pub adapter: usize,
    pub other: usize,
}

impl ParamAudit {
    pub fn of<S: vsod_core::Scalar>(store: &ParamStore<S>) -> Self {
        Self {
            frozen: store.count(ParamGroup::Frozen),
            adapter: store.count(ParamGroup::Adapter),
            other: store.count(ParamGroup::Other),
        }
    }

    /// Trainable over frozen scalars.
    pub fn ratio(&self) -> f64 {
        (self.adapter + self.other) as f64 / self.frozen as f64
    }
}

/// The `train` command: logs every step to `out/loss.csv` and writes
/// `out/epoch_NNN.ckpt` plus `out/last.ckpt` at each epoch.
pub fn cmd_train(config: RunConfig, resume: Option<&Path>, quiet: bool) -> Result<Vec<StepLog>> {
    let out = config.out.clone();
    fs::create_dir_all(&out).map_err(|e| RunError::io(&out, e))?;
    let train = Dataset::load(&config.data.join("train"), config.input_size, config.depth)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(config, train, &Checkpoint::load(path)?)?,
        None => Trainer::with_dataset(config, train)?,
    };
    let audit = ParamAudit::of(&trainer.store);
    if !quiet {
        println!(
            "parameters: frozen {} adapter {} other {} (trainable/frozen {:.3})",
            audit.frozen,
            audit.adapter,
            audit.other,
            audit.ratio()
        );
    }
    let log_path = out.join("loss.csv");
    let fresh = trainer.step_count() == 0;
    let file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| RunError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    if fresh {
        writeln!(log, "{LOG_HEADER}").map_err(|e| RunError::io(&log_path, e))?;
    }
    let logs = trainer.run(
        |l| {
            writeln!(log, "{}", l.csv()).map_err(|e| RunError::io(&log_path, e))?;
            if !quiet {
                println!("{}", l.csv());
            }
            Ok(())
        },
        |t, epoch| {
            let ck = t.checkpoint();
            ck.save(&out.join(format!("epoch_{epoch:03}.ckpt")))?;
            ck.save(&out.join("last.ckpt"))?;
            Ok(())
        },
    )?;
    log.flush().map_err(|e| RunError::io(&log_path, e))?;
    Ok(logs)
}
