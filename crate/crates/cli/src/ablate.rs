//! Toy-scale ablation studies: one training run per setting of a single
//! axis, each evaluated on the validation split.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use vsod_core::memory::DecoderFeature;
use vsod_core::metrics::FrameMetrics;
use vsod_core::MemoryVariant;
use vsod_data::PseudoDepth;

use crate::config::{DepthSource, RunConfig};
use crate::error::{Result, RunError};
use crate::eval::{evaluate_dataset, EvalReport};
use crate::train::{Dataset, StepLog, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    TopK,
    ClipLen,
    FeatureLevel,
    PseudoDepth,
    Memory,
}

impl FromStr for Study {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "topk" => Study::TopK,
            "cliplen" => Study::ClipLen,
            "feature-level" => Study::FeatureLevel,
            "pseudo-depth" => Study::PseudoDepth,
            "memory" => Study::Memory,
            _ => return Err(format!("unknown study `{s}` (topk, cliplen, feature-level, pseudo-depth, memory)")),
        })
    }
}

impl Study {
    /// Row labels and the configs they train, derived from `base`.
    pub fn settings(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |label: String, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            (label, c)
        };
        match self {
            Study::TopK => (1..=3).map(|k| with(format!("K={k}"), &|c| c.top_k = k)).collect(),
            Study::ClipLen => [2, 4, 6]
                .into_iter()
                .map(|t| with(format!("T={t}"), &|c| c.clip_len = t))
                .collect(),
            Study::FeatureLevel => [DecoderFeature::Level1, DecoderFeature::Level2, DecoderFeature::Both]
                .into_iter()
                .map(|f| with(f.as_str().to_string(), &|c| c.feature = f))
                .collect(),
            Study::PseudoDepth => [
                DepthSource::Pseudo(PseudoDepth::Copy),
                DepthSource::Pseudo(PseudoDepth::Black),
                DepthSource::Actual,
            ]
            .into_iter()
            .map(|d| with(d.as_str().to_string(), &|c| c.depth = d))
            .collect(),
            Study::Memory => [MemoryVariant::Baseline, MemoryVariant::Memory, MemoryVariant::MemoryGatedMlf]
                .into_iter()
                .map(|v| with(v.as_str().to_string(), &|c| c.variant = v))
                .collect(),
        }
    }
}

/// Result of one training run and its validation pass.
pub struct RunOutcome {
    pub logs: Vec<StepLog>,
    pub report: EvalReport,
    pub trainer: Trainer,
}

/// Trains `config` on `train` and evaluates on `val`.
pub fn train_and_evaluate(config: RunConfig, train: Dataset, val: &Dataset) -> Result<RunOutcome> {
    let mut trainer = Trainer::with_dataset(config, train)?;
    let logs = trainer.run(|_| Ok(()), |_, _| Ok(()))?;
    let report = evaluate_dataset(&trainer.model, &trainer.store, val, trainer.config.test_memory)?;
    Ok(RunOutcome { logs, report, trainer })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub label: String,
    pub final_loss: f64,
    pub metrics: FrameMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyTable {
    pub study: Study,
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    pub fn row(&self, label: &str) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<16} {:>8} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            "setting", "L_total", "E", "S", "maxF", "meanF", "MAE"
        );
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{:<16} {:>8.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                r.label, r.final_loss, m.e, m.s, m.f_max, m.f_mean, m.mae
            );
        }
        out
    }
}

/// Runs every setting of `study`, loading each depth variant of the data
/// once.
pub fn run_study(base: &RunConfig, study: Study, mut progress: impl FnMut(&StudyRow)) -> Result<StudyTable> {
    let mut cache: HashMap<&'static str, (Dataset, Dataset)> = HashMap::new();
    let mut rows = Vec::new();
    for (label, config) in study.settings(base) {
        config.validate().map_err(RunError::Usage)?;
        let key = config.depth.as_str();
        if !cache.contains_key(key) {
            let train = Dataset::load(&config.data.join("train"), config.input_size, config.depth)?;
            let val = Dataset::load(&config.data.join("val"), config.input_size, config.depth)?;
            cache.insert(key, (train, val));
        }
        let (train, val) = &cache[key];
        let outcome = train_and_evaluate(config, train.clone(), val)?;
        let row = StudyRow {
            label,
            final_loss: outcome.logs.last().map_or(f64::NAN, |l| l.losses.total),
            metrics: outcome.report.overall,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(StudyTable { study, rows })
}
