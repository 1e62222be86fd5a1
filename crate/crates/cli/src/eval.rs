//! Evaluation reports and mask inference.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use vsod_core::metrics::{evaluate, mean_metrics, FrameMetrics};
use vsod_core::{ClipOptions, Graph, ParamStore, Session, VideoClip, VsodModel};
use vsod_data::pnm::{to_byte, Image};
use vsod_data::synth::frame_name;
use vsod_data::load_unlabeled_clip;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::error::{Result, RunError};
use crate::train::{build_model, Dataset};

/// Runs the whole clip prompt-free and returns each frame's mask in
/// `[0, 1]`, row-major.
pub fn predict(model: &VsodModel, store: &ParamStore<f32>, clip: &VideoClip<f32>, capacity: usize) -> Result<Vec<Vec<f64>>> {
    let graph = Graph::new();
    let s = Session::new(&graph, store);
    let options = ClipOptions {
        capacity: Some(capacity),
        force_gate: None,
    };
    let out = model.process_clip(&s, clip, options)?;
    let masks: Vec<Vec<f64>> = out.frames.iter().map(|b| b.mask.value().to_f64_vec()).collect();
    if masks.iter().flatten().any(|v| !v.is_finite()) {
        return Err(RunError::Numeric(format!("non-finite mask on {}", clip.sequence)));
    }
    Ok(masks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRow {
    pub sequence: String,
    pub frame: usize,
    pub metrics: FrameMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<FrameRow>,
    /// Per-sequence means, in sequence order.
    pub sequences: Vec<(String, FrameMetrics)>,
    /// Mean over all frames.
    pub overall: FrameMetrics,
}

pub const CSV_HEADER: &str = "sequence,frame,E,S,F,MAE";

fn csv_metrics(m: &FrameMetrics) -> String {
    format!("{:.6},{:.6},{:.6},{:.6}", m.e, m.s, m.f_max, m.mae)
}

impl EvalReport {
    /// Header, one line per frame, then one `<sequence>,mean,...` line per
    /// sequence.
    pub fn csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.sequence, r.frame, csv_metrics(&r.metrics));
        }
        for (seq, m) in &self.sequences {
            let _ = writeln!(out, "{seq},mean,{}", csv_metrics(m));
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<12} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "sequence", "E", "S", "maxF", "meanF", "MAE");
        let mut line = |name: &str, m: &FrameMetrics| {
            let _ = writeln!(out, "{name:<12} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}", m.e, m.s, m.f_max, m.f_mean, m.mae);
        };
        for (seq, m) in &self.sequences {
            line(seq, m);
        }
        line("all", &self.overall);
        out
    }
}

/// Metrics of every frame of every sequence in `data`.
pub fn evaluate_dataset(model: &VsodModel, store: &ParamStore<f32>, data: &Dataset, capacity: usize) -> Result<EvalReport> {
    let per_seq: Vec<Vec<FrameRow>> = data
        .sequences
        .par_iter()
        .map(|(name, clip)| {
            let masks = predict(model, store, clip, capacity)?;
            let (h, w) = clip.size();
            masks
                .iter()
                .zip(&clip.gt)
                .zip(&clip.frames)
                .map(|((mask, gt), &frame)| {
                    Ok(FrameRow {
                        sequence: name.clone(),
                        frame,
                        metrics: evaluate(mask, &gt.to_f64_vec(), h, w)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let sequences = per_seq
        .iter()
        .map(|rows| {
            let m: Vec<_> = rows.iter().map(|r| r.metrics).collect();
            (rows[0].sequence.clone(), mean_metrics(&m).expect("sequences have frames"))
        })
        .collect();
    let rows: Vec<FrameRow> = per_seq.into_iter().flatten().collect();
    let all: Vec<_> = rows.iter().map(|r| r.metrics).collect();
    let overall = mean_metrics(&all).ok_or_else(|| RunError::Usage("nothing to evaluate".into()))?;
    Ok(EvalReport {
        rows,
        sequences,
        overall,
    })
}

/// Rebuilds the model stored in a checkpoint. With `expected`, every
/// architecture field must agree with the stored config.
pub fn load_model(ck: &Checkpoint, expected: Option<&RunConfig>) -> Result<(RunConfig, ParamStore<f32>, VsodModel)> {
    let config = checkpoint::stored_config(ck)?;
    if let Some(exp) = expected {
        let diff = config.architecture_diff(exp);
        if !diff.is_empty() {
            return Err(CheckpointError::ConfigMismatch(diff).into());
        }
    }
    let (mut store, model) = build_model(&config)?;
    checkpoint::restore_params(ck, &mut store)?;
    Ok((config, store, model))
}

/// The `eval` command. Writes `metrics.csv` and `summary.txt` into `out`.
pub fn cmd_eval(ckpt: &Path, data: &Path, out: &Path, expected: Option<&RunConfig>) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt)?;
    let (config, store, model) = load_model(&ck, expected)?;
    let dataset = Dataset::load(data, config.input_size, config.depth)?;
    let report = evaluate_dataset(&model, &store, &dataset, config.test_memory)?;
    fs::create_dir_all(out).map_err(|e| RunError::io(out, e))?;
    for (name, text) in [("metrics.csv", report.csv()), ("summary.txt", report.table())] {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| RunError::io(&path, e))?;
    }
    Ok(report)
}

/// Number of consecutive `rgb/NNNN.ppm` frames from 0.
pub fn count_frames(seq_dir: &Path) -> usize {
    (0..)
        .take_while(|&t| seq_dir.join("rgb").join(frame_name(t, "ppm")).is_file())
        .count()
}

/// The `infer` command: one 8-bit PGM mask per frame of `seq_dir`. Only
/// `rgb/` and `depth/` are read.
pub fn cmd_infer(ckpt: &Path, seq_dir: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(ckpt)?;
    let (config, store, model) = load_model(&ck, None)?;
    let frames = count_frames(seq_dir);
    let name = seq_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| RunError::Usage(format!("{} is not a sequence directory", seq_dir.display())))?;
    let root = seq_dir.parent().unwrap_or(Path::new("."));
    if frames == 0 {
        // Surface the loader's error naming the first missing file.
        load_unlabeled_clip::<f32>(root, name, 0, 1, config.input_size)?;
    }
    let clip = load_unlabeled_clip::<f32>(root, name, 0, frames, config.input_size)?;
    let clip = match config.depth {
        crate::config::DepthSource::Actual => clip,
        crate::config::DepthSource::Pseudo(mode) => vsod_data::pseudo_depth(&clip, mode),
    };
    let masks = predict(&model, &store, &clip, config.test_memory)?;
    let (h, w) = clip.size();
    let mut written = Vec::with_capacity(masks.len());
    for (t, mask) in masks.iter().enumerate() {
        let path = out.join(frame_name(t, "pgm"));
        Image::new(w, h, 1, mask.iter().map(|&v| to_byte(v)).collect())?.write(&path)?;
        written.push(path);
    }
    Ok(written)
}
