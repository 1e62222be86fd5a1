use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;
use vsod_cli::checkpoint::{Checkpoint, CheckpointError, Payload};
use vsod_cli::eval::{cmd_eval, cmd_infer, evaluate_dataset, load_model, predict, CSV_HEADER};
use vsod_cli::gradcheck::{render, run_gradcheck};
use vsod_cli::train::{cmd_train, Dataset, ParamAudit, Trainer};
use vsod_cli::ablate::{run_study, Study};
use vsod_cli::{RunConfig, RunError};
use vsod_core::metrics::evaluate;
use vsod_core::ParamGroup;
use vsod_data::{generate_suite, Image, SuiteSpec};

/// A small suite: 3 train and 2 val sequences of 5 frames at 64×64.
fn suite() -> TempDir {
    let dir = TempDir::new().unwrap();
    let spec = SuiteSpec {
        train: 3,
        val: 2,
        length: 5,
        size: 64,
        seed: 3,
    };
    generate_suite(dir.path(), &spec).unwrap();
    dir
}

fn config(root: &Path) -> RunConfig {
    RunConfig {
        data: root.to_path_buf(),
        out: root.join("run"),
        batch: 2,
        steps: 2,
        ..RunConfig::default()
    }
}

fn trainer(cfg: &RunConfig) -> Trainer {
    let train = Dataset::load(&cfg.data.join("train"), cfg.input_size, cfg.depth).unwrap();
    Trainer::with_dataset(cfg.clone(), train).unwrap()
}

fn losses(t: &mut Trainer, steps: usize) -> Vec<f64> {
    (0..steps).map(|_| t.step().unwrap().losses.total).collect()
}

fn vsod(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vsod")).args(args).output().unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, cfg.to_text()).unwrap();
    path
}

#[test]
fn parameter_groups_get_their_learning_rates() {
    let dir = suite();
    let t = trainer(&config(dir.path()));
    let audit = ParamAudit::of(&t.store);
    assert!(audit.adapter > 0 && audit.other > 0);
    assert!(audit.ratio() < 0.3, "trainable/frozen ratio {}", audit.ratio());
    for (_, p) in t.store.iter() {
        let adapter_name = p.name.contains("lora") || p.name.contains("expert") || p.name.contains("gate.");
        let rate = t.optimizer.learning_rate(p.group);
        match p.group {
            ParamGroup::Adapter => assert_eq!(rate, Some(1e-4), "{}", p.name),
            ParamGroup::Other => assert_eq!(rate, Some(1e-3), "{}", p.name),
            ParamGroup::Frozen => assert_eq!(rate, None, "{}", p.name),
        }
        if p.name.starts_with("encoder.") && adapter_name {
            assert_eq!(p.group, ParamGroup::Adapter, "{}", p.name);
        }
    }
    let total = audit.frozen + audit.adapter + audit.other;
    assert_eq!(total, t.store.iter().map(|(_, p)| p.value.len()).sum::<usize>());
}

#[test]
fn training_leaves_the_trunk_untouched() {
    let dir = suite();
    let mut t = trainer(&config(dir.path()));
    let before: Vec<_> = t
        .store
        .iter()
        .map(|(_, p)| (p.group, p.value.clone()))
        .collect();
    losses(&mut t, 2);
    t.check_frozen().unwrap();
    let mut trained = 0;
    for ((group, old), (_, p)) in before.iter().zip(t.store.iter()) {
        if *group == ParamGroup::Frozen {
            assert_eq!(old, &p.value, "{}", p.name);
        } else if old != &p.value {
            trained += 1;
        }
    }
    assert!(trained > 0);
}

#[test]
fn seeded_runs_repeat_their_loss_curves() {
    let dir = suite();
    let cfg = config(dir.path());
    let a = losses(&mut trainer(&cfg), 3);
    let b = losses(&mut trainer(&cfg), 3);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6, "{a:?} vs {b:?}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = suite();
    let cfg = config(dir.path());
    let full = losses(&mut trainer(&cfg), 4);

    let mut first = trainer(&cfg);
    losses(&mut first, 2);
    let path = dir.path().join("half.ckpt");
    first.checkpoint().save(&path).unwrap();
    let train = Dataset::load(&cfg.data.join("train"), cfg.input_size, cfg.depth).unwrap();
    let mut resumed = Trainer::resume(cfg.clone(), train, &Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.step_count(), 2);
    let rest = losses(&mut resumed, 2);
    for (x, y) in full[2..].iter().zip(&rest) {
        assert!((x - y).abs() < 1e-6, "{full:?} vs {rest:?}");
    }
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let dir = suite();
    let mut t = trainer(&config(dir.path()));
    losses(&mut t, 1);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    t.checkpoint().save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    // Restoring into a fresh model and snapshotting again is lossless too.
    let ck = Checkpoint::load(&a).unwrap();
    let (_, store, _) = load_model(&ck, None).unwrap();
    for (_, p) in store.iter() {
        assert_eq!(&p.value, t.store.value(t.store.id(&p.name).unwrap()), "{}", p.name);
    }
    assert_eq!(&fs::read(&a).unwrap()[..4], b"M4CK");
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = suite();
    let t = trainer(&config(dir.path()));
    let bytes = t.checkpoint().encode();
    assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Format(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::decode(&bad).is_err());
}

#[test]
fn value_encoder_is_stored_once_and_feeds_every_frame() {
    let dir = suite();
    let cfg = config(dir.path());
    let t = trainer(&cfg);
    let ck = t.checkpoint();
    let value_entries: Vec<_> = ck.entries.iter().map(|e| e.name.as_str()).filter(|n| n.starts_with("memory.value")).collect();
    let mut value_entries = value_entries;
    value_entries.sort_unstable();
    assert_eq!(value_entries, ["memory.value.bias", "memory.value.weight"]);

    let val = Dataset::load(&cfg.data.join("val"), cfg.input_size, cfg.depth).unwrap();
    let clip = val.sequences.values().next().unwrap();
    let (_, store, model) = load_model(&ck, None).unwrap();
    let base = predict(&model, &store, clip, cfg.test_memory).unwrap();

    let mut probed = ck.clone();
    let entry = probed.entries.iter_mut().find(|e| e.name == "memory.value.weight").unwrap();
    match &mut entry.payload {
        Payload::F32(v) => v.iter_mut().for_each(|x| *x += 0.5),
        other => panic!("unexpected payload {other:?}"),
    }
    let (_, store, model) = load_model(&probed, None).unwrap();
    let moved = predict(&model, &store, clip, cfg.test_memory).unwrap();
    // Frame 0 reads only the pseudo entry; later frames read written frames.
    for t in [0, 1, clip.len() - 1] {
        let diff = base[t].iter().zip(&moved[t]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6, "frame {t} ignores the value encoder");
    }
}

#[test]
fn ground_truth_as_prediction_scores_perfectly() {
    let dir = suite();
    let val = Dataset::load(&dir.path().join("val"), 64, config(dir.path()).depth).unwrap();
    for clip in val.sequences.values() {
        for gt in &clip.gt {
            let gt = gt.to_f64_vec();
            let m = evaluate(&gt, &gt, 64, 64).unwrap();
            assert!((m.e - 1.0).abs() < 1e-9 && (m.s - 1.0).abs() < 1e-9);
            assert_eq!((m.f_max, m.mae), (1.0, 0.0));
        }
    }
}

#[test]
fn eval_writes_one_line_per_frame_and_sequence() {
    let dir = suite();
    let cfg = config(dir.path());
    let t = trainer(&cfg);
    let ckpt = dir.path().join("model.ckpt");
    t.checkpoint().save(&ckpt).unwrap();
    let out = dir.path().join("eval");
    let report = cmd_eval(&ckpt, &dir.path().join("val"), &out, Some(&cfg)).unwrap();
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    // 2 sequences of 5 frames, plus one mean line each.
    assert_eq!(lines.len() - 1, 10 + 2);
    assert_eq!(report.rows.len(), 10);
    assert_eq!(lines.iter().filter(|l| l.contains(",mean,")).count(), 2);
    assert!(out.join("summary.txt").is_file());

    let val = Dataset::load(&dir.path().join("val"), 64, cfg.depth).unwrap();
    let again = evaluate_dataset(&t.model, &t.store, &val, cfg.test_memory).unwrap();
    assert_eq!(again, report);
}

#[test]
fn eval_rejects_a_checkpoint_from_another_architecture() {
    let dir = suite();
    let cfg = config(dir.path());
    let ckpt = dir.path().join("model.ckpt");
    trainer(&cfg).checkpoint().save(&ckpt).unwrap();
    let mut other = cfg.clone();
    other.rank = 2;
    other.variant = vsod_core::MemoryVariant::Baseline;
    let err = cmd_eval(&ckpt, &dir.path().join("val"), &dir.path().join("e"), Some(&other)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("rank") && msg.contains("variant"), "{msg}");
    assert!(matches!(err, RunError::Checkpoint(CheckpointError::ConfigMismatch(ref d)) if d.len() == 2));
}

#[test]
fn infer_needs_no_annotations_and_is_deterministic() {
    let dir = suite();
    let cfg = config(dir.path());
    let t = trainer(&cfg);
    let ckpt = dir.path().join("model.ckpt");
    t.checkpoint().save(&ckpt).unwrap();
    let seq = dir.path().join("val").join("val000");
    let labeled = cmd_infer(&ckpt, &seq, &dir.path().join("labeled")).unwrap();

    // Strip every annotation from the sequence before inferring again.
    fs::remove_dir_all(seq.join("gt")).unwrap();
    let first = cmd_infer(&ckpt, &seq, &dir.path().join("a")).unwrap();
    let second = cmd_infer(&ckpt, &seq, &dir.path().join("b")).unwrap();
    assert_eq!(first.len(), 5);
    for ((a, b), c) in first.iter().zip(&second).zip(&labeled) {
        let bytes = fs::read(a).unwrap();
        assert_eq!(bytes, fs::read(b).unwrap());
        assert_eq!(bytes, fs::read(c).unwrap());
        let img = Image::read(a).unwrap();
        assert_eq!((img.width, img.height, img.channels), (64, 64, 1));
        assert_eq!(img.data.len(), 64 * 64);
    }
}

#[test]
fn train_command_logs_every_step_and_checkpoints() {
    let dir = suite();
    let mut cfg = config(dir.path());
    cfg.batch = 1;
    cfg.steps = 3;
    let logs = cmd_train(cfg.clone(), None, true).unwrap();
    assert_eq!(logs.len(), 3);
    let log = fs::read_to_string(cfg.out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,L_total,L_pred,L_aux,L_moe");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,"));
    assert!(cfg.out.join("last.ckpt").is_file());
    assert!(cfg.out.join("epoch_001.ckpt").is_file());
}

#[test]
fn gradcheck_reports_one_passing_row_per_op() {
    let reports = run_gradcheck(0).unwrap();
    let table = render(&reports);
    assert_eq!(table.lines().count(), reports.len() + 1);
    for r in &reports {
        assert!(r.passed(), "{} {}", r.name, r.max_rel_error);
        assert!(table.contains(r.name));
    }
}

#[test]
fn topk_study_emits_three_rows() {
    let dir = suite();
    let mut cfg = config(dir.path());
    cfg.steps = 1;
    cfg.batch = 1;
    let table = run_study(&cfg, Study::TopK, |_| {}).unwrap();
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["K=1", "K=2", "K=3"]);
    assert!(table.render().contains("K=3"));
}

#[test]
fn cliplen_study_follows_the_clip_length_axis() {
    let dir = suite();
    let base = config(dir.path());
    let labels: Vec<String> = Study::ClipLen.settings(&base).into_iter().map(|(l, _)| l).collect();
    assert_eq!(labels, ["T=2", "T=4", "T=6"]);
    let lens: Vec<usize> = Study::ClipLen.settings(&base).into_iter().map(|(_, c)| c.clip_len).collect();
    assert_eq!(lens, [2, 4, 6]);
}

#[test]
fn config_errors_carry_line_numbers() {
    let err = RunConfig::parse("rank = 4\n# note\nbogus line\n").unwrap_err();
    assert_eq!(err.line, 3);
    let err = RunConfig::parse("top_k = 4\n").unwrap_err();
    assert!(err.msg.contains("top_k"));
    let cfg = RunConfig::parse("seed = 11  # trailing comment\nvariant = baseline\n").unwrap();
    assert_eq!(cfg.seed, 11);
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap().to_text(), cfg.to_text());
}

#[test]
fn binary_exit_codes() {
    let dir = suite();
    assert_eq!(vsod(&["--help"]).status.code(), Some(0));
    assert_eq!(vsod(&[]).status.code(), Some(1));
    assert_eq!(vsod(&["train"]).status.code(), Some(1));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "rank = 4\nrank 5\n").unwrap();
    let out = vsod(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let mut missing = config(dir.path());
    missing.data = dir.path().join("nowhere");
    let path = write_config(dir.path(), &missing);
    assert_eq!(vsod(&["train", "--config", path.to_str().unwrap(), "--quiet"]).status.code(), Some(2));

    let mut blowup = config(dir.path());
    blowup.batch = 1;
    blowup.steps = 4;
    blowup.lr_other = 1e30;
    let path = write_config(dir.path(), &blowup);
    let out = vsod(&["train", "--config", path.to_str().unwrap(), "--quiet"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pred"));

    let seq = dir.path().join("val").join("val009");
    let out = vsod(&["infer", "--ckpt", "none.ckpt", "--seq", seq.to_str().unwrap(), "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}
