//! The subcommands as library calls: synthesis, preprocessing, cost tables,
//! training and evaluation.

use std::path::{Path, PathBuf};

use hdformer_core::metrics::{evaluate, roc_auc, EvalReport, ScoredSegment};
use hdformer_core::model::HdFormer;
use hdformer_core::signal::{generate_synthetic, preprocess, segment, Segment, SignalRecord, TARGET_FS};
use hdformer_core::train::{derive_seed, score_segments, split_subjects, streams, train, Executor, Split, TrainReport};

use crate::config::{EvalSplit, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::exec::Parallel;
use crate::io::{read_checkpoint, write_atomic, write_checkpoint, write_waveform, Manifest, ManifestEntry};
use crate::report;

pub const CHECKPOINT_FILE: &str = "model.hdck";

/// Writes one waveform per subject plus the manifest; labels alternate 0, 1, 0, …
pub fn synthesize(cfg: &ExperimentConfig) -> Result<Manifest> {
    let dir = cfg.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let root = derive_seed(cfg.seed, streams::SYNTH);
    let s = &cfg.synth;
    let entries = Parallel.map(s.n_subjects, |i| -> Result<ManifestEntry> {
        let label = (i % 2) as u8;
        let params = if label == 1 { s.positive } else { s.negative };
        let id = format!("subj{i:04}");
        let rec = generate_synthetic(id.clone(), s.duration_s, s.fs as f64, params, label, derive_seed(root, i as u64))?;
        let file = PathBuf::from(format!("{id}.ppg"));
        write_waveform(&dir.join(&file), s.fs, &rec.samples)?;
        Ok(ManifestEntry {
            path: file,
            subject_id: id,
            label,
            fs: s.fs,
        })
    });
    let manifest = Manifest {
        entries: entries.into_iter().collect::<Result<_>>()?,
        comments: vec![("seed".into(), cfg.seed.to_string())],
    };
    manifest.write(&cfg.manifest)?;
    Ok(manifest)
}

/// Loads, preprocesses and segments every manifest record.
pub fn load_records(cfg: &ExperimentConfig) -> Result<Vec<SignalRecord>> {
    let manifest = Manifest::read(&cfg.manifest)?;
    if manifest.entries.is_empty() {
        return Err(CliError::Data(format!("{}: manifest lists no records", cfg.manifest.display())));
    }
    let raw = manifest.load_records(&cfg.manifest)?;
    Parallel
        .map(raw.len(), |i| preprocess(&raw[i], cfg.denoise_window))
        .into_iter()
        .map(|r| r.map_err(CliError::from))
        .collect()
}

pub fn segments_of(cfg: &ExperimentConfig, records: &[SignalRecord]) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(segment(r, cfg.segment_s)?);
    }
    if out.is_empty() {
        return Err(CliError::Data(format!(
            "no record is at least {} s long; nothing to segment",
            cfg.segment_s
        )));
    }
    Ok(out)
}

pub fn load_segments(cfg: &ExperimentConfig) -> Result<Vec<Segment>> {
    segments_of(cfg, &load_records(cfg)?)
}

/// Writes preprocessed 128 Hz records, their manifest and per-subject segment counts.
pub fn preprocess_cmd(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let records = load_records(cfg)?;
    let dir = cfg.out_dir.join("preprocessed");
    let mut manifest = Manifest {
        entries: Vec::new(),
        comments: vec![("seed".into(), cfg.seed.to_string())],
    };
    let mut counts = String::from("subject_id,label,samples,segments\n");
    for r in &records {
        let file = PathBuf::from(format!("{}.ppg", r.subject_id));
        write_waveform(&dir.join(&file), TARGET_FS as u32, &r.samples)?;
        let n = segment(r, cfg.segment_s)?.len();
        counts.push_str(&format!("{},{},{},{n}\n", r.subject_id, r.label, r.samples.len()));
        manifest.entries.push(ManifestEntry {
            path: file,
            subject_id: r.subject_id.clone(),
            label: r.label,
            fs: TARGET_FS as u32,
        });
    }
    manifest.write(&dir.join("manifest.csv"))?;
    write_atomic(&dir.join("segments.csv"), counts.as_bytes())?;
    Ok(dir)
}

pub fn tokenize_stats(cfg: &ExperimentConfig) -> Result<String> {
    let rows = report::cost_rows(cfg.model.base_width, &cfg.stats.ks, cfg.stats.block, cfg.stats.budget)?;
    let csv = report::cost_csv(&rows);
    write_atomic(&cfg.out_dir.join("tokenize_stats.csv"), csv.as_bytes())?;
    Ok(csv)
}

pub fn split_for(cfg: &ExperimentConfig, segments: &[Segment]) -> Result<Split> {
    Ok(split_subjects(segments, cfg.train.split, derive_seed(cfg.seed, streams::SPLIT))?)
}

fn select(split: &Split, which: EvalSplit, n: usize) -> Vec<usize> {
    match which {
        EvalSplit::Train => split.train.clone(),
        EvalSplit::Val => split.val.clone(),
        EvalSplit::Test => split.test.clone(),
        EvalSplit::All => (0..n).collect(),
    }
}

fn split_name(which: EvalSplit) -> &'static str {
    match which {
        EvalSplit::Train => "train",
        EvalSplit::Val => "val",
        EvalSplit::Test => "test",
        EvalSplit::All => "all",
    }
}

/// Scores the configured split and writes metrics, ROC and score files into `dir`.
pub fn evaluate_into(
    cfg: &ExperimentConfig,
    model: &HdFormer,
    segments: &[Segment],
    split: &Split,
    dir: &Path,
) -> Result<EvalReport> {
    let idx = select(split, cfg.eval_split, segments.len());
    if idx.is_empty() {
        return Err(CliError::Data(format!("the {} split is empty", split_name(cfg.eval_split))));
    }
    let scored = score_segments(model, segments, Some(&idx), &Parallel)?;
    let rep = evaluate(&scored, cfg.threshold, cfg.aggregation)?;
    let name = split_name(cfg.eval_split);
    write_atomic(&dir.join("metrics.json"), report::report_json(&rep, cfg.seed, name).as_bytes())?;
    write_atomic(&dir.join("metrics.csv"), report::metrics_csv(&rep, cfg.seed).as_bytes())?;
    write_atomic(&dir.join("roc.csv"), report::roc_csv(&rep.roc, cfg.seed).as_bytes())?;
    write_atomic(&dir.join("scores.csv"), report::scores_csv(&scored, cfg.seed).as_bytes())?;
    Ok(rep)
}

pub struct TrainOutcome {
    pub model: HdFormer,
    pub report: TrainReport,
    pub eval: EvalReport,
    pub checkpoint: PathBuf,
}

/// Trains on the manifest, checkpoints the best-validation model and evaluates it.
pub fn train_on(cfg: &ExperimentConfig, segments: &[Segment]) -> Result<TrainOutcome> {
    let split = split_for(cfg, segments)?;
    let mut model = HdFormer::new(&cfg.model, derive_seed(cfg.seed, streams::INIT))?;
    let report = train(&mut model, segments, &split, &cfg.train, &Parallel)?;

    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    write_checkpoint(&checkpoint, &cfg.model_toml(), model.params(), cfg.checkpoint_dtype)?;
    write_atomic(&cfg.out_dir.join("loss.csv"), report::loss_csv(&report, cfg.seed).as_bytes())?;
    let mut parts = String::from("subject_id,split\n");
    for (name, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for s in split.subjects(segments, idx) {
            parts.push_str(&format!("{s},{name}\n"));
        }
    }
    write_atomic(&cfg.out_dir.join("split.csv"), parts.as_bytes())?;
    let eval = evaluate_into(cfg, &model, segments, &split, &cfg.out_dir)?;
    Ok(TrainOutcome {
        model,
        report,
        eval,
        checkpoint,
    })
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    train_on(cfg, &load_segments(cfg)?)
}

/// Rebuilds the model stored in `checkpoint` and evaluates it into `<out_dir>/eval`.
pub fn eval_cmd(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EvalReport> {
    let (metadata, params) = read_checkpoint(checkpoint)?;
    let cfg = cfg.with_model_from(&metadata)?;
    let mut model = HdFormer::new(&cfg.model, 0)?;
    model
        .load_params(&params)
        .map_err(|e| CliError::Data(format!("{}: {e}", checkpoint.display())))?;
    let segments = load_segments(&cfg)?;
    let split = split_for(&cfg, &segments)?;
    evaluate_into(&cfg, &model, &segments, &split, &cfg.out_dir.join("eval"))
}

/// ROC curve of a scores file, written to `<out_dir>/roc.csv`; returns the AUC.
pub fn roc_cmd(cfg: &ExperimentConfig, scores: &Path) -> Result<(f64, PathBuf)> {
    let text = std::fs::read_to_string(scores).map_err(|e| CliError::io(scores, e))?;
    let scored: Vec<ScoredSegment> = report::parse_scores_csv(&text)?;
    let s: Vec<f64> = scored.iter().map(|r| r.score).collect();
    let l: Vec<u8> = scored.iter().map(|r| r.label).collect();
    let roc = roc_auc(&s, &l)?;
    let path = cfg.out_dir.join("roc.csv");
    write_atomic(&path, report::roc_csv(&roc.points, cfg.seed).as_bytes())?;
    Ok((roc.auc, path))
}
