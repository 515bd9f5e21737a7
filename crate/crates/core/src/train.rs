//! Subject-disjoint splits, the mini-batch training loop and batch scoring.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::ScoredSegment;
use crate::model::{HdFormer, SampleGradient};
use crate::optim::{clip_global_norm, Optimizer, OptimizerKind};
use crate::signal::Segment;

/// Derives an independent stream seed from the root seed (splitmix64 finaliser).
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed streams used by the pipeline.
pub mod streams {
    pub const SYNTH: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(0.0..=1.0).contains(&f) {
                out.push(format!("split fraction {name}={f} must lie in [0, 1]"));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            out.push(format!("split fractions sum to {sum}, expected 1"));
        }
        if self.train <= 0.0 {
            out.push(String::from("train fraction must be positive"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub split: SplitFractions,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            split: SplitFractions::default(),
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push(String::from("epochs must be positive"));
        }
        if self.batch_size == 0 {
            out.push(String::from("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            out.push(format!("grad_clip {} must be non-negative", self.grad_clip));
        }
        out.extend(self.split.problems());
        out
    }
}

/// Segment indices per split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn subjects<'a>(&self, segments: &'a [Segment], part: &[usize]) -> BTreeSet<&'a str> {
        part.iter().map(|&i| segments[i].subject_id.as_str()).collect()
    }

    /// Errors if any subject appears in two splits.
    pub fn assert_disjoint(&self, segments: &[Segment]) -> Result<()> {
        let parts = [
            ("train", self.subjects(segments, &self.train)),
            ("val", self.subjects(segments, &self.val)),
            ("test", self.subjects(segments, &self.test)),
        ];
        for i in 0..3 {
            for j in i + 1..3 {
                if let Some(s) = parts[i].1.intersection(&parts[j].1).next() {
                    return Err(Error::validation(
                        "split",
                        format!("subject {s} is in both {} and {}", parts[i].0, parts[j].0),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Assigns whole subjects to splits, stratified by label.
pub fn split_subjects(segments: &[Segment], fractions: SplitFractions, seed: u64) -> Result<Split> {
    if segments.is_empty() {
        return Err(Error::validation("dataset", "no segments"));
    }
    let problems = fractions.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let mut label_of: BTreeMap<&str, u8> = BTreeMap::new();
    for s in segments {
        if *label_of.entry(&s.subject_id).or_insert(s.label) != s.label {
            return Err(Error::validation(
                "labels",
                format!("subject {} has segments with different labels", s.subject_id),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut part_of: BTreeMap<&str, u8> = BTreeMap::new();
    for label in [0u8, 1] {
        let mut ids: Vec<&str> = label_of.iter().filter(|(_, &l)| l == label).map(|(&id, _)| id).collect();
        ids.shuffle(&mut rng);
        let n = ids.len() as f64;
        let n_test = libm::round(n * fractions.test) as usize;
        let n_val = libm::round(n * fractions.val) as usize;
        for (i, id) in ids.into_iter().enumerate() {
            let part = if i < n_test {
                2
            } else if i < n_test + n_val {
                1
            } else {
                0
            };
            part_of.insert(id, part);
        }
    }
    let mut split = Split::default();
    for (i, s) in segments.iter().enumerate() {
        match part_of[s.subject_id.as_str()] {
            0 => split.train.push(i),
            1 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    if split.train.is_empty() {
        return Err(Error::validation("split", "training split is empty"));
    }
    split.assert_disjoint(segments)?;
    Ok(split)
}

/// Runs independent per-item jobs; results must come back in index order.
pub trait Executor {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Equal to `train_loss` when the validation split is empty.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Mean BCE of every optimiser step, in order.
    pub batch_losses: Vec<f64>,
    /// Epoch whose parameters were kept (lowest validation loss).
    pub best_epoch: usize,
}

fn mean_loss<E: Executor>(model: &HdFormer, segments: &[Segment], idx: &[usize], exec: &E) -> Result<f64> {
    let losses = exec.map(idx.len(), |i| {
        let s = &segments[idx[i]];
        model.loss(&s.values, s.label as f64)
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / idx.len() as f64)
}

/// Trains with mini-batch BCE, keeping the parameters of the best validation epoch.
pub fn train<E: Executor>(
    model: &mut HdFormer,
    segments: &[Segment],
    split: &Split,
    config: &TrainConfig,
    exec: &E,
) -> Result<TrainReport> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    if split.train.is_empty() {
        return Err(Error::validation("dataset", "training split is empty"));
    }
    split.assert_disjoint(segments)?;

    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, streams::SHUFFLE));
    let mut order = split.train.clone();
    let mut report = TrainReport {
        epochs: Vec::new(),
        batch_losses: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, crate::numerics::ParamStore)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<Result<SampleGradient>> = exec.map(batch.len(), |i| {
                let s = &segments[batch[i]];
                model.loss_and_grad(&s.values, s.label as f64)
            });
            let mut grads: Vec<Vec<f64>> = model.params().tensors().map(|t| alloc::vec![0.0; t.numel()]).collect();
            let mut loss = 0.0;
            for r in results {
                let r = r?;
                loss += r.loss;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, x) in acc.iter_mut().zip(g) {
                        *a += x;
                    }
                }
            }
            let n = batch.len() as f64;
            loss /= n;
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            let norm = clip_global_norm(&mut grads, config.grad_clip);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training diverged at epoch {epoch}, batch {b}: loss {loss}, gradient norm {norm}"
                )));
            }
            optimizer.step(model.params_mut(), &grads)?;
            report.batch_losses.push(loss);
            epoch_loss += loss * n;
        }
        let train_loss = epoch_loss / order.len() as f64;
        let val_loss = if split.val.is_empty() {
            train_loss
        } else {
            mean_loss(model, segments, &split.val, exec)?
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        report.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(l, _)| val_loss < *l) {
            best = Some((val_loss, model.params().clone()));
            report.best_epoch = epoch;
        }
    }
    if let Some((_, params)) = best {
        model.load_params(&params)?;
    }
    Ok(report)
}

/// Scores the selected segments (all when `idx` is `None`) in index order.
pub fn score_segments<E: Executor>(
    model: &HdFormer,
    segments: &[Segment],
    idx: Option<&[usize]>,
    exec: &E,
) -> Result<Vec<ScoredSegment>> {
    let all: Vec<usize>;
    let idx = match idx {
        Some(i) => i,
        None => {
            all = (0..segments.len()).collect();
            &all
        }
    };
    exec.map(idx.len(), |i| {
        let s = &segments[idx[i]];
        model.predict(&s.values).map(|p| ScoredSegment {
            subject_id: s.subject_id.clone(),
            score: p.score,
            label: s.label,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, Scope};
    use crate::model::ModelConfig;
    use crate::moe::GateInput;
    use crate::signal::{generate_synthetic, ClassParams};
    use alloc::vec;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            segment_len: 1024,
            base_width: 64,
            patch_sizes: vec![32, 64],
            k: 4,
            encoder: EncoderConfig {
                scope: Scope::Windowed,
                depth: 1,
                d_model: 8,
                heads: 2,
                window: 2,
                shift: false,
                merge_stages: vec![],
                mlp_ratio: 2,
            },
            head_hidden: 4,
            gate_input: GateInput::Summary,
        }
    }

    fn corpus(n: usize) -> Vec<Segment> {
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let r = generate_synthetic(
                    format!("s{i:02}"),
                    8.0,
                    128.0,
                    ClassParams::for_label(label),
                    label,
                    i as u64,
                )
                .unwrap();
                let mut seg = crate::signal::segment(&r, 8.0).unwrap();
                seg.truncate(1);
                seg.pop().unwrap()
            })
            .collect()
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(7, 1), derive_seed(7, 2));
        assert_ne!(derive_seed(7, 1), derive_seed(8, 1));
        assert_eq!(derive_seed(7, 1), derive_seed(7, 1));
    }

    #[test]
    fn splits_are_stratified_and_disjoint() {
        let mut segs = corpus(20);
        // Two segments for one subject must stay together.
        let extra = segs[3].clone();
        segs.push(extra);
        let split = split_subjects(&segs, SplitFractions::default(), 5).unwrap();
        split.assert_disjoint(&segs).unwrap();
        assert_eq!(split.train.len() + split.val.len() + split.test.len(), segs.len());
        let test_pos: BTreeSet<&str> = split
            .test
            .iter()
            .filter(|&&i| segs[i].label == 1)
            .map(|&i| segs[i].subject_id.as_str())
            .collect();
        assert_eq!(test_pos.len(), 2);
        assert_eq!(split.subjects(&segs, &split.test).len(), 4);

        let bad = Split {
            train: vec![0],
            val: vec![],
            test: vec![0],
        };
        assert!(bad.assert_disjoint(&segs).is_err());
        assert!(split_subjects(&segs, SplitFractions { train: 0.5, val: 0.2, test: 0.2 }, 0).is_err());
        assert!(split_subjects(&[], SplitFractions::default(), 0).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let segs = corpus(6);
        let split = Split {
            train: (0..6).collect(),
            ..Split::default()
        };
        let mut model = HdFormer::new(&tiny_model(), 3).unwrap();
        let before = model.params().clone();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        train(&mut model, &segs, &split, &cfg, &Sequential).unwrap();
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn first_batch_loss_matches_initial_bce() {
        let segs = corpus(6);
        let split = Split {
            train: (0..6).collect(),
            ..Split::default()
        };
        let mut model = HdFormer::new(&tiny_model(), 3).unwrap();
        let expected: f64 = segs
            .iter()
            .map(|s| {
                let p = model.predict(&s.values).unwrap().score;
                if s.label == 1 {
                    -libm::log(p)
                } else {
                    -libm::log(1.0 - p)
                }
            })
            .sum::<f64>()
            / 6.0;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 6,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &segs, &split, &cfg, &Sequential).unwrap();
        assert!((report.batch_losses[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let segs = corpus(8);
        let split = split_subjects(&segs, SplitFractions { train: 0.75, val: 0.25, test: 0.0 }, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 3,
            learning_rate: 3e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = HdFormer::new(&tiny_model(), 4).unwrap();
            let r = train(&mut m, &segs, &split, &cfg, &Sequential).unwrap();
            (m, r)
        };
        let (ma, ra) = run();
        let (mb, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(ma.params(), mb.params());
        assert!(ra.epochs.last().unwrap().train_loss < ra.epochs[0].train_loss);
        let scored = score_segments(&ma, &segs, Some(&split.val), &Sequential).unwrap();
        assert_eq!(scored.len(), split.val.len());
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 0,
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.problems().len(), 3);
    }
}
