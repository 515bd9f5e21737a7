//! Record- and patient-level confusion matrices, ROC curves and AUC.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    /// Positive iff `score >= threshold`.
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut cm = ConfusionMatrix::default();
        for (&s, &y) in scores.iter().zip(labels) {
            cm.record(s >= threshold, y == 1);
        }
        cm
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `TP / (TP + FN)`; NaN without positives.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `TN / (TN + FP)`; NaN without negatives.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive; the first point uses `+inf`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC over every distinct score, with trapezoidal AUC (ties contribute half).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<Roc> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_auc", &[scores.len()], &[labels.len()]));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {bad}")));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::validation("roc input", "both classes must be present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    let mut points = Vec::with_capacity(scores.len() + 1);
    points.push(RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (prev_tp, prev_fp) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        auc += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(Roc {
        points,
        auc: auc / (pos as f64 * neg as f64),
    })
}

/// How a subject's segment scores become one decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Mean segment score, then threshold.
    MeanScore,
    /// Positive iff a strict majority of segments are positive.
    MajorityVote,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::MeanScore => "mean_score",
            Aggregation::MajorityVote => "majority_vote",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean_score" | "mean" => Some(Aggregation::MeanScore),
            "majority_vote" | "majority" => Some(Aggregation::MajorityVote),
            _ => None,
        }
    }
}

/// Model score of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSegment {
    pub subject_id: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientScore {
    pub subject_id: String,
    /// Mean score, or the fraction of positive segments under majority voting.
    pub score: f64,
    pub predicted: bool,
    pub label: u8,
    pub segments: usize,
}

/// Groups segments by subject (sorted by id). Mixed labels within a subject are an error.
pub fn aggregate_patients(records: &[ScoredSegment], aggregation: Aggregation, threshold: f64) -> Result<Vec<PatientScore>> {
    let mut groups: BTreeMap<&str, (Vec<f64>, u8)> = BTreeMap::new();
    for r in records {
        let entry = groups.entry(&r.subject_id).or_insert_with(|| (Vec::new(), r.label));
        if entry.1 != r.label {
            return Err(Error::validation(
                "labels",
                format!("subject {} has segments with different labels", r.subject_id),
            ));
        }
        entry.0.push(r.score);
    }
    Ok(groups
        .into_iter()
        .map(|(id, (scores, label))| {
            let n = scores.len();
            let (score, predicted) = match aggregation {
                Aggregation::MeanScore => {
                    let m = scores.iter().sum::<f64>() / n as f64;
                    (m, m >= threshold)
                }
                Aggregation::MajorityVote => {
                    let votes = scores.iter().filter(|&&s| s >= threshold).count();
                    (votes as f64 / n as f64, 2 * votes > n)
                }
            };
            PatientScore {
                subject_id: String::from(id),
                score,
                predicted,
                label,
                segments: n,
            }
        })
        .collect())
}

/// Metrics at one aggregation level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMetrics {
    pub confusion: ConfusionMatrix,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
}

impl LevelMetrics {
    fn new(confusion: ConfusionMatrix, auc: Option<f64>) -> Self {
        LevelMetrics {
            sensitivity: confusion.sensitivity(),
            specificity: confusion.specificity(),
            accuracy: confusion.accuracy(),
            confusion,
            auc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub aggregation: Aggregation,
    pub record: LevelMetrics,
    pub patient: LevelMetrics,
    /// Record-level ROC (empty when only one class is present).
    pub roc: Vec<RocPoint>,
    pub patients: Vec<PatientScore>,
}

pub fn evaluate(records: &[ScoredSegment], threshold: f64, aggregation: Aggregation) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::validation("evaluation set", "no scored segments"));
    }
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let record_cm = ConfusionMatrix::from_scores(&scores, &labels, threshold);
    let roc = roc_auc(&scores, &labels).ok();

    let patients = aggregate_patients(records, aggregation, threshold)?;
    let mut patient_cm = ConfusionMatrix::default();
    for p in &patients {
        patient_cm.record(p.predicted, p.label == 1);
    }
    let p_scores: Vec<f64> = patients.iter().map(|p| p.score).collect();
    let p_labels: Vec<u8> = patients.iter().map(|p| p.label).collect();
    let patient_auc = roc_auc(&p_scores, &p_labels).ok().map(|r| r.auc);

    Ok(EvalReport {
        threshold,
        aggregation,
        record: LevelMetrics::new(record_cm, roc.as_ref().map(|r| r.auc)),
        patient: LevelMetrics::new(patient_cm, patient_auc),
        roc: roc.map(|r| r.points).unwrap_or_default(),
        patients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                total += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / pairs
    }

    fn seg(id: &str, score: f64, label: u8) -> ScoredSegment {
        ScoredSegment {
            subject_id: id.into(),
            score,
            label,
        }
    }

    #[test]
    fn confusion_examples() {
        let cm = ConfusionMatrix::from_scores(&[1.0, 1.0, 1.0], &[1, 1, 1], 0.5);
        assert_eq!((cm.sensitivity(), cm.accuracy()), (1.0, 1.0));
        assert!(cm.specificity().is_nan());
        let cm = ConfusionMatrix::from_scores(&[0.9, 0.2], &[1, 0], 0.5);
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (1, 1, 0, 0));
        assert_eq!(cm.accuracy(), 1.0);
    }

    #[test]
    fn patient_mean_rescues_a_missed_record() {
        let records = [seg("a", 0.4, 1), seg("a", 0.9, 1), seg("b", 0.1, 0)];
        let report = evaluate(&records, 0.5, Aggregation::MeanScore).unwrap();
        assert_eq!(report.record.confusion.fn_, 1);
        assert_eq!(report.record.confusion.tp, 1);
        let a = &report.patients[0];
        assert!((a.score - 0.65).abs() < 1e-15 && a.predicted);
        assert_eq!(report.patient.confusion.tp, 1);
        assert_eq!(report.patient.confusion.fn_, 0);
        assert_eq!(report.record.confusion.total(), 3);
        assert_eq!(report.patient.confusion.total(), 2);
        assert!(report.patient.accuracy >= report.record.accuracy);

        let vote = evaluate(&records, 0.5, Aggregation::MajorityVote).unwrap();
        // One of two segments positive is not a strict majority.
        assert!(!vote.patients[0].predicted);
    }

    #[test]
    fn evaluate_rejects_empty_and_mixed_labels() {
        assert!(evaluate(&[], 0.5, Aggregation::MeanScore).is_err());
        let mixed = [seg("a", 0.4, 1), seg("a", 0.9, 0)];
        assert!(evaluate(&mixed, 0.5, Aggregation::MeanScore).is_err());
        let single = evaluate(&[seg("a", 0.4, 1)], 0.5, Aggregation::MeanScore).unwrap();
        assert!(single.record.auc.is_none() && single.roc.is_empty());
    }

    #[test]
    fn roc_examples() {
        let roc = roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(roc.auc, 1.0);
        assert_eq!(roc.points.first().unwrap().tpr, 0.0);
        let last = roc.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(roc_auc(&[f64::NAN, 0.2], &[1, 0]).is_err());
        let tied = roc_auc(&[0.5, 0.5], &[1, 0]).unwrap();
        assert_eq!(tied.auc, 0.5);
    }

    #[test]
    fn random_scores_give_chance_auc() {
        for seed in 0..10 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..4000).map(|_| r.random()).collect();
            let labels: Vec<u8> = (0..4000).map(|_| r.random_range(0..2)).collect();
            let auc = roc_auc(&scores, &labels).unwrap().auc;
            assert!((auc - 0.5).abs() < 0.05, "seed {seed}: {auc}");
        }
    }

    proptest! {
        #[test]
        fn auc_equals_pairwise_statistic(
            data in proptest::collection::vec((0u8..12, 0u8..2), 2..200),
        ) {
            // Coarse integer scores force many ties.
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 11.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, y)| *y).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let auc = roc_auc(&scores, &labels).unwrap().auc;
            prop_assert!((auc - pairwise_auc(&scores, &labels)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&auc));
        }

        #[test]
        fn auc_invariant_under_monotone_maps(
            data in proptest::collection::vec((-3.0f64..3.0, 0u8..2), 2..100),
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let base = roc_auc(&scores, &labels).unwrap().auc;
            let exp: Vec<f64> = scores.iter().map(|s| libm::exp(*s)).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
            prop_assert_eq!(roc_auc(&exp, &labels).unwrap().auc, base);
            prop_assert_eq!(roc_auc(&affine, &labels).unwrap().auc, base);
        }

        #[test]
        fn confusion_counts_cover_every_record(
            data in proptest::collection::vec((0.0f64..1.0, 0u8..2, 0usize..6), 1..60),
        ) {
            let mut records = Vec::new();
            for (s, _, subj) in &data {
                // Label is a function of the subject so groups are consistent.
                records.push(seg(&format!("s{subj}"), *s, (*subj % 2) as u8));
            }
            let report = evaluate(&records, 0.5, Aggregation::MeanScore).unwrap();
            prop_assert_eq!(report.record.confusion.total(), records.len());
            prop_assert_eq!(report.patient.confusion.total(), report.patients.len());
            let _ = vec![0u8];
        }
    }
}
