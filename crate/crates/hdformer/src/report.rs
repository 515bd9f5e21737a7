//! Text renderings of metrics, ROC curves, scores, loss curves and cost tables.

use serde::Serialize;

use hdformer_core::metrics::{EvalReport, LevelMetrics, RocPoint, ScoredSegment};
use hdformer_core::train::TrainReport;
use hdformer_core::tsa::{build_cost_model, AttentionVariant, CostModel};

use crate::error::{CliError, Result};

/// Sequence lengths of the cost table: 8 s, 30 s, 60 s, 180 s, 6 min and 10 min at 128 Hz.
pub const STATS_LENGTHS: [usize; 6] = [1024, 3840, 7680, 23040, 46080, 76800];

/// Column order of the metrics CSV.
pub const METRICS_HEADER: &str = "sensitivity,accuracy,specificity,auc,level,seed";

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

#[derive(Debug, Serialize)]
struct LevelJson {
    tp: usize,
    fp: usize,
    tn: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    sensitivity: Option<f64>,
    accuracy: Option<f64>,
    specificity: Option<f64>,
    auc: Option<f64>,
}

impl From<&LevelMetrics> for LevelJson {
    fn from(m: &LevelMetrics) -> Self {
        LevelJson {
            tp: m.confusion.tp,
            fp: m.confusion.fp,
            tn: m.confusion.tn,
            fn_: m.confusion.fn_,
            sensitivity: finite(m.sensitivity),
            accuracy: finite(m.accuracy),
            specificity: finite(m.specificity),
            auc: m.auc,
        }
    }
}

#[derive(Debug, Serialize)]
struct ReportJson<'a> {
    seed: u64,
    split: &'a str,
    threshold: f64,
    aggregation: &'a str,
    records: usize,
    patients: usize,
    record: LevelJson,
    patient: LevelJson,
}

/// Pretty JSON with stable key order; undefined ratios become `null`.
pub fn report_json(report: &EvalReport, seed: u64, split: &str) -> String {
    let j = ReportJson {
        seed,
        split,
        threshold: report.threshold,
        aggregation: report.aggregation.name(),
        records: report.record.confusion.total(),
        patients: report.patients.len(),
        record: (&report.record).into(),
        patient: (&report.patient).into(),
    };
    let mut s = serde_json::to_string_pretty(&j).expect("report serialises");
    s.push('\n');
    s
}

pub fn metrics_csv(report: &EvalReport, seed: u64) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (level, m) in [("record", &report.record), ("patient", &report.patient)] {
        out.push_str(&format!(
            "{},{},{},{},{level},{seed}\n",
            cell(finite(m.sensitivity)),
            cell(finite(m.accuracy)),
            cell(finite(m.specificity)),
            cell(m.auc),
        ));
    }
    out
}

pub fn roc_csv(points: &[RocPoint], seed: u64) -> String {
    let mut out = String::from("threshold,fpr,tpr,seed\n");
    for p in points {
        out.push_str(&format!("{},{},{},{seed}\n", p.threshold, p.fpr, p.tpr));
    }
    out
}

pub fn scores_csv(scores: &[ScoredSegment], seed: u64) -> String {
    let mut out = String::from("subject_id,label,score,seed\n");
    for s in scores {
        out.push_str(&format!("{},{},{},{seed}\n", s.subject_id, s.label, s.score));
    }
    out
}

/// Reads `subject_id,label,score[,…]` rows written by [`scores_csv`].
pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoredSegment>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("subject_id,label,score") {
        return Err(CliError::Data("scores file must start with `subject_id,label,score`".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || CliError::Data(format!("scores line {}: `{line}`", i + 2));
            if f.len() < 3 {
                return Err(bad());
            }
            let label = match f[1] {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad()),
            };
            Ok(ScoredSegment {
                subject_id: f[0].to_string(),
                label,
                score: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn loss_csv(report: &TrainReport, seed: u64) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,seed\n");
    for e in &report.epochs {
        out.push_str(&format!("{},{},{},{seed}\n", e.epoch, e.train_loss, e.val_loss));
    }
    out
}

/// Cost rows for every variant at every length; `tsa` rows use `D = T`.
pub fn cost_rows(base_width: usize, ks: &[usize], block: usize, budget: usize) -> Result<Vec<CostModel>> {
    let mut rows = Vec::new();
    for &len in &STATS_LENGTHS {
        let mut variants = vec![
            AttentionVariant::Full1d,
            AttentionVariant::BlockSparse { block },
            AttentionVariant::TimeDecaySparse { budget },
        ];
        variants.extend(ks.iter().map(|&k| AttentionVariant::Tsa {
            patch_size: base_width,
            base_width,
            k,
        }));
        for v in variants {
            rows.push(build_cost_model(v, len)?);
        }
    }
    Ok(rows)
}

pub fn cost_csv(rows: &[CostModel]) -> String {
    let mut out = String::from("variant,L,k_or_b,tokens,pairs\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant.kind().name(),
            r.length,
            r.variant.parameter(),
            r.token_count,
            r.attention_pair_count
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use hdformer_core::metrics::{evaluate, Aggregation};

    fn seg(id: &str, score: f64, label: u8) -> ScoredSegment {
        ScoredSegment {
            subject_id: id.into(),
            score,
            label,
        }
    }

    #[test]
    fn metrics_csv_column_order() {
        let r = evaluate(&[seg("a", 0.9, 1), seg("b", 0.2, 0)], 0.5, Aggregation::MeanScore).unwrap();
        let csv = metrics_csv(&r, 9);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(lines.next().unwrap(), "1,1,1,1,record,9");
        assert_eq!(lines.next().unwrap(), "1,1,1,1,patient,9");
        let json = report_json(&r, 9, "test");
        assert!(json.contains("\"seed\": 9") && json.contains("\"fn\": 0"));
    }

    #[test]
    fn undefined_ratios_are_blank_or_null() {
        let r = evaluate(&[seg("a", 0.9, 1)], 0.5, Aggregation::MeanScore).unwrap();
        assert!(metrics_csv(&r, 0).lines().nth(1).unwrap().starts_with("1,1,,,record"));
        assert!(report_json(&r, 0, "all").contains("\"specificity\": null"));
    }

    #[test]
    fn scores_round_trip() {
        let s = vec![seg("a", 0.25, 1), seg("b", 0.125, 0)];
        assert_eq!(parse_scores_csv(&scores_csv(&s, 1)).unwrap(), s);
        assert!(parse_scores_csv("x\n").is_err());
        assert!(parse_scores_csv("subject_id,label,score\na,2,0.1\n").is_err());
    }

    #[test]
    fn cost_table_has_every_variant_and_length() {
        let rows = cost_rows(1024, &[2, 3, 4, 5], 64, 32).unwrap();
        assert_eq!(rows.len(), 6 * 7);
        let csv = cost_csv(&rows);
        assert!(csv.contains("\ntsa,76800,4,4608,21233664\n"));
        assert!(csv.contains("\nfull_1d,76800,0,76800,5898240000\n"));
    }
}
