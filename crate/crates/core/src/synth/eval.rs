//! Scoring a report against ground truth.
//!
//! Frame level: a (frame, class) pair is positive in the truth when the
//! scene has that defect on that frame, and predicted when the report has a
//! defect record of that class on that frame with confidence at or above
//! `min_confidence`. Asset level: a truth asset counts as detected when some
//! reported asset of the same type overlaps its frame range.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GroundTruth;
use crate::error::Result;
use crate::health::{read_events, EventRecord, EVENTS_FILE};

/// Defect classes the synthetic truth knows about.
pub const EVALUATED_CLASSES: [&str; 2] = ["sunkink", "loose_ballast"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub min_confidence: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { min_confidence: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// `None` when undefined (0/0).
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Counts {
    pub fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        Self {
            tp,
            fp,
            fn_,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        }
    }

    fn add(self, o: Counts) -> Counts {
        Counts::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetAccuracy {
    pub detected: u64,
    pub total: u64,
    /// detected / total; `None` without truth assets.
    pub accuracy: Option<f64>,
    /// Percentage to one decimal, e.g. "92.1%".
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frame_level: Counts,
    pub per_class: BTreeMap<String, Counts>,
    pub asset_level: AssetAccuracy,
}

/// `detected/total` as a percentage with one decimal, truncated (47/51 is
/// 92.156...% and prints as 92.1%). Exact integer arithmetic.
pub fn format_accuracy(detected: u64, total: u64) -> String {
    if total == 0 {
        return "undefined".into();
    }
    let per_mille = detected as u128 * 1000 / total as u128;
    format!("{}.{}%", per_mille / 10, per_mille % 10)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.frame_level;
        writeln!(
            f,
            "frame level: tp {} fp {} fn {} precision {} recall {}",
            c.tp,
            c.fp,
            c.fn_,
            fmt_opt(c.precision),
            fmt_opt(c.recall)
        )?;
        for (class, c) in &self.per_class {
            writeln!(
                f,
                "  {class}: tp {} fp {} fn {} precision {} recall {}",
                c.tp,
                c.fp,
                c.fn_,
                fmt_opt(c.precision),
                fmt_opt(c.recall)
            )?;
        }
        let a = &self.asset_level;
        writeln!(f, "asset level accuracy: {} ({}/{})", a.display, a.detected, a.total)
    }
}

pub fn evaluate_records(pred: &[EventRecord], truth: &GroundTruth, params: &EvalParams) -> EvalReport {
    let mut per_class = BTreeMap::new();
    for class in EVALUATED_CLASSES {
        let truth_set: BTreeSet<u64> = truth
            .frames
            .iter()
            .filter(|f| match class {
                "sunkink" => f.kink_present,
                _ => f.loose_ballast,
            })
            .map(|f| f.frame_index)
            .collect();
        let pred_set: BTreeSet<u64> = pred
            .iter()
            .filter_map(|e| match e {
                EventRecord::Defect(d) if d.class_name == class && d.confidence >= params.min_confidence => {
                    Some(d.frame_index)
                }
                _ => None,
            })
            .collect();
        let tp = pred_set.intersection(&truth_set).count() as u64;
        let fp = pred_set.len() as u64 - tp;
        let fn_ = truth_set.len() as u64 - tp;
        per_class.insert(class.to_string(), Counts::new(tp, fp, fn_));
    }
    let frame_level = per_class.values().fold(Counts::new(0, 0, 0), |a, &c| a.add(c));

    let total = truth.assets.len() as u64;
    let detected = truth
        .assets
        .iter()
        .filter(|t| {
            pred.iter().any(|e| match e {
                EventRecord::Asset(a) => {
                    a.asset_type == t.asset_type && a.first_frame <= t.last_frame && t.first_frame <= a.last_frame
                }
                _ => false,
            })
        })
        .count() as u64;
    EvalReport {
        frame_level,
        per_class,
        asset_level: AssetAccuracy {
            detected,
            total,
            accuracy: ratio(detected, total),
            display: format_accuracy(detected, total),
        },
    }
}

/// Score the report directory `pred_dir` against a truth file.
pub fn evaluate(pred_dir: &Path, truth_path: &Path, params: &EvalParams) -> Result<EvalReport> {
    let pred = read_events(&pred_dir.join(EVENTS_FILE))?;
    let truth = GroundTruth::read(truth_path)?;
    Ok(evaluate_records(&pred, &truth, params))
}
