//! Threshold selection from labeled pairs.
//!
//! The positive class is replication: a pair labeled similar is a positive,
//! and a distance at or below the threshold predicts positive. Curves run
//! from the strictest threshold (`-inf`, nothing predicted positive) to the
//! most lenient (`+inf`, everything positive).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::SimilarityLabel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub distance: f64,
    pub label: SimilarityLabel,
}

impl LabeledPair {
    pub fn new(distance: f64, label: SimilarityLabel) -> Result<Self> {
        if !distance.is_finite() || distance < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "pair distance must be finite and nonnegative, got {distance}"
            )));
        }
        Ok(Self { distance, label })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Similar pairs at or below the threshold.
    pub true_positives: usize,
    /// Dissimilar pairs at or below the threshold.
    pub false_positives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `-inf` first, then every distinct distance ascending, then `+inf`.
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
    pub auc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Sorted distances grouped by value, with per-group label counts.
fn distance_groups(pairs: &[LabeledPair]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<&LabeledPair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for p in sorted {
        if groups.last().is_none_or(|g| g.0 != p.distance) {
            groups.push((p.distance, 0, 0));
        }
        let g = groups.last_mut().unwrap();
        match p.label {
            SimilarityLabel::Similar => g.1 += 1,
            SimilarityLabel::Dissimilar => g.2 += 1,
        }
    }
    groups
}

fn count_labels(pairs: &[LabeledPair]) -> (usize, usize) {
    let pos = pairs.iter().filter(|p| p.label == SimilarityLabel::Similar).count();
    (pos, pairs.len() - pos)
}

pub fn compute_roc(pairs: &[LabeledPair]) -> Result<RocCurve> {
    let (positives, negatives) = count_labels(pairs);
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels(format!(
            "ROC needs both labels, got {positives} similar and {negatives} dissimilar"
        )));
    }
    let point = |threshold, tp: usize, fp: usize| RocPoint {
        threshold,
        tpr: tp as f64 / positives as f64,
        fpr: fp as f64 / negatives as f64,
        true_positives: tp,
        false_positives: fp,
    };
    let mut points = vec![point(f64::NEG_INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0, 0);
    for (d, pos, neg) in distance_groups(pairs) {
        tp += pos;
        fp += neg;
        points.push(point(d, tp, fp));
    }
    points.push(point(f64::INFINITY, positives, negatives));

    // Trapezoids on integer counts, so separable sets give exactly 1.
    let twice_area: u128 = points
        .windows(2)
        .map(|w| {
            let dfp = (w[1].false_positives - w[0].false_positives) as u128;
            dfp * (w[1].true_positives + w[0].true_positives) as u128
        })
        .sum();
    let auc = twice_area as f64 / (2 * positives as u128 * negatives as u128) as f64;
    Ok(RocCurve {
        points,
        positives,
        negatives,
        auc,
    })
}

/// Precision and recall at `-inf` and every distinct distance. Precision with
/// nothing predicted positive is 1.
pub fn compute_pr(pairs: &[LabeledPair]) -> Result<Vec<PrPoint>> {
    let (positives, _) = count_labels(pairs);
    if positives == 0 {
        return Err(Error::DegenerateLabels("precision-recall needs at least one similar pair".into()));
    }
    let mut out = vec![PrPoint {
        threshold: f64::NEG_INFINITY,
        precision: 1.0,
        recall: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (d, pos, neg) in distance_groups(pairs) {
        tp += pos;
        fp += neg;
        out.push(PrPoint {
            threshold: d,
            precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
            recall: tp as f64 / positives as f64,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    #[default]
    Youden,
    TargetFpr(f64),
    TargetTpr(f64),
    Fixed(f64),
}

impl ThresholdPolicy {
    pub fn validate(self) -> Result<Self> {
        let ok = match self {
            ThresholdPolicy::Youden => true,
            ThresholdPolicy::TargetFpr(v) | ThresholdPolicy::TargetTpr(v) => v > 0.0 && v < 1.0,
            ThresholdPolicy::Fixed(v) => v.is_finite() && v >= 0.0,
        };
        if ok {
            Ok(self)
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid threshold policy {self}: targets must lie in (0, 1), fixed values must be finite and >= 0"
            )))
        }
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Youden => write!(f, "youden"),
            ThresholdPolicy::TargetFpr(v) => write!(f, "fpr:{v}"),
            ThresholdPolicy::TargetTpr(v) => write!(f, "tpr:{v}"),
            ThresholdPolicy::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

/// Accepts `youden`, `fpr:<v>`, `tpr:<v>` and `fixed:<v>`.
impl FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "youden" {
            return Ok(ThresholdPolicy::Youden);
        }
        let bad = || Error::InvalidArgument(format!("unrecognized threshold policy `{s}`"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        let policy = match kind.trim() {
            "fpr" | "target_fpr" => ThresholdPolicy::TargetFpr(value),
            "tpr" | "target_tpr" => ThresholdPolicy::TargetTpr(value),
            "fixed" => ThresholdPolicy::Fixed(value),
            _ => return Err(bad()),
        };
        policy.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Achieved {
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionThreshold {
    pub value: f64,
    pub policy: ThresholdPolicy,
    /// Rates on the calibration curve; absent for a threshold set by hand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub achieved: Option<Achieved>,
}

impl DecisionThreshold {
    /// A fixed threshold with no curve behind it.
    pub fn fixed(value: f64) -> Result<Self> {
        let policy = ThresholdPolicy::Fixed(value).validate()?;
        Ok(Self {
            value,
            policy,
            achieved: None,
        })
    }

    /// The decision rule: at or below the threshold is a replication.
    pub fn is_replication(&self, distance: f64) -> bool {
        distance <= self.value
    }
}

fn unattainable(curve: &RocCurve, reason: String) -> Error {
    let finite = &curve.points[1..curve.points.len() - 1];
    let (lo, hi) = (finite[0], finite[finite.len() - 1]);
    Error::UnattainablePolicy {
        reason,
        min_tpr: lo.tpr,
        max_tpr: hi.tpr,
        min_fpr: lo.fpr,
        max_fpr: hi.fpr,
    }
}

/// Picks an operating threshold on `curve`. Only finite thresholds (observed
/// distances) are candidates for the curve-based policies.
///
/// Youden's J is compared on integer counts; among tied maxima the smallest
/// threshold wins, and the value returned is the midpoint between it and the
/// next observed distance, which decides every observed pair the same way.
pub fn select_threshold(curve: &RocCurve, policy: ThresholdPolicy) -> Result<DecisionThreshold> {
    let policy = policy.validate()?;
    let finite = &curve.points[1..curve.points.len() - 1];
    if finite.is_empty() {
        return Err(Error::DegenerateLabels("curve has no observed distances".into()));
    }
    let (p, n) = (curve.positives as i128, curve.negatives as i128);
    let pick = |i: usize, value: f64| DecisionThreshold {
        value,
        policy,
        achieved: Some(Achieved {
            tpr: finite[i].tpr,
            fpr: finite[i].fpr,
        }),
    };
    match policy {
        ThresholdPolicy::Youden => {
            let j = |pt: &RocPoint| pt.true_positives as i128 * n - pt.false_positives as i128 * p;
            let mut best = 0;
            for i in 1..finite.len() {
                if j(&finite[i]) > j(&finite[best]) {
                    best = i;
                }
            }
            let value = match finite.get(best + 1) {
                Some(next) => 0.5 * (finite[best].threshold + next.threshold),
                None => finite[best].threshold,
            };
            Ok(pick(best, value))
        }
        ThresholdPolicy::TargetFpr(v) => finite
            .iter()
            .rposition(|pt| pt.fpr <= v)
            .map(|i| pick(i, finite[i].threshold))
            .ok_or_else(|| {
                unattainable(curve, format!("no observed threshold keeps the false positive rate at or below {v}"))
            }),
        ThresholdPolicy::TargetTpr(v) => finite
            .iter()
            .position(|pt| pt.tpr >= v)
            .map(|i| pick(i, finite[i].threshold))
            .ok_or_else(|| unattainable(curve, format!("no observed threshold reaches true positive rate {v}"))),
        ThresholdPolicy::Fixed(v) => {
            let at = curve
                .points
                .iter()
                .rev()
                .find(|pt| pt.threshold <= v)
                .expect("the -inf point is at or below any value");
            Ok(DecisionThreshold {
                value: v,
                policy,
                achieved: Some(Achieved {
                    tpr: at.tpr,
                    fpr: at.fpr,
                }),
            })
        }
    }
}

fn write_csv<const N: usize>(header: [&str; N], rows: impl Iterator<Item = [f64; N]>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row.map(|v| v.to_string())).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

pub fn roc_to_csv(curve: &RocCurve) -> String {
    write_csv(
        ["threshold", "tpr", "fpr"],
        curve.points.iter().map(|p| [p.threshold, p.tpr, p.fpr]),
    )
}

pub fn pr_to_csv(points: &[PrPoint]) -> String {
    write_csv(
        ["threshold", "precision", "recall"],
        points.iter().map(|p| [p.threshold, p.precision, p.recall]),
    )
}
