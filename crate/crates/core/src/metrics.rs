//! Exact evaluation metrics: mask IoU, ROC/AUROC, average precision, thresholded
//! sensitivity/specificity and subgroup reports.
//!
//! AUROC is the Mann–Whitney statistic (ties count one half), computed from mid-ranks. AUPR is
//! tie-grouped average precision: items with equal scores are ranked as one block.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lunggrid::Mask;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("mask shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("{metric} is undefined: {reason}")]
    Undefined {
        metric: &'static str,
        reason: String,
    },
    #[error("invalid score {0} (must lie in [0, 1])")]
    InvalidScore(f64),
}

/// One scored patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub score: f64,
    pub truth: bool,
    #[serde(default)]
    pub case_id: String,
    #[serde(default)]
    pub patch_index: usize,
    #[serde(default)]
    pub difficult: bool,
}

impl ScoredItem {
    pub fn new(score: f64, truth: bool) -> Self {
        Self {
            score,
            truth,
            case_id: String::new(),
            patch_index: 0,
            difficult: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// Intersection over union; two empty masks score 1.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64, MetricError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricError::ShapeMismatch {
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

fn class_counts(items: &[ScoredItem]) -> (usize, usize) {
    let pos = items.iter().filter(|i| i.truth).count();
    (pos, items.len() - pos)
}

fn check_scores(items: &[ScoredItem]) -> Result<(), MetricError> {
    match items.iter().find(|i| !(0.0..=1.0).contains(&i.score)) {
        Some(bad) => Err(MetricError::InvalidScore(bad.score)),
        None => Ok(()),
    }
}

fn both_classes(items: &[ScoredItem], metric: &'static str) -> Result<(usize, usize), MetricError> {
    let (pos, neg) = class_counts(items);
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined {
            metric,
            reason: format!("needs both classes, got {pos} positive / {neg} negative"),
        });
    }
    Ok((pos, neg))
}

/// Items sorted by descending score, grouped into blocks of equal score; each block reports
/// `(score, positives, negatives)`.
fn tie_blocks(items: &[ScoredItem]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<(f64, bool)> = items.iter().map(|i| (i.score, i.truth)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut blocks: Vec<(f64, usize, usize)> = Vec::new();
    for (score, truth) in sorted {
        match blocks.last_mut() {
            Some(last) if last.0 == score => {
                if truth {
                    last.1 += 1
                } else {
                    last.2 += 1
                }
            }
            _ => blocks.push((score, truth as usize, !truth as usize)),
        }
    }
    blocks
}

/// Probability that a random positive outranks a random negative, ties counting one half.
pub fn auroc(items: &[ScoredItem]) -> Result<f64, MetricError> {
    check_scores(items)?;
    let (pos, neg) = both_classes(items, "AUROC")?;
    // sweep blocks from low to high score: each positive beats every negative below it
    let mut negatives_below = 0usize;
    let mut twice_wins = 0u128;
    for &(_, p, n) in tie_blocks(items).iter().rev() {
        twice_wins += (2 * p * negatives_below + p * n) as u128;
        negatives_below += n;
    }
    Ok(twice_wins as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Items with score `>= threshold` are called positive.
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub tp: usize,
    pub fp: usize,
}

/// ROC curve from `(0,0)` to `(1,1)`, one point per distinct score.
pub fn roc_curve(items: &[ScoredItem]) -> Result<Vec<RocPoint>, MetricError> {
    check_scores(items)?;
    let (pos, neg) = both_classes(items, "ROC curve")?;
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
        tp: 0,
        fp: 0,
    }];
    let (mut tp, mut fp) = (0, 0);
    for (score, p, n) in tie_blocks(items) {
        tp += p;
        fp += n;
        points.push(RocPoint {
            threshold: score,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
            tp,
            fp,
        });
    }
    Ok(points)
}

/// Trapezoidal area under an ROC curve produced by [`roc_curve`].
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// Tie-grouped average precision: `Σ ΔRecall × Precision` over descending score blocks.
pub fn aupr(items: &[ScoredItem]) -> Result<f64, MetricError> {
    check_scores(items)?;
    let (pos, _) = class_counts(items);
    if pos == 0 {
        return Err(MetricError::Undefined {
            metric: "AUPR",
            reason: "no positive items".into(),
        });
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    for (_, p, n) in tie_blocks(items) {
        tp += p;
        seen += p + n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

/// Confusion counts with "positive" meaning `score > threshold`.
pub fn confusion(items: &[ScoredItem], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for i in items {
        match (i.score > threshold, i.truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// `(sensitivity, specificity, confusion)` at `threshold` (strict `>`).
pub fn sens_spec(
    items: &[ScoredItem],
    threshold: f64,
) -> Result<(f64, f64, Confusion), MetricError> {
    check_scores(items)?;
    both_classes(items, "sensitivity/specificity")?;
    let c = confusion(items, threshold);
    Ok((
        c.tp as f64 / c.positives() as f64,
        c.tn as f64 / c.negatives() as f64,
        c,
    ))
}

/// Case-level items: risk is the maximum patch score, truth is "any positive patch".
pub fn aggregate_by_case(items: &[ScoredItem]) -> Vec<ScoredItem> {
    let mut by_case: BTreeMap<&str, ScoredItem> = BTreeMap::new();
    for i in items {
        by_case
            .entry(i.case_id.as_str())
            .and_modify(|agg| {
                agg.score = agg.score.max(i.score);
                agg.truth |= i.truth;
                agg.difficult |= i.difficult;
            })
            .or_insert_with(|| ScoredItem {
                patch_index: 0,
                ..i.clone()
            });
    }
    by_case.into_values().collect()
}

/// Metrics for one group of items. Rank metrics and rates that are undefined for the group
/// are `None`; counts are always present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub group: String,
    pub n_cases: usize,
    pub n_patches: usize,
    pub auroc: Option<f64>,
    pub aupr: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub threshold: f64,
    pub confusion: Confusion,
}

impl EvalReport {
    pub fn compute(group: impl Into<String>, items: &[ScoredItem], threshold: f64) -> Self {
        let confusion = confusion(items, threshold);
        let n_cases = items
            .iter()
            .map(|i| i.case_id.as_str())
            .collect::<std::collections::HashSet<_>>()
            .len();
        let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        Self {
            group: group.into(),
            n_cases,
            n_patches: items.len(),
            auroc: auroc(items).ok(),
            aupr: aupr(items).ok(),
            sensitivity: rate(confusion.tp, confusion.positives()),
            specificity: rate(confusion.tn, confusion.negatives()),
            threshold,
            confusion,
        }
    }
}

pub const GROUP_ALL: &str = "All Cases";
pub const GROUP_NOT_DIFFICULT: &str = "w/o Difficult Cases";
pub const GROUP_DIFFICULT: &str = "Difficult Cases only";

/// Overall report followed by one report per partition key, in key order.
pub fn partition_report<K, F>(items: &[ScoredItem], threshold: f64, key: F) -> Vec<(K, EvalReport)>
where
    K: Ord + Clone + ToString,
    F: Fn(&ScoredItem) -> K,
{
    let mut groups: BTreeMap<K, Vec<ScoredItem>> = BTreeMap::new();
    for i in items {
        groups.entry(key(i)).or_default().push(i.clone());
    }
    groups
        .into_iter()
        .map(|(k, v)| {
            let report = EvalReport::compute(k.to_string(), &v, threshold);
            (k, report)
        })
        .collect()
}

/// The three-row difficult-case breakdown: all, without difficult, difficult only.
/// Empty subgroups still get a row, with zero counts and no rates.
pub fn subgroup_report(items: &[ScoredItem], threshold: f64) -> Vec<EvalReport> {
    let (hard, easy): (Vec<ScoredItem>, Vec<ScoredItem>) =
        items.iter().cloned().partition(|i| i.difficult);
    vec![
        EvalReport::compute(GROUP_ALL, items, threshold),
        EvalReport::compute(GROUP_NOT_DIFFICULT, &easy, threshold),
        EvalReport::compute(GROUP_DIFFICULT, &hard, threshold),
    ]
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Fixed-width table: group, # of case, # of patch, AUROC, AUPR, sensitivity, specificity.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<22} {:>9} {:>10} {:>8} {:>8} {:>11} {:>11}",
        "", "# of Case", "# of Patch", "AUROC", "AUPR", "Sensitivity", "Specificity"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<22} {:>9} {:>10} {:>8} {:>8} {:>11} {:>11}",
            r.group,
            r.n_cases,
            r.n_patches,
            fmt_opt(r.auroc, 5),
            fmt_opt(r.aupr, 4),
            fmt_opt(r.sensitivity, 3),
            fmt_opt(r.specificity, 3),
        );
    }
    out
}

/// One JSON document per report, newline-terminated.
pub fn to_jsonl(reports: &[EvalReport]) -> String {
    reports
        .iter()
        .map(|r| serde_json::to_string(r).expect("report serializes") + "\n")
        .collect()
}
