//! Localization metrics, learning curves and "% of full supervision" tables.
//!
//! Each positive test image contributes exactly one detection: its
//! top-scoring proposal (ties to the lowest proposal index). A detection is
//! correct when it overlaps some ground-truth box by at least 0.5 IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageId, ImageSample, DEFAULT_IOU_THRESHOLD};
use crate::mssvm::Model;
use crate::pool::Pool;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    Ap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: ImageId,
    pub proposal: usize,
    pub score: f64,
    pub correct: bool,
}

/// Top-scoring proposal of an image.
pub fn top_proposal(model: &Model, img: &ImageSample) -> Result<(usize, f64)> {
    let mut best = (0, f64::NEG_INFINITY);
    for y in 0..img.proposals.len() {
        let s = model.score(img, y)?;
        if s > best.1 {
            best = (y, s);
        }
    }
    Ok(best)
}

/// One detection per positive test image, in ascending id order.
pub fn detections(model: &Model, pool: &Pool) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for id in pool.test_ids() {
        let img = pool.image(id)?;
        if !img.is_positive() {
            continue;
        }
        let (proposal, score) = top_proposal(model, img)?;
        out.push(Detection {
            image: id,
            proposal,
            score,
            correct: img.best_iou(proposal) >= DEFAULT_IOU_THRESHOLD,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyTestSplit);
    }
    Ok(out)
}

/// Fraction of positive test images whose top proposal is correct.
pub fn localization_accuracy(model: &Model, pool: &Pool) -> Result<f64> {
    let dets = detections(model, pool)?;
    Ok(dets.iter().filter(|d| d.correct).count() as f64 / dets.len() as f64)
}

/// Average precision of the per-image detections ranked by score
/// (ties to the lowest image id).
pub fn localization_ap(model: &Model, pool: &Pool) -> Result<f64> {
    let mut dets = detections(model, pool)?;
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image.cmp(&b.image)));
    let ranked: Vec<bool> = dets.iter().map(|d| d.correct).collect();
    Ok(average_precision(&ranked))
}

/// All-points interpolated AP of a ranked list of correctness flags.
///
/// Recall is measured against the number of correct detections in the list,
/// so a ranking with every correct item first scores 1 and an empty or
/// all-wrong list scores 0.
pub fn average_precision(ranked: &[bool]) -> f64 {
    let total = ranked.iter().filter(|&&c| c).count();
    if total == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (k, &c) in ranked.iter().enumerate() {
        tp += c as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope: running max from the end
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    ranked
        .iter()
        .zip(&precision)
        .filter(|(c, _)| **c)
        .map(|(_, p)| p / total as f64)
        .sum()
}

pub fn evaluate(model: &Model, pool: &Pool, metric: MetricKind) -> Result<f64> {
    match metric {
        MetricKind::Accuracy => localization_accuracy(model, pool),
        MetricKind::Ap => localization_ap(model, pool),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_annotated: usize,
    pub pct_of_train: f64,
    pub metric_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub strategy: String,
    pub seed: u64,
    pub metric: MetricKind,
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn new(strategy: impl Into<String>, seed: u64, metric: MetricKind) -> Self {
        LearningCurve {
            strategy: strategy.into(),
            seed,
            metric,
            points: Vec::new(),
        }
    }

    /// Appends a point; `n_annotated` must strictly increase.
    pub fn push(&mut self, n_annotated: usize, n_train: usize, metric_value: f64) -> Result<()> {
        if let Some(last) = self.points.last() {
            if n_annotated <= last.n_annotated {
                return Err(Error::InvalidInput(format!(
                    "curve points must increase: {n_annotated} after {}",
                    last.n_annotated
                )));
            }
        }
        self.points.push(CurvePoint {
            n_annotated,
            pct_of_train: n_annotated as f64 / n_train as f64,
            metric_value,
        });
        Ok(())
    }

    /// Smallest annotated count whose metric reaches `target`.
    pub fn first_reaching(&self, target: f64) -> Option<usize> {
        self.points
            .iter()
            .find(|p| p.metric_value >= target)
            .map(|p| p.n_annotated)
    }
}

/// Best metric within the budget fraction, as a percentage of `full_value`.
pub fn pct_full_supervision(curve: &LearningCurve, full_value: f64, budget_fraction: f64) -> Result<f64> {
    if full_value.is_nan() || full_value <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "full-supervision value must be positive, got {full_value}"
        )));
    }
    curve
        .points
        .iter()
        .filter(|p| p.pct_of_train <= budget_fraction + 1e-12)
        .map(|p| 100.0 * p.metric_value / full_value)
        .reduce(f64::max)
        .ok_or_else(|| Error::InvalidInput("no curve point within the budget".into()))
}

/// Table cell: one decimal with a trailing `.0` dropped, `>100` above full supervision.
pub fn format_pct(v: f64) -> String {
    if v > 100.0 {
        return ">100".to_string();
    }
    let s = format!("{v:.1}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

/// Class rows by strategy columns, with a mean row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub strategies: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ComparisonTable {
    pub fn new(strategies: Vec<String>) -> Self {
        ComparisonTable {
            strategies,
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, class: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.strategies.len() {
            return Err(Error::InvalidInput(format!(
                "row has {} values for {} strategies",
                values.len(),
                self.strategies.len()
            )));
        }
        self.rows.push((class.into(), values));
        Ok(())
    }

    /// Column means of the class rows.
    pub fn mean_row(&self) -> Vec<f64> {
        let n = self.rows.len().max(1) as f64;
        (0..self.strategies.len())
            .map(|j| self.rows.iter().map(|(_, v)| v[j]).sum::<f64>() / n)
            .collect()
    }

    fn cells(&self) -> Vec<Vec<String>> {
        let mut out = vec![std::iter::once("class".to_string())
            .chain(self.strategies.iter().cloned())
            .collect::<Vec<_>>()];
        for (class, values) in &self.rows {
            out.push(
                std::iter::once(class.clone())
                    .chain(values.iter().map(|v| format_pct(*v)))
                    .collect(),
            );
        }
        out.push(
            std::iter::once("mean".to_string())
                .chain(self.mean_row().into_iter().map(format_pct))
                .collect(),
        );
        out
    }

    pub fn to_csv(&self) -> String {
        self.cells().into_iter().map(|r| r.join(",") + "\n").collect()
    }

    /// Fixed-width text rendering with rules under the header and above the mean.
    pub fn render(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|j| cells.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        let line = |r: &Vec<String>| {
            r.iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
                + "\n"
        };
        let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)) + "\n";
        let mut out = line(&cells[0]);
        out += &rule;
        for r in &cells[1..cells.len() - 1] {
            out += &line(r);
        }
        out += &rule;
        out += &line(&cells[cells.len() - 1]);
        out
    }
}
