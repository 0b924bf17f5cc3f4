//! Fracture detection as anomaly detection.
//!
//! A cloud is flagged when its reconstruction error exceeds `T_rec` or, for
//! the σ variants, when its reconstruction log-likelihood falls below `T_l`.
//! Both thresholds are fitted on a labelled validation set by maximising F1.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chamfer_mean, per_point_error, recon_log_likelihood, PointCloud};
use crate::models::{Mode, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Fractured,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Fractured
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::Fractured => "fractured",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "healthy" => Ok(Label::Healthy),
            "fractured" => Ok(Label::Fractured),
            _ => Err(Error::format(format!("unknown label `{s}`"))),
        }
    }
}

/// Which side of a threshold counts as anomalous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Reconstruction error: anomalous when `score > T`.
    HigherIsAnomalous,
    /// Log-likelihood: anomalous when `score < T`.
    LowerIsAnomalous,
}

impl Direction {
    pub fn flagged(self, score: f64, threshold: f64) -> bool {
        match self {
            Direction::HigherIsAnomalous => score > threshold,
            Direction::LowerIsAnomalous => score < threshold,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Direction::HigherIsAnomalous => Direction::LowerIsAnomalous,
            Direction::LowerIsAnomalous => Direction::HigherIsAnomalous,
        }
    }

    /// Maps scores so that larger always means more anomalous. Negation is
    /// exact, so thresholds translate without rounding.
    fn orient(self, s: f64) -> f64 {
        match self {
            Direction::HigherIsAnomalous => s,
            Direction::LowerIsAnomalous => -s,
        }
    }
}

/// Scores of a single cloud, before any threshold is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudScore {
    /// Per-point-mean Chamfer distance to the reconstruction.
    pub recon_error: f64,
    /// Per-point-mean reconstruction log-likelihood (σ variants only).
    pub log_likelihood: Option<f64>,
    /// Squared distance of every input point to its nearest predicted point.
    pub per_point_error: Vec<f64>,
    /// Log-density of every input point (σ variants only).
    pub per_point_log_prob: Option<Vec<f64>>,
}

/// Scores one normalised cloud, using `z = μ` for the variational variants.
pub fn score(model: &Model, x: &PointCloud) -> Result<CloudScore> {
    Ok(score_batch(model, std::slice::from_ref(x))?
        .pop()
        .expect("one cloud"))
}

/// [`score`] for many clouds; results match scoring them one at a time.
pub fn score_batch(model: &Model, clouds: &[PointCloud]) -> Result<Vec<CloudScore>> {
    if model.mode() != Mode::Eval {
        return Err(Error::usage("scoring needs the model in eval mode"));
    }
    let n = model.config().n_points;
    if let Some(c) = clouds.iter().find(|c| c.len() != n) {
        return Err(Error::dim(format!(
            "cloud has {} points, model expects {n}",
            c.len()
        )));
    }
    let sigma = model.variant().has_variance_head();
    let mut out = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(16) {
        for (x, r) in chunk.iter().zip(model.reconstruct_batch(chunk)?) {
            let ll = if sigma {
                Some(recon_log_likelihood(x, &r)?)
            } else {
                None
            };
            out.push(CloudScore {
                recon_error: chamfer_mean(x, &r.mean)?,
                log_likelihood: ll.as_ref().map(|l| l.mean()),
                per_point_error: per_point_error(x, &r.mean)?,
                per_point_log_prob: ll.map(|l| l.per_point),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

fn check_inputs(scores: &[f64], labels: &[Label]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::usage("no scores"));
    }
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::domain("NaN score"));
    }
    Ok(())
}

fn ratio(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 with fractured as the positive class.
pub fn metrics(
    scores: &[f64],
    labels: &[Label],
    threshold: f64,
    direction: Direction,
) -> Result<Metrics> {
    check_inputs(scores, labels)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&s, l) in scores.iter().zip(labels) {
        match (direction.flagged(s, threshold), l.is_positive()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let mut zero_division = false;
    let precision = ratio(tp, tp + fp, &mut zero_division);
    let recall = ratio(tp, tp + fn_, &mut zero_division);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        zero_division = true;
        0.0
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        tn,
        zero_division,
    })
}

fn require_both_classes(labels: &[Label]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|l| l.is_positive()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::usage("need both healthy and fractured examples"));
    }
    Ok((pos, neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThresholdFit {
    pub threshold: f64,
    pub metrics: Metrics,
    /// All scores were equal, so no threshold separates anything.
    pub degenerate: bool,
}

/// Chooses the threshold that maximises F1; among equal F1 values the one
/// with the higher recall wins.
///
/// Candidates are one value below the smallest oriented score and the
/// midpoints between consecutive distinct scores, which covers every
/// distinct partition of the scores.
pub fn fit_threshold(
    scores: &[f64],
    labels: &[Label],
    direction: Direction,
) -> Result<ThresholdFit> {
    check_inputs(scores, labels)?;
    require_both_classes(labels)?;
    let mut t: Vec<f64> = scores.iter().map(|&s| direction.orient(s)).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    if t.len() == 1 {
        log::warn!("all validation scores are equal; threshold fitting is degenerate");
        let threshold = scores[0];
        return Ok(ThresholdFit {
            threshold,
            metrics: metrics(scores, labels, threshold, direction)?,
            degenerate: true,
        });
    }
    let below = t[0] - (1.0f64).max(t[0].abs());
    let candidates = std::iter::once(below).chain(t.windows(2).map(|w| {
        let mid = w[0] + (w[1] - w[0]) / 2.0;
        // keep w[0] <= θ < w[1] even when the midpoint rounds onto w[1]
        if mid >= w[0] && mid < w[1] {
            mid
        } else {
            w[0]
        }
    }));
    let mut best: Option<(f64, Metrics)> = None;
    // ascending thresholds have non-increasing recall, so the first maximum wins ties
    for c in candidates {
        // adding 0.0 turns a negated zero into +0.0
        let threshold = direction.orient(c) + 0.0;
        let m = metrics(scores, labels, threshold, direction)?;
        if best.as_ref().is_none_or(|(_, b)| m.f1 > b.f1) {
            best = Some((threshold, m));
        }
    }
    let (threshold, metrics) = best.expect("at least one candidate");
    Ok(ThresholdFit {
        threshold,
        metrics,
        degenerate: false,
    })
}

/// Area under the ROC curve, swept over every distinct threshold and
/// integrated with the trapezoid rule.
///
/// The area is accumulated as an integer (twice the area in units of
/// `1/(P·N)`), so the result equals the normalised Mann–Whitney statistic
/// exactly, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[Label], direction: Direction) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (pos, neg) = require_both_classes(labels)?;
    let mut items: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .map(|(&s, l)| (direction.orient(s), l.is_positive()))
        .collect();
    // descending: lowering the threshold admits the highest scores first
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area = 0u64;
    let mut i = 0;
    while i < items.len() {
        let (mut dtp, mut dfp) = (0u64, 0u64);
        let mut j = i;
        while j < items.len() && items[j].0 == items[i].0 {
            if items[j].1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            j += 1;
        }
        // trapezoid from (fp, tp) to (fp + dfp, tp + dtp)
        twice_area += dfp * (2 * tp + dtp);
        tp += dtp;
        fp += dfp;
        i = j;
    }
    debug_assert_eq!((tp, fp), (pos as u64, neg as u64));
    Ok(twice_area as f64 / (2 * pos as u64 * neg as u64) as f64)
}

/// Splits `0..n` into `k` seeded folds of near-equal size.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::usage(format!(
            "cannot split {n} items into {k} folds"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut crate::seed::rng(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, v) in idx.into_iter().enumerate() {
        folds[i % k].push(v);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// One row of the per-cloud report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub id: String,
    pub label: Label,
    pub recon_error: f64,
    pub log_likelihood: Option<f64>,
    pub verdict_rec: bool,
    pub verdict_ll: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_rec: f64,
    pub t_l: Option<f64>,
}

/// Applies the thresholds to scored clouds.
pub fn report(
    ids: &[String],
    labels: &[Label],
    scores: &[CloudScore],
    th: &Thresholds,
) -> Result<Vec<ReportRow>> {
    if ids.len() != labels.len() || ids.len() != scores.len() {
        return Err(Error::dim("ids, labels and scores differ in length"));
    }
    Ok(ids
        .iter()
        .zip(labels)
        .zip(scores)
        .map(|((id, &label), s)| ReportRow {
            id: id.clone(),
            label,
            recon_error: s.recon_error,
            log_likelihood: s.log_likelihood,
            verdict_rec: s.recon_error > th.t_rec,
            verdict_ll: match (s.log_likelihood, th.t_l) {
                (Some(ll), Some(t)) => Some(ll < t),
                _ => None,
            },
        })
        .collect())
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "id",
        "label",
        "recon_error",
        "log_likelihood",
        "verdict_rec",
        "verdict_ll",
    ])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        w.write_record([
            r.id.clone(),
            r.label.to_string(),
            r.recon_error.to_string(),
            opt(r.log_likelihood.map(|v| v.to_string())),
            r.verdict_rec.to_string(),
            opt(r.verdict_ll.map(|v| v.to_string())),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Test-set performance of one measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeasureSummary {
    pub threshold: f64,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    /// F1 on the validation set at the fitted threshold.
    pub val_f1: f64,
}

/// Fits a threshold on validation scores and reports test metrics.
pub fn evaluate_measure(
    val: (&[f64], &[Label]),
    test: (&[f64], &[Label]),
    direction: Direction,
) -> Result<MeasureSummary> {
    let fit = fit_threshold(val.0, val.1, direction)?;
    let m = metrics(test.0, test.1, fit.threshold, direction)?;
    Ok(MeasureSummary {
        threshold: fit.threshold,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        auc: roc_auc(test.0, test.1, direction)?,
        val_f1: fit.metrics.f1,
    })
}
