//! Presentation attack detection error rates and DET curves.
//!
//! All rates are percentages. A spoof classified live is an attack
//! presentation error (APCER); a live capture classified spoof is a bona
//! fide error (BPCER).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::model::ScoreRecord;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_live: usize,
    pub n_spoof: usize,
    pub n_live_errors: usize,
    pub n_spoof_errors: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub apcer: f64,
    pub bpcer: f64,
    pub ace: f64,
    pub accuracy: f64,
    pub counts: Counts,
}

impl MetricsReport {
    /// Builds the report from error counts; both classes must be present.
    pub fn from_counts(counts: Counts) -> Result<Self> {
        let missing = match (counts.n_live, counts.n_spoof) {
            (0, 0) => Some("live and spoof"),
            (0, _) => Some("live"),
            (_, 0) => Some("spoof"),
            _ => None,
        };
        if let Some(class) = missing {
            return Err(Error::Invalid(format!("no {class} samples to score")));
        }
        let apcer = 100.0 * counts.n_spoof_errors as f64 / counts.n_spoof as f64;
        let bpcer = 100.0 * counts.n_live_errors as f64 / counts.n_live as f64;
        let mut report = MetricsReport::from_rates(apcer, bpcer);
        report.counts = counts;
        Ok(report)
    }

    /// Report for given rates with zeroed counts.
    pub fn from_rates(apcer: f64, bpcer: f64) -> Self {
        let ace = ace(apcer, bpcer);
        MetricsReport {
            apcer,
            bpcer,
            ace,
            accuracy: accuracy(ace),
            counts: Counts::default(),
        }
    }
}

/// `(APCER + BPCER) / 2`.
pub fn ace(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

/// `100 − ACE`.
pub fn accuracy(ace: f64) -> f64 {
    100.0 - ace
}

/// Error counts for paired predicted and true labels.
pub fn count_errors(predicted: &[Label], truth: &[Label]) -> Result<Counts> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut c = Counts::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        match t {
            Label::Live => {
                c.n_live += 1;
                c.n_live_errors += usize::from(p != t);
            }
            Label::Spoof => {
                c.n_spoof += 1;
                c.n_spoof_errors += usize::from(p != t);
            }
        }
    }
    Ok(c)
}

pub fn compute_metrics_from_labels(predicted: &[Label], truth: &[Label]) -> Result<MetricsReport> {
    MetricsReport::from_counts(count_errors(predicted, truth)?)
}

pub fn compute_metrics(records: &[ScoreRecord]) -> Result<MetricsReport> {
    let predicted: Vec<Label> = records.iter().map(|r| r.predicted_label).collect();
    let truth: Vec<Label> = records.iter().map(|r| r.true_label).collect();
    compute_metrics_from_labels(&predicted, &truth)
}

/// Mean of per-split reports, field by field.
pub fn mean_report(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::Invalid("no reports to average".into()));
    }
    let n = reports.len() as f64;
    let apcer = reports.iter().map(|r| r.apcer).sum::<f64>() / n;
    let bpcer = reports.iter().map(|r| r.bpcer).sum::<f64>() / n;
    let mut out = MetricsReport::from_rates(apcer, bpcer);
    for r in reports {
        out.counts.n_live += r.counts.n_live;
        out.counts.n_spoof += r.counts.n_spoof;
        out.counts.n_live_errors += r.counts.n_live_errors;
        out.counts.n_spoof_errors += r.counts.n_spoof_errors;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
}

/// Scores split by class and sorted ascending.
struct ClassScores {
    live: Vec<f64>,
    spoof: Vec<f64>,
}

impl ClassScores {
    fn new(records: &[ScoreRecord], score: impl Fn(&ScoreRecord) -> f64) -> Result<Self> {
        let mut live = Vec::new();
        let mut spoof = Vec::new();
        for r in records {
            let s = score(r);
            if !s.is_finite() {
                return Err(Error::Numerical(format!("non-finite score for {}", r.sample_id)));
            }
            match r.true_label {
                Label::Live => live.push(s),
                Label::Spoof => spoof.push(s),
            }
        }
        if live.is_empty() || spoof.is_empty() {
            let class = if live.is_empty() { "live" } else { "spoof" };
            return Err(Error::Invalid(format!("no {class} samples for a DET curve")));
        }
        live.sort_by(f64::total_cmp);
        spoof.sort_by(f64::total_cmp);
        Ok(ClassScores { live, spoof })
    }

    /// Rates for the rule "live iff score > threshold".
    fn point(&self, threshold: f64, cut: f64) -> DetPoint {
        let live_rejected = self.live.partition_point(|&s| s <= cut);
        let spoof_accepted = self.spoof.len() - self.spoof.partition_point(|&s| s <= cut);
        DetPoint {
            threshold,
            apcer: 100.0 * spoof_accepted as f64 / self.spoof.len() as f64,
            bpcer: 100.0 * live_rejected as f64 / self.live.len() as f64,
        }
    }
}

/// Thresholds swept by [`det_curve`]: `n_thresholds` evenly spaced points
/// on [0, 1] merged with every distinct normalized score, ascending.
pub fn det_thresholds(records: &[ScoreRecord], n_thresholds: usize) -> Result<Vec<f64>> {
    if n_thresholds < 2 {
        return Err(Error::Invalid(format!(
            "n_thresholds must be at least 2, got {n_thresholds}"
        )));
    }
    let mut t: Vec<f64> = (0..n_thresholds)
        .map(|i| i as f64 / (n_thresholds - 1) as f64)
        .chain(records.iter().map(|r| r.normalized_score))
        .collect();
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Invalid(format!("normalized score {bad} outside [0, 1]")));
    }
    t.sort_by(f64::total_cmp);
    t.dedup();
    Ok(t)
}

/// APCER/BPCER over normalized-score thresholds, sorted by threshold.
pub fn det_curve(records: &[ScoreRecord], n_thresholds: usize) -> Result<Vec<DetPoint>> {
    let scores = ClassScores::new(records, |r| r.normalized_score)?;
    Ok(det_thresholds(records, n_thresholds)?
        .into_iter()
        .map(|t| scores.point(t, t))
        .collect())
}

/// Same sweep as [`det_curve`] but decided on raw scores: each normalized
/// threshold `t` is mapped to the largest raw score whose normalized value
/// is at most `t`, which selects exactly the same accepted set.
pub fn det_curve_raw(records: &[ScoreRecord], n_thresholds: usize) -> Result<Vec<DetPoint>> {
    let scores = ClassScores::new(records, |r| r.raw_score)?;
    let mut pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.normalized_score, r.raw_score)).collect();
    pairs.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(det_thresholds(records, n_thresholds)?
        .into_iter()
        .map(|t| {
            let k = pairs.partition_point(|p| p.0 <= t);
            let cut = if k == 0 { f64::NEG_INFINITY } else { pairs[k - 1].1 };
            scores.point(t, cut)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpcerAtApcer {
    pub apcer_target: f64,
    pub bpcer: f64,
    pub attainable: bool,
}

/// Lowest BPCER among curve points with APCER at most `apcer_target`;
/// 100 and unattainable when no point qualifies.
pub fn bpcer_at_apcer(curve: &[DetPoint], apcer_target: f64) -> BpcerAtApcer {
    let best = curve
        .iter()
        .filter(|p| p.apcer <= apcer_target)
        .map(|p| p.bpcer)
        .min_by(f64::total_cmp);
    BpcerAtApcer {
        apcer_target,
        bpcer: best.unwrap_or(100.0),
        attainable: best.is_some(),
    }
}

pub const SCORES_HEADER: &str = "id,true_label,raw_score,normalized_score,predicted_label";

pub fn scores_csv(records: &[ScoreRecord]) -> String {
    let mut out = String::from(SCORES_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.sample_id, r.true_label, r.raw_score, r.normalized_score, r.predicted_label
        );
    }
    out
}

pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut lines = text.lines();
    let mut offset = 0;
    match lines.next() {
        Some(h) if h == SCORES_HEADER => offset += h.len() + 1,
        _ => return Err(Error::parse(0, format!("expected header {SCORES_HEADER:?}"))),
    }
    let mut out = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                offset,
                format!("expected 5 fields, found {}", fields.len()),
            ));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::parse(offset, format!("bad number {s:?}: {e}")))
        };
        let label = |s: &str| s.parse::<Label>().map_err(|e| Error::parse(offset, e.to_string()));
        out.push(ScoreRecord {
            sample_id: fields[0].to_string(),
            true_label: label(fields[1])?,
            raw_score: num(fields[2])?,
            normalized_score: num(fields[3])?,
            predicted_label: label(fields[4])?,
        });
        offset += line.len() + 1;
    }
    Ok(out)
}

pub fn det_csv(curve: &[DetPoint]) -> String {
    let mut out = String::from("threshold,apcer,bpcer\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.apcer, p.bpcer);
    }
    out
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_scores_csv(records: &[ScoreRecord], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &scores_csv(records))
}

pub fn write_det_csv(curve: &[DetPoint], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &det_csv(curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: usize, raw: f64, norm: f64, truth: Label) -> ScoreRecord {
        ScoreRecord {
            sample_id: format!("s{id}"),
            raw_score: raw,
            normalized_score: norm,
            predicted_label: if raw > 0.0 { Label::Live } else { Label::Spoof },
            true_label: truth,
        }
    }

    #[test]
    fn reported_rates_combine() {
        let r = MetricsReport::from_rates(0.05, 0.35);
        assert!((r.ace - 0.20).abs() < 1e-12);
        assert!((accuracy(0.22) - 99.78).abs() < 1e-12);
        let c = Counts {
            n_live: 2000,
            n_spoof: 2000,
            n_live_errors: 7,
            n_spoof_errors: 1,
        };
        let r = MetricsReport::from_counts(c).unwrap();
        assert!((r.bpcer - 0.35).abs() < 1e-12 && (r.apcer - 0.05).abs() < 1e-12);
        assert!((r.ace - 0.20).abs() < 1e-12);
    }

    #[test]
    fn perfect_classifier() {
        let truth: Vec<Label> = (0..200)
            .map(|i| if i < 100 { Label::Live } else { Label::Spoof })
            .collect();
        let r = compute_metrics_from_labels(&truth, &truth).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.ace, r.accuracy), (0.0, 0.0, 0.0, 100.0));
    }

    #[test]
    fn missing_class_is_named() {
        let err = compute_metrics_from_labels(&[Label::Live], &[Label::Live]).unwrap_err();
        assert!(err.to_string().contains("spoof"), "{err}");
        let err = compute_metrics_from_labels(&[Label::Live], &[Label::Spoof]).unwrap_err();
        assert!(err.to_string().contains("no live"), "{err}");
    }

    #[test]
    fn separable_curve_has_zero_point() {
        let recs = vec![
            rec(0, 2.0, 1.0, Label::Live),
            rec(1, 1.0, 0.75, Label::Live),
            rec(2, -1.0, 0.25, Label::Spoof),
            rec(3, -2.0, 0.0, Label::Spoof),
        ];
        let curve = det_curve(&recs, 5).unwrap();
        assert!(curve.iter().any(|p| p.apcer == 0.0 && p.bpcer == 0.0));
        assert_eq!(bpcer_at_apcer(&curve, 1.0).bpcer, 0.0);
        assert!(curve.windows(2).all(|w| w[0].threshold < w[1].threshold));
    }

    #[test]
    fn accept_all_endpoint() {
        let recs = vec![
            rec(0, 1.0, 0.5, Label::Live),
            rec(1, 2.0, 1.0, Label::Spoof),
            rec(2, 0.5, 0.25, Label::Spoof),
        ];
        let p = det_curve(&recs, 2).unwrap()[0];
        assert_eq!((p.threshold, p.apcer, p.bpcer), (0.0, 100.0, 0.0));
    }

    #[test]
    fn bpcer_selection() {
        let curve = [
            DetPoint {
                threshold: 0.2,
                apcer: 1.0,
                bpcer: 2.0,
            },
            DetPoint {
                threshold: 0.4,
                apcer: 0.5,
                bpcer: 5.0,
            },
        ];
        let r = bpcer_at_apcer(&curve, 1.0);
        assert_eq!((r.bpcer, r.attainable), (2.0, true));
        let r = bpcer_at_apcer(&curve, 0.1);
        assert_eq!((r.bpcer, r.attainable), (100.0, false));
    }

    #[test]
    fn scores_csv_round_trip() {
        let recs = vec![
            rec(0, 0.123456789, 0.9, Label::Live),
            rec(1, -3.5e-7, 0.0, Label::Spoof),
        ];
        let text = scores_csv(&recs);
        assert!(text.starts_with("id,true_label,raw_score,normalized_score,predicted_label\ns0,live,"));
        assert_eq!(parse_scores_csv(&text).unwrap(), recs);
        let err = parse_scores_csv(&format!("{SCORES_HEADER}\na,b\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { offset, .. } if offset == SCORES_HEADER.len() + 1));
    }

    #[test]
    fn too_few_thresholds() {
        let recs = vec![rec(0, 1.0, 1.0, Label::Live), rec(1, 0.0, 0.0, Label::Spoof)];
        assert!(det_curve(&recs, 1).is_err());
    }
}
