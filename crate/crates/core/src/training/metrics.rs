use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fmt_num;
use crate::losses::LossBreakdown;

/// Holds target ground truth on behalf of the adaptation loop, which only
/// ever sees scores.
#[derive(Debug, Clone)]
pub struct Evaluator {
    labels: Vec<usize>,
    n_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    /// Fraction of correct predictions.
    pub overall: f64,
    /// Within-class accuracy; `None` for classes absent from the data.
    pub per_class: Vec<Option<f64>>,
    /// Mean of the present classes' accuracies.
    pub mean_per_class: f64,
    /// Set when at least one class had no samples.
    pub missing_classes: bool,
}

impl Evaluator {
    pub fn new(labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::contract(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Evaluator { labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn score(&self, predictions: &[usize]) -> Result<Accuracy> {
        accuracy(predictions, &self.labels, self.n_classes)
    }
}

/// Overall and per-class accuracy of `predictions` against `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Accuracy> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::contract("accuracy of an empty dataset"));
    }
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(Accuracy {
        overall: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
        mean_per_class: present.iter().sum::<f64>() / present.len() as f64,
        missing_classes: present.len() < n_classes,
        per_class,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// 1-based adaptation epoch.
    pub epoch: usize,
    pub accuracy: Option<f64>,
    pub mean_class_accuracy: Option<f64>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub pseudo_label_accuracy: Option<f64>,
    /// Samples in the conflict set, summed over the epoch's batches.
    pub conflict_count: usize,
    /// Sample-weighted mean of the epoch's batch losses; `batch_size` holds
    /// the number of samples seen.
    pub loss_breakdown: LossBreakdown,
    /// Median uncertainty ratio of samples whose pseudo-label agrees with the
    /// hypothesis at the start of the epoch.
    pub ratio_median_nonconflict: Option<f64>,
}

const NA: &str = "na";

fn opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_else(|| NA.to_string())
}

/// Field order of a metrics log line.
pub const METRICS_FIELDS: [&str; 13] = [
    "epoch",
    "accuracy",
    "mean_class_accuracy",
    "per_class_accuracy",
    "pseudo_label_accuracy",
    "conflict_count",
    "samples",
    "l_ent",
    "l_info",
    "l_ce",
    "l_rot",
    "total",
    "ratio_median_nonconflict",
];

impl MetricsRecord {
    /// Space-separated `key=value` pairs in [`METRICS_FIELDS`] order. Floats
    /// carry 9 significant digits; missing values are written as `na`.
    pub fn to_line(&self) -> String {
        let per_class: Vec<String> = self.per_class_accuracy.iter().map(|v| opt(*v)).collect();
        let per_class = if per_class.is_empty() { NA.to_string() } else { per_class.join(",") };
        let b = &self.loss_breakdown;
        let values = [
            self.epoch.to_string(),
            opt(self.accuracy),
            opt(self.mean_class_accuracy),
            per_class,
            opt(self.pseudo_label_accuracy),
            self.conflict_count.to_string(),
            b.batch_size.to_string(),
            fmt_num(b.l_ent),
            fmt_num(b.l_info),
            fmt_num(b.l_ce),
            fmt_num(b.l_rot),
            fmt_num(b.total),
            opt(self.ratio_median_nonconflict),
        ];
        let mut s = String::new();
        for (i, (k, v)) in METRICS_FIELDS.iter().zip(values).enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{k}={v}");
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let bad = |msg: String| Error::contract(format!("metrics line: {msg}"));
        let pairs: Vec<(&str, &str)> = line
            .split_whitespace()
            .map(|kv| kv.split_once('=').ok_or_else(|| bad(format!("'{kv}' is not key=value"))))
            .collect::<Result<_>>()?;
        if pairs.len() != METRICS_FIELDS.len() || pairs.iter().zip(METRICS_FIELDS).any(|((k, _), f)| *k != f) {
            return Err(bad("fields out of order or missing".into()));
        }
        let v = |i: usize| pairs[i].1;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("'{s}' is not a number")));
        let opt_num = |s: &str| if s == NA { Ok(None) } else { num(s).map(Some) };
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("'{s}' is not an integer")));
        let per_class = if v(3) == NA {
            Vec::new()
        } else {
            v(3).split(',').map(opt_num).collect::<Result<_>>()?
        };
        Ok(MetricsRecord {
            epoch: int(v(0))?,
            accuracy: opt_num(v(1))?,
            mean_class_accuracy: opt_num(v(2))?,
            per_class_accuracy: per_class,
            pseudo_label_accuracy: opt_num(v(4))?,
            conflict_count: int(v(5))?,
            loss_breakdown: LossBreakdown {
                batch_size: int(v(6))?,
                l_ent: num(v(7))?,
                l_info: num(v(8))?,
                l_ce: num(v(9))?,
                l_rot: num(v(10))?,
                total: num(v(11))?,
                conflict_count: int(v(5))?,
            },
            ratio_median_nonconflict: opt_num(v(12))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let a = accuracy(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!((a.overall, a.mean_per_class), (1.0, 1.0));
        assert!(!a.missing_classes);
    }

    #[test]
    fn imbalanced_binary_example() {
        let mut labels = vec![0; 90];
        labels.extend(vec![1; 10]);
        let preds = vec![0; 100];
        let a = accuracy(&preds, &labels, 2).unwrap();
        assert!((a.overall - 0.9).abs() < 1e-12);
        assert!((a.mean_per_class - 0.5).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_excluded_and_flagged() {
        let a = accuracy(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(a.mean_per_class, 1.0);
        assert!(a.missing_classes);
        assert_eq!(a.per_class[2], None);
    }

    #[test]
    fn record_line_round_trip() {
        let r = MetricsRecord {
            epoch: 3,
            accuracy: Some(0.875),
            mean_class_accuracy: Some(0.8),
            per_class_accuracy: vec![Some(1.0), None, Some(0.6)],
            pseudo_label_accuracy: None,
            conflict_count: 12,
            loss_breakdown: LossBreakdown {
                l_ent: 0.25,
                l_info: -1.25,
                l_ce: 0.5,
                l_rot: 0.0,
                total: -0.85,
                conflict_count: 12,
                batch_size: 600,
            },
            ratio_median_nonconflict: Some(0.640625),
        };
        let line = r.to_line();
        assert!(line.starts_with("epoch=3 accuracy=8.75000000e-1 "));
        assert_eq!(MetricsRecord::parse_line(&line).unwrap(), r);
        assert!(MetricsRecord::parse_line("epoch=1").is_err());
    }
}
