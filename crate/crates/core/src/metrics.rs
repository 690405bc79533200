//! Binary classification metrics from a confusion matrix. The positive
//! class is label 1. Ratios with zero denominators are reported as `None`
//! and serialize as an explicit `n/a`, never as NaN.

use crate::error::{Error, Result};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den > 0 {
                Some(num as f64 / den as f64)
            } else {
                None
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        let accuracy = ratio(tp + tn, tp + fp + tn + fn_);
        MetricsReport {
            tp,
            fp,
            tn,
            fn_,
            precision,
            recall,
            f1,
            accuracy,
        }
    }

    /// Line-oriented serialization; floats use the shortest exact
    /// representation so parsing them back is lossless.
    pub fn to_text(&self) -> String {
        let frac = |v: Option<f64>| match v {
            Some(x) => x.to_string(),
            None => "n/a".to_string(),
        };
        format!(
            "tp {}\nfp {}\ntn {}\nfn {}\nprecision {}\nrecall {}\nf1 {}\naccuracy {}\n",
            self.tp,
            self.fp,
            self.tn,
            self.fn_,
            frac(self.precision),
            frac(self.recall),
            frac(self.f1),
            frac(self.accuracy),
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tp = None;
        let mut fp = None;
        let mut tn = None;
        let mut fn_ = None;
        let mut precision = None;
        let mut recall = None;
        let mut f1 = None;
        let mut accuracy = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once(' ').ok_or_else(|| {
                Error::Data(format!("metrics line {} is not 'key value'", lineno + 1))
            })?;
            let bad = |what: &str| {
                Error::Data(format!(
                    "metrics line {}: bad {what} value {value:?}",
                    lineno + 1
                ))
            };
            let count =
                |v: &str| -> Result<usize> { v.parse().map_err(|_| bad("count")) };
            let fraction = |v: &str| -> Result<Option<f64>> {
                if v == "n/a" {
                    Ok(None)
                } else {
                    v.parse().map(Some).map_err(|_| bad("fraction"))
                }
            };
            match key {
                "tp" => tp = Some(count(value)?),
                "fp" => fp = Some(count(value)?),
                "tn" => tn = Some(count(value)?),
                "fn" => fn_ = Some(count(value)?),
                "precision" => precision = fraction(value)?,
                "recall" => recall = fraction(value)?,
                "f1" => f1 = fraction(value)?,
                "accuracy" => accuracy = fraction(value)?,
                other => {
                    return Err(Error::Data(format!(
                        "metrics line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        let need = |v: Option<usize>, what: &str| {
            v.ok_or_else(|| Error::Data(format!("metrics text is missing {what}")))
        };
        Ok(MetricsReport {
            tp: need(tp, "tp")?,
            fp: need(fp, "fp")?,
            tn: need(tn, "tn")?,
            fn_: need(fn_, "fn")?,
            precision,
            recall,
            f1,
            accuracy,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn hand_checked_confusion_matrix() {
        let m = MetricsReport::from_counts(90, 10, 95, 5);
        assert!(close(m.precision.unwrap(), 0.9));
        assert!(close(m.recall.unwrap(), 90.0 / 95.0));
        let (p, r) = (0.9, 90.0 / 95.0);
        assert!(close(m.f1.unwrap(), 2.0 * p * r / (p + r)));
        assert!(close(m.accuracy.unwrap(), 0.925));
        // spot values to six decimals
        assert!((m.recall.unwrap() - 0.947368).abs() < 1e-6);
        assert!((m.f1.unwrap() - 0.923077).abs() < 1e-6);
    }

    #[test]
    fn perfect_classifier_scores_one_everywhere() {
        let m = MetricsReport::from_counts(50, 0, 50, 0);
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.recall, Some(1.0));
        assert_eq!(m.f1, Some(1.0));
        assert_eq!(m.accuracy, Some(1.0));
    }

    #[test]
    fn all_positive_predictor_on_balanced_data() {
        let m = MetricsReport::from_counts(50, 50, 0, 0);
        assert_eq!(m.recall, Some(1.0));
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.accuracy, Some(0.5));
    }

    #[test]
    fn zero_denominators_serialize_as_na() {
        let m = MetricsReport::from_counts(0, 0, 10, 5);
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        let text = m.to_text();
        assert!(text.contains("precision n/a"));
        assert!(!text.contains("NaN"));
        let back = MetricsReport::from_text(&text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn empty_set_leaves_everything_undefined() {
        let m = MetricsReport::from_counts(0, 0, 0, 0);
        assert_eq!(m.accuracy, None);
        assert_eq!(m.recall, None);
    }

    #[test]
    fn rejects_malformed_text() {
        assert!(MetricsReport::from_text("tp ninety\n").is_err());
        assert!(MetricsReport::from_text("tp 1\nfp 1\ntn 1\n").is_err());
        assert!(MetricsReport::from_text("bogus 3\n").is_err());
    }

    proptest! {
        /// Recomputing fractions from round-tripped counts reproduces the
        /// stored fractions, and F1 lies between precision and recall.
        #[test]
        fn round_trip_and_f1_bounds(
            tp in 0usize..500,
            fp in 0usize..500,
            tn in 0usize..500,
            fn_ in 0usize..500,
        ) {
            let m = MetricsReport::from_counts(tp, fp, tn, fn_);
            let back = MetricsReport::from_text(&m.to_text()).unwrap();
            let recomputed = MetricsReport::from_counts(back.tp, back.fp, back.tn, back.fn_);
            for (a, b) in [
                (recomputed.precision, back.precision),
                (recomputed.recall, back.recall),
                (recomputed.f1, back.f1),
                (recomputed.accuracy, back.accuracy),
            ] {
                match (a, b) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12),
                    (None, None) => {}
                    other => prop_assert!(false, "mismatch: {other:?}"),
                }
            }
            if let (Some(p), Some(r), Some(f1)) = (m.precision, m.recall, m.f1) {
                prop_assert!(f1 >= p.min(r) - 1e-12);
                prop_assert!(f1 <= p.max(r) + 1e-12);
            }
        }
    }
}
