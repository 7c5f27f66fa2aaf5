//! Binary classification metrics: confusion counts, precision, recall, F1,
//! accuracy and all-points interpolated average precision.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{softmax, Tensor};

/// Display names for class indices 0 and 1.
pub const CLASS_LABELS: [&str; 2] = ["Autistic", "Non Autistic"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix2 {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub positive_class: usize,
}

impl ConfusionMatrix2 {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64, positive_class: usize) -> Self {
        ConfusionMatrix2 {
            tp,
            fp,
            fn_,
            tn,
            positive_class,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts indexed `[actual][predicted]` by class index.
    pub fn table(&self) -> [[u64; 2]; 2] {
        let (pos, neg) = (self.positive_class, 1 - self.positive_class);
        let mut t = [[0; 2]; 2];
        t[pos][pos] = self.tp;
        t[neg][pos] = self.fp;
        t[pos][neg] = self.fn_;
        t[neg][neg] = self.tn;
        t
    }

    /// The same counts viewed with the other class as positive.
    pub fn swapped(&self) -> Self {
        ConfusionMatrix2 {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
            positive_class: 1 - self.positive_class,
        }
    }

    /// Plain-text 2x2 table, rows = actual, columns = predicted.
    pub fn to_text(&self) -> String {
        let t = self.table();
        let mut s = String::new();
        let _ = writeln!(s, "confusion matrix (rows = actual, columns = predicted)");
        let _ = writeln!(s, "{:>10} {:>10} {:>10}", "", "pred 0", "pred 1");
        for (actual, row) in t.iter().enumerate() {
            let _ = writeln!(s, "{:>10} {:>10} {:>10}", format!("actual {actual}"), row[0], row[1]);
        }
        let _ = writeln!(s, "positive class: {}", self.positive_class);
        let _ = writeln!(s, "0 = {}", CLASS_LABELS[0]);
        let _ = writeln!(s, "1 = {}", CLASS_LABELS[1]);
        s
    }
}

fn check_class(c: usize, what: &str) -> Result<()> {
    if c > 1 {
        return Err(Error::InvalidArgument(format!("{what} {c} is not a binary class")));
    }
    Ok(())
}

pub fn confusion(
    predictions: &[usize],
    labels: &[usize],
    positive_class: usize,
) -> Result<ConfusionMatrix2> {
    check_class(positive_class, "positive_class")?;
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let mut cm = ConfusionMatrix2 {
        positive_class,
        ..Default::default()
    };
    for (&p, &l) in predictions.iter().zip(labels) {
        check_class(p, "prediction")?;
        check_class(l, "label")?;
        match (p == positive_class, l == positive_class) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `TP / (TP + FP)`, or 0 when nothing was predicted positive.
pub fn precision(cm: &ConfusionMatrix2) -> f64 {
    ratio(cm.tp, cm.tp + cm.fp)
}

/// `TP / (TP + FN)`, or 0 when there are no actual positives.
pub fn recall(cm: &ConfusionMatrix2) -> f64 {
    ratio(cm.tp, cm.tp + cm.fn_)
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1(cm: &ConfusionMatrix2) -> f64 {
    let (p, r) = (precision(cm), recall(cm));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn accuracy(cm: &ConfusionMatrix2) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::InvalidArgument("accuracy of an empty confusion matrix".into()));
    }
    Ok(ratio(cm.tp + cm.tn, cm.total()))
}

/// Area under the precision-recall curve with the monotone precision envelope.
///
/// Thresholds are placed at every distinct score; tied scores enter together.
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Result<f64> {
    if scores.len() != relevant.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            relevant.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("average_precision scores".into()));
    }
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return Err(Error::InvalidArgument(
            "average precision needs at least one positive label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // (recall, precision) at each distinct threshold
    let mut curve = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            seen += 1;
            tp += relevant[order[i]] as usize;
            i += 1;
        }
        curve.push((tp as f64 / positives as f64, tp as f64 / seen as f64));
    }
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in curve {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    Ok(ap)
}

/// Argmax with ties resolved to the lower class index.
pub fn argmax_predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Only available when per-sample scores are known.
    pub ap: Option<f64>,
    pub counts: ConfusionMatrix2,
    /// Metrics whose denominator was zero and were reported as 0.
    pub degenerate: Vec<&'static str>,
}

pub const CSV_HEADER: &str = "optimizer,accuracy,precision,recall,f1,ap";

impl MetricsReport {
    pub fn from_counts(cm: ConfusionMatrix2) -> Result<Self> {
        let mut degenerate = Vec::new();
        if cm.tp + cm.fp == 0 {
            degenerate.push("precision");
        }
        if cm.tp + cm.fn_ == 0 {
            degenerate.push("recall");
        }
        if precision(&cm) + recall(&cm) == 0.0 {
            degenerate.push("f1");
        }
        Ok(MetricsReport {
            accuracy: accuracy(&cm)?,
            precision: precision(&cm),
            recall: recall(&cm),
            f1: f1(&cm),
            ap: None,
            counts: cm,
            degenerate,
        })
    }

    pub fn from_scores(
        predictions: &[usize],
        positive_scores: &[f64],
        labels: &[usize],
        positive_class: usize,
    ) -> Result<Self> {
        let cm = confusion(predictions, labels, positive_class)?;
        let mut report = Self::from_counts(cm)?;
        let relevant: Vec<bool> = labels.iter().map(|&l| l == positive_class).collect();
        if relevant.iter().any(|&r| r) {
            report.ap = Some(average_precision(positive_scores, &relevant)?);
        } else {
            report.degenerate.push("ap");
        }
        Ok(report)
    }

    /// Flat `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        let _ = writeln!(s, "precision={}", self.precision);
        let _ = writeln!(s, "recall={}", self.recall);
        let _ = writeln!(s, "f1={}", self.f1);
        match self.ap {
            Some(ap) => {
                let _ = writeln!(s, "ap={ap}");
            }
            None => {
                let _ = writeln!(s, "ap=");
            }
        }
        let c = &self.counts;
        let _ = writeln!(s, "tp={}\nfp={}\nfn={}\ntn={}", c.tp, c.fp, c.fn_, c.tn);
        let _ = writeln!(s, "positive_class={}", c.positive_class);
        let _ = writeln!(s, "degenerate={}", self.degenerate.join(","));
        s
    }

    /// One row matching [`CSV_HEADER`]; metrics as fractions with 6 decimals.
    pub fn to_csv_row(&self, optimizer: &str) -> String {
        let ap = self.ap.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{optimizer},{:.6},{:.6},{:.6},{:.6},{ap}",
            self.accuracy, self.precision, self.recall, self.f1
        )
    }

    /// Percentages to two decimals: accuracy, precision, F1, recall.
    pub fn percent_row(&self) -> [f64; 4] {
        let pct = |v: f64| (v * 1e4).round() / 1e2;
        [
            pct(self.accuracy),
            pct(self.precision),
            pct(self.f1),
            pct(self.recall),
        ]
    }
}

/// Assembles a report from `[N, 2]` logits: argmax for the counts, the
/// softmax probability of `positive_class` for AP.
pub fn report(logits: &Tensor, labels: &[usize], positive_class: usize) -> Result<MetricsReport> {
    check_class(positive_class, "positive_class")?;
    let (_, k) = logits.dims2()?;
    if k != 2 {
        return Err(Error::Shape(format!("binary report needs 2 logits per row, got {k}")));
    }
    let predictions = argmax_predictions(logits)?;
    let probs = softmax(logits)?;
    let scores: Vec<f64> = probs
        .data()
        .chunks(2)
        .map(|row| row[positive_class] as f64)
        .collect();
    MetricsReport::from_scores(&predictions, &scores, labels, positive_class)
}
