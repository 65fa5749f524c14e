//! Detection metrics and the per-run metrics report.

use std::fmt::Write as _;

use thiserror::Error;

use crate::pool::Transferability;
use crate::textio::fmt_f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no positive (label 1) rows: recall is undefined")]
    NoPositives,
    #[error("{predictions} predictions for {labels} labels")]
    Length { predictions: usize, labels: usize },
    #[error("empty sample")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_labels(predictions: &[u8], labels: &[u8]) -> Result<Self, MetricError> {
        if predictions.len() != labels.len() {
            return Err(MetricError::Length { predictions: predictions.len(), labels: labels.len() });
        }
        let mut c = Self::default();
        for (p, y) in predictions.iter().zip(labels) {
            match (*p == 1, *y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn recall(&self) -> Result<f64, MetricError> {
        let pos = self.tp + self.fn_;
        if pos == 0 {
            return Err(MetricError::NoPositives);
        }
        Ok(self.tp as f64 / pos as f64)
    }

    /// `None` when nothing was flagged.
    pub fn precision(&self) -> Option<f64> {
        let flagged = self.tp + self.fp;
        (flagged > 0).then(|| self.tp as f64 / flagged as f64)
    }

    /// `None` without negative rows.
    pub fn false_positive_rate(&self) -> Option<f64> {
        let neg = self.fp + self.tn;
        (neg > 0).then(|| self.fp as f64 / neg as f64)
    }

    pub fn accuracy(&self) -> Result<f64, MetricError> {
        match self.total() {
            0 => Err(MetricError::Empty),
            n => Ok((self.tp + self.tn) as f64 / n as f64),
        }
    }
}

/// Detected attacks over all attacks.
pub fn recall(predictions: &[u8], labels: &[u8]) -> Result<f64, MetricError> {
    Confusion::from_labels(predictions, labels)?.recall()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetMetrics {
    pub name: String,
    pub rows: usize,
    pub recall: f64,
    pub precision: Option<f64>,
    pub false_positive_rate: Option<f64>,
    pub accuracy: f64,
}

impl SetMetrics {
    pub fn new(name: &str, predictions: &[u8], labels: &[u8]) -> Result<Self, MetricError> {
        let c = Confusion::from_labels(predictions, labels)?;
        Ok(Self {
            name: name.into(),
            rows: c.total(),
            recall: c.recall()?,
            precision: c.precision(),
            false_positive_rate: c.false_positive_rate(),
            accuracy: c.accuracy()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
        Some(Self { n, mean, std: var.sqrt(), min: s[0], median, max: s[n - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub sets: Vec<SetMetrics>,
    pub transferability: Option<Transferability>,
    pub cai: Option<Summary>,
    /// Wall-clock seconds per named stage.
    pub timings: Vec<(String, f64)>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), fmt_f64)
}

impl MetricsReport {
    /// CSV with one row per test set.
    pub fn sets_csv(&self) -> String {
        let mut out = String::from("set,rows,recall,precision,false_positive_rate,accuracy\n");
        for s in &self.sets {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.name,
                s.rows,
                fmt_f64(s.recall),
                opt(s.precision),
                opt(s.false_positive_rate),
                fmt_f64(s.accuracy)
            );
        }
        out
    }

    /// Structured text of everything except timings.
    pub fn to_text(&self) -> String {
        let mut out = String::from("[sets]\n");
        out.push_str(&self.sets_csv());
        if let Some(t) = &self.transferability {
            let _ = writeln!(out, "\n[transferability]\neta_av = {}", fmt_f64(t.eta_av));
            let ex: Vec<String> = t.excluded.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(out, "excluded = [{}]", ex.join(", "));
            for row in &t.eta {
                let cells: Vec<String> = row.iter().map(|v| opt(*v)).collect();
                let _ = writeln!(out, "{}", cells.join(","));
            }
        }
        if let Some(c) = &self.cai {
            let _ = writeln!(
                out,
                "\n[cai]\nn = {}\nmean = {}\nstd = {}\nmin = {}\nmedian = {}\nmax = {}",
                c.n,
                fmt_f64(c.mean),
                fmt_f64(c.std),
                fmt_f64(c.min),
                fmt_f64(c.median),
                fmt_f64(c.max)
            );
        }
        out
    }
}
