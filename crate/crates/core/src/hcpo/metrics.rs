use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::trustregion::TrustRegionStep;
use crate::Result;

/// Version tag written as the first (comment) line of every metrics file.
pub const METRICS_SCHEMA: &str = "# hcpo-metrics v1";

/// Column names of the metrics file, in order.
pub const METRICS_COLUMNS: [&str; 13] = [
    "iteration",
    "mean_return",
    "eval_return",
    "conductor_accepted",
    "conductor_kl",
    "conductor_gain",
    "agent_accepted",
    "agent_kl",
    "agent_gain",
    "update_order",
    "distill_loss",
    "theta_clamps",
    "value_loss",
];

/// Summary of one trust-region update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub accepted: bool,
    pub kl: f64,
    pub gain: f64,
    pub expected_gain: f64,
    pub backtrack_exponent: usize,
    pub skipped: bool,
}

impl From<&TrustRegionStep> for UpdateSummary {
    fn from(s: &TrustRegionStep) -> Self {
        UpdateSummary {
            accepted: s.accepted,
            kl: s.achieved_kl,
            gain: s.surrogate_gain,
            expected_gain: s.expected_gain,
            backtrack_exponent: s.backtrack_exponent,
            skipped: s.skipped.is_some(),
        }
    }
}

/// One row of training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Mean undiscounted return of the training batch.
    pub mean_return: f64,
    /// Mean greedy evaluation return, on evaluation iterations.
    pub eval_return: Option<f64>,
    /// `None` when the variant does not update the conductor.
    pub conductor: Option<UpdateSummary>,
    /// Indexed by agent id.
    pub agents: Vec<UpdateSummary>,
    pub update_order: Vec<usize>,
    /// Post-distillation cross-entropy per agent; empty without distillation.
    pub distill_loss: Vec<f64>,
    pub theta_clamps: usize,
    pub value_loss: f64,
    /// Kept out of the metrics file so that file stays reproducible.
    pub wall_clock_secs: f64,
}

impl IterationMetrics {
    /// Whether any update in this iteration changed a policy.
    pub fn any_accepted(&self) -> bool {
        self.conductor.is_some_and(|c| c.accepted) || self.agents.iter().any(|a| a.accepted)
    }
}

fn join<T, F: Fn(&T) -> String>(items: &[T], f: F) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(";")
}

fn record(m: &IterationMetrics) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    vec![
        m.iteration.to_string(),
        m.mean_return.to_string(),
        opt(m.eval_return),
        m.conductor.map(|c| u8::from(c.accepted).to_string()).unwrap_or_default(),
        opt(m.conductor.map(|c| c.kl)),
        opt(m.conductor.map(|c| c.gain)),
        join(&m.agents, |a| u8::from(a.accepted).to_string()),
        join(&m.agents, |a| a.kl.to_string()),
        join(&m.agents, |a| a.gain.to_string()),
        join(&m.update_order, |i| i.to_string()),
        join(&m.distill_loss, |x| x.to_string()),
        m.theta_clamps.to_string(),
        m.value_loss.to_string(),
    ]
}

/// Streams metrics rows as CSV; list-valued columns are `;`-separated.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_SCHEMA}")?;
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(METRICS_COLUMNS).map_err(csv_error)?;
        Ok(MetricsWriter { inner })
    }

    pub fn write(&mut self, m: &IterationMetrics) -> Result<()> {
        self.inner.write_record(record(m)).map_err(csv_error)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| crate::Error::Io(std::io::Error::other(e.to_string())))
    }
}

fn csv_error(e: csv::Error) -> crate::Error {
    crate::Error::Io(std::io::Error::other(e))
}

/// Median of a sample (mean of the middle pair for even sizes); `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Linear-interpolation quantile, `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Interquartile range.
pub fn iqr(values: &[f64]) -> Option<f64> {
    Some(quantile(values, 0.75)? - quantile(values, 0.25)?)
}
