use std::collections::BTreeMap;
use std::fmt::Write as _;

use graphmtl::driver::Method;
use graphmtl::Variant;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Summary { mean, std, values }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub method: Method,
    pub variant: Variant,
    pub repeats: usize,
    pub train_ratio: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: BTreeMap<String, Summary>,
}

impl TrainReport {
    pub fn from_rows(
        method: Method,
        variant: Variant,
        train_ratio: f64,
        seed: u64,
        rows: &[BTreeMap<String, f64>],
    ) -> Self {
        let mut metrics: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for row in rows {
            for (k, v) in row {
                metrics.entry(k.clone()).or_default().push(*v);
            }
        }
        TrainReport {
            method,
            variant,
            repeats: rows.len(),
            train_ratio,
            seed,
            metrics: metrics
                .into_iter()
                .map(|(k, v)| (k, Summary::new(v)))
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let method = serde_json::to_value(self.method).unwrap_or_default();
        let variant = serde_json::to_value(self.variant).unwrap_or_default();
        let mut out = format!(
            "method {} ({}), {} repeat(s), train ratio {}\n",
            method.as_str().unwrap_or("?"),
            variant.as_str().unwrap_or("?"),
            self.repeats,
            self.train_ratio
        );
        let _ = writeln!(out, "{:<20} {:>12} {:>12}", "metric", "mean", "std");
        for (k, s) in &self.metrics {
            let _ = writeln!(out, "{k:<20} {:>12.5} {:>12.5}", s.mean, s.std);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_stats() {
        let s = Summary::new(vec![1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Summary::new(vec![4.0]).std, 0.0);
    }
}
