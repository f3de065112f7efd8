//! Error reports comparing the integer and float paths.

use std::collections::BTreeMap;

use crate::block::QuantConfig;
use crate::tensor::FloatTensor;
use serde::{Deserialize, Serialize};

/// Error envelope of one comparison: max absolute, mean squared, and max
/// error relative to the reference's absolute maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub max_abs: f64,
    pub mse: f64,
    pub rel: f64,
}

pub fn metrics(got: &FloatTensor, want: &FloatTensor) -> Metrics {
    let max_abs = got.max_abs_diff(want);
    let mse = got.mse(want);
    let ref_absmax = want
        .as_slice()
        .iter()
        .map(|v| v.abs() as f64)
        .fold(0.0, f64::max);
    Metrics {
        max_abs,
        mse,
        rel: max_abs / (ref_absmax + 1e-12),
    }
}

/// Aggregated per-operator statistics across forward passes.
#[derive(Debug, Clone, Default)]
pub struct OpStat {
    pub max_abs: f64,
    pub sq_sum: f64,
    pub count: usize,
    pub ref_absmax: f64,
}

impl OpStat {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            max_abs: self.max_abs,
            mse: self.sq_sum / self.count.max(1) as f64,
            rel: self.max_abs / (self.ref_absmax + 1e-12),
        }
    }
}

/// One clipping-bound sweep point: softmax error at a given c.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepPoint {
    pub c: f64,
    pub softmax_max_err: f64,
}

/// Machine-readable comparison report. Deterministic for a fixed seed:
/// wall-clock timing is only attached on request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReport {
    pub format: String,
    pub seed: u64,
    pub prng: String,
    pub qconfig: QuantConfig,
    pub clip_c: f64,
    pub per_op: BTreeMap<String, Metrics>,
    pub end_to_end: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<BTreeMap<String, Metrics>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_c: Option<Vec<SweepPoint>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_ms: Option<u64>,
}

impl ErrorReport {
    pub fn render_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# Comparison report (seed {}, W{}A{}, c = {})\n\n",
            self.seed, self.qconfig.wbits, self.qconfig.abits, self.clip_c
        ));
        out.push_str("| op | max abs | mse | rel |\n|---|---|---|---|\n");
        for (name, m) in &self.per_op {
            out.push_str(&format!(
                "| {name} | {:.3e} | {:.3e} | {:.3e} |\n",
                m.max_abs, m.mse, m.rel
            ));
        }
        let e = &self.end_to_end;
        out.push_str(&format!(
            "| end-to-end | {:.3e} | {:.3e} | {:.3e} |\n",
            e.max_abs, e.mse, e.rel
        ));
        if let Some(ab) = &self.ablation {
            out.push_str("\n## Ablations (end-to-end)\n\n| mode | max abs | mse | rel |\n|---|---|---|---|\n");
            for (name, m) in ab {
                out.push_str(&format!(
                    "| {name} | {:.3e} | {:.3e} | {:.3e} |\n",
                    m.max_abs, m.mse, m.rel
                ));
            }
        }
        if let Some(sweep) = &self.sweep_c {
            out.push_str("\n## Softmax error vs clipping bound\n\n| c | max err |\n|---|---|\n");
            for p in sweep {
                out.push_str(&format!("| {} | {:.4} |\n", p.c, p.softmax_max_err));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_basic() {
        let a = FloatTensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = FloatTensor::new(vec![2], vec![1.1, 2.0]).unwrap();
        let m = metrics(&b, &a);
        assert!((m.max_abs - 0.1).abs() < 1e-6);
        assert!((m.rel - 0.05).abs() < 1e-6);
    }
}
