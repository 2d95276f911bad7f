//! Overlap metrics (DSC, VD, PPV) and per-strategy aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::LabelVolume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub strategy: String,
    pub dsc: f64,
    /// `|V_pred - V_truth| / V_truth`.
    pub vd: f64,
    /// `TP / (TP + FP)`, 0 for an empty prediction.
    pub ppv: f64,
}

/// Voxel counts behind [`CaseMetrics`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn of(pred: &LabelVolume, truth: &LabelVolume) -> Result<Self> {
        if pred.dims() != truth.dims() {
            return Err(Error::DimMismatch(format!(
                "prediction {:?} vs truth {:?}",
                pred.dims(),
                truth.dims()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn predicted(&self) -> usize {
        self.tp + self.fp
    }

    pub fn actual(&self) -> usize {
        self.tp + self.fn_
    }
}

/// Metrics of a binary prediction against a nonempty binary truth; any
/// nonzero label counts as foreground.
pub fn evaluate(pred: &LabelVolume, truth: &LabelVolume) -> Result<CaseMetrics> {
    let c = Confusion::of(pred, truth)?;
    if c.actual() == 0 {
        return Err(Error::EmptyTruth);
    }
    let (p, t) = (c.predicted() as f64, c.actual() as f64);
    Ok(CaseMetrics {
        case_id: String::new(),
        strategy: String::new(),
        // binary masks: sum of squares equals the count
        dsc: 2.0 * c.tp as f64 / (p + t),
        vd: (p - t).abs() / t,
        ppv: if c.predicted() == 0 { 0.0 } else { c.tp as f64 / p },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub cases: usize,
    pub dsc: MeanStd,
    pub vd: MeanStd,
    pub ppv: MeanStd,
}

/// Per-strategy mean and population std, sorted by descending mean DSC
/// (ties by name).
pub fn aggregate(cases: &[CaseMetrics]) -> Vec<StrategySummary> {
    let mut groups: BTreeMap<&str, Vec<&CaseMetrics>> = BTreeMap::new();
    for c in cases {
        groups.entry(&c.strategy).or_default().push(c);
    }
    let mut rows: Vec<StrategySummary> = groups
        .into_iter()
        .map(|(name, g)| {
            let col = |f: fn(&CaseMetrics) -> f64| MeanStd::of(&g.iter().map(|c| f(c)).collect::<Vec<_>>());
            StrategySummary {
                strategy: name.to_string(),
                cases: g.len(),
                dsc: col(|c| c.dsc),
                vd: col(|c| c.vd),
                ppv: col(|c| c.ppv),
            }
        })
        .collect();
    sort_summaries(&mut rows);
    rows
}

pub fn sort_summaries(rows: &mut [StrategySummary]) {
    rows.sort_by(|a, b| {
        b.dsc
            .mean
            .total_cmp(&a.dsc.mean)
            .then_with(|| a.strategy.cmp(&b.strategy))
    });
}

/// Aligned `Method | DSC | VD | PPV` table with `mean ± std` cells.
pub fn format_table(rows: &[StrategySummary]) -> String {
    let cell = |m: &MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
    let width = rows
        .iter()
        .map(|r| r.strategy.len())
        .max()
        .unwrap_or(0)
        .max("Method".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} | {:<11} | {:<11} | {:<11}",
        "Method", "DSC", "VD", "PPV"
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 3 * 14));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$} | {:<11} | {:<11} | {:<11}",
            r.strategy,
            cell(&r.dsc),
            cell(&r.vd),
            cell(&r.ppv)
        );
    }
    out
}
