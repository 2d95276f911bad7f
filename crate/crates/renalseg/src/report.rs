//! Reports, run manifests and cross-report comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use renalseg_core::metrics::{format_table, sort_summaries, CaseMetrics, StrategySummary};

use crate::config::Strategy;
use crate::error::{io_err, PipelineError, Result};

/// Outcome of one strategy in one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub strategy: String,
    pub held_out_subjects: Vec<u32>,
    /// Source cases that contributed training pairs.
    pub train_cases: usize,
    /// Training pairs after augmentation.
    pub train_pairs: usize,
    pub test_cases: usize,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

/// A test case that could not be processed; it is scored as an empty
/// prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseError {
    pub fold: usize,
    pub strategy: String,
    pub case_id: String,
    pub error: String,
}

/// Deterministic result of a run: identical configs give identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool_version: String,
    pub config_hash: String,
    pub phantom_hash: String,
    pub seed: u64,
    /// Sorted by descending mean DSC.
    pub summaries: Vec<StrategySummary>,
    pub folds: Vec<FoldRecord>,
    /// Sorted by strategy, then case id.
    pub cases: Vec<CaseMetrics>,
    pub case_errors: Vec<CaseError>,
}

impl Report {
    pub fn all_folds_completed(&self) -> bool {
        self.folds.iter().all(|f| f.error.is_none())
    }

    pub fn summary(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.summaries.iter().find(|s| s.strategy == strategy.name())
    }

    pub fn mean_dsc(&self, strategy: Strategy) -> Option<f64> {
        self.summary(strategy).map(|s| s.dsc.mean)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        format_table(&self.summaries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Box,
    Checkpoint,
    Prediction,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: ArtifactKind,
    /// Relative to the run's output directory.
    pub path: String,
    pub strategy: Option<String>,
    pub fold: Option<usize>,
    pub case_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub splits: Vec<Split>,
    /// `contrast/geometry` names of the training augmentation lattice; empty
    /// when augmentation is off.
    pub augmentation_lattice: Vec<String>,
    /// Per test case SHA-256 before the run.
    pub test_hashes_before: BTreeMap<String, String>,
    pub test_hashes_after: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
    pub timings: Vec<Timing>,
}

impl RunManifest {
    /// Case ids that appear on both sides of some fold's split.
    pub fn leaked_ids(&self) -> Vec<(usize, String)> {
        let mut out = Vec::new();
        for s in &self.splits {
            let train: BTreeSet<&String> = s.train_ids.iter().collect();
            out.extend(
                s.test_ids
                    .iter()
                    .filter(|id| train.contains(id))
                    .map(|id| (s.fold, id.clone())),
            );
        }
        out
    }

    pub fn test_split_unchanged(&self) -> bool {
        self.test_hashes_before == self.test_hashes_after
    }

    /// Referenced files missing below `dir`.
    pub fn missing_artifacts(&self, dir: &Path) -> Vec<String> {
        self.artifacts
            .iter()
            .filter(|a| !dir.join(&a.path).is_file())
            .map(|a| a.path.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrDelta {
    pub proposed: f64,
    pub proposed_sr: f64,
    /// `proposed_sr - proposed`.
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub phantom_hash: String,
    pub rows: Vec<StrategySummary>,
    /// Pairs whose mean DSC contradicts proposed >= em_only >= cc_unet >= unet_raw.
    pub ordering_violations: Vec<String>,
    pub sr_delta: Option<SrDelta>,
}

impl Comparison {
    pub fn table(&self) -> String {
        let mut s = format_table(&self.rows);
        for v in &self.ordering_violations {
            let _ = writeln!(s, "ordering violated: {v}");
        }
        if let Some(d) = &self.sr_delta {
            let _ = writeln!(
                s,
                "proposed_sr - proposed: {:+.4} ({:.4} vs {:.4})",
                d.difference, d.proposed_sr, d.proposed
            );
        }
        s
    }
}

const EXPECTED_ORDER: [Strategy; 4] = [
    Strategy::Proposed,
    Strategy::EmOnly,
    Strategy::CcUnet,
    Strategy::UnetRaw,
];

/// Merge strategy rows from several reports of the same phantom suite.
pub fn compare_strategies(reports: &[Report]) -> Result<Comparison> {
    let Some(first) = reports.first() else {
        return Err(PipelineError::Comparability("need at least two reports".into()));
    };
    if reports.len() < 2 {
        return Err(PipelineError::Comparability("need at least two reports".into()));
    }
    if let Some(r) = reports.iter().find(|r| r.phantom_hash != first.phantom_hash) {
        return Err(PipelineError::Comparability(format!(
            "phantom hash {} differs from {}",
            r.phantom_hash, first.phantom_hash
        )));
    }
    let mut rows: Vec<StrategySummary> = Vec::new();
    for row in reports.iter().flat_map(|r| &r.summaries) {
        if rows.iter().any(|r| r.strategy == row.strategy) {
            return Err(PipelineError::Comparability(format!(
                "strategy {} appears twice",
                row.strategy
            )));
        }
        rows.push(row.clone());
    }
    sort_summaries(&mut rows);

    let mean = |s: Strategy| rows.iter().find(|r| r.strategy == s.name()).map(|r| r.dsc.mean);
    let mut ordering_violations = Vec::new();
    for (i, &hi) in EXPECTED_ORDER.iter().enumerate() {
        for &lo in &EXPECTED_ORDER[i + 1..] {
            if let (Some(a), Some(b)) = (mean(hi), mean(lo)) {
                if a < b {
                    ordering_violations.push(format!("{hi} ({a:.4}) < {lo} ({b:.4})"));
                }
            }
        }
    }
    let sr_delta = match (mean(Strategy::Proposed), mean(Strategy::ProposedSr)) {
        (Some(proposed), Some(proposed_sr)) => Some(SrDelta {
            proposed,
            proposed_sr,
            difference: proposed_sr - proposed,
        }),
        _ => None,
    };
    Ok(Comparison {
        phantom_hash: first.phantom_hash.clone(),
        rows,
        ordering_violations,
        sr_delta,
    })
}
