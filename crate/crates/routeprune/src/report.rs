//! Report types and their JSON / CSV emitters.
//!
//! Field order in the JSON output follows struct declaration order, and no
//! hash maps are involved, so identical reports serialize to identical bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use routeprune_core::flops::{FlopsReport, Heatmap, Schedule};
use routeprune_core::pruning::{PrunePlan, PruneSchedule, WindowScores};
use routeprune_core::reduction::ReductionPolicy;
use routeprune_core::theory::{gamma_upper_bound, LayerStability};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub model: String,
    pub num_layers: usize,
    pub num_tokens: usize,
    pub num_vision: usize,
    pub num_text: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub num_shared: usize,
}

/// Gate assignment summary for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub tokens: usize,
    pub vision_tokens: usize,
    pub text_tokens: usize,
    pub routed_evaluations: usize,
    pub shared_evaluations: usize,
    pub reduced_tokens: usize,
    /// Evaluations of the unmodified model on the full sequence.
    pub baseline_routed_evaluations: usize,
    pub baseline_shared_evaluations: usize,
    pub pruned_here: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub layer: usize,
    pub vision_before: usize,
    pub target: usize,
    pub vision_kept: usize,
    pub vision_dropped: usize,
    pub vision_absorbed: usize,
    pub merge_windows: Vec<usize>,
    /// Original vision ordinals folded into each merged token.
    pub merged_members: Vec<Vec<usize>>,
    /// Rows of the rebuilt hidden state, when the trace carries hidden states.
    pub hidden_tokens_after: Option<usize>,
    pub scores: WindowScores,
    pub plan: PrunePlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaCheck {
    pub gamma: f64,
    pub beta: f64,
    pub window: usize,
    pub bound: Option<f64>,
    pub exceeds_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsSummary {
    pub prune: FlopsReport,
    pub act: FlopsReport,
    pub combined: FlopsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsSection {
    /// Model built from the run's own dimensions.
    pub run: FlopsSummary,
    /// Named preset evaluated with the run's retention and reduction.
    pub preset: Option<FlopsSummary>,
    /// Routed expert evaluations relative to the unmodified model.
    pub measured_routed_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub source: SourceSummary,
    pub reduction: Option<ReductionPolicy>,
    pub schedule: PruneSchedule,
    pub gamma: GammaCheck,
    pub final_vision_tokens: usize,
    pub layers: Vec<LayerRecord>,
    pub stages: Vec<StageRecord>,
    pub stability: Vec<LayerStability>,
    pub flops: FlopsSection,
    pub warnings: Vec<String>,
}

/// One row of the merge-rate feasibility table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub overall_retention: f64,
    pub beta: f64,
    pub window: usize,
    pub bound: f64,
    pub reference: f64,
    pub discrepancy: bool,
}

/// Largest allowed gap between a formula value and its reference value.
pub const GAMMA_REFERENCE_TOL: f64 = 0.005;

/// Merge-rate bounds at the commonly used stage retentions, against the
/// commonly quoted rounded values. A row whose formula value differs from
/// the quoted one by more than [`GAMMA_REFERENCE_TOL`] is flagged.
pub fn gamma_reference_table() -> Vec<GammaRow> {
    [(0.75, 0.91, 0.025), (0.50, 0.79, 0.05), (0.25, 0.63, 0.15)]
        .into_iter()
        .map(|(r, beta, reference)| {
            let bound = gamma_upper_bound(beta, 5).expect("valid table inputs");
            GammaRow {
                overall_retention: r,
                beta,
                window: 5,
                bound,
                reference,
                discrepancy: (bound - reference).abs() > GAMMA_REFERENCE_TOL,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub retention: f64,
    pub stage_beta: f64,
    pub prune: FlopsReport,
    pub combined: FlopsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsCliReport {
    pub schema_version: u32,
    pub schedule: Schedule,
    pub config: routeprune_core::flops::FlopsConfig,
    pub act: FlopsReport,
    pub retention: Vec<RetentionRow>,
    pub gamma_table: Vec<GammaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisLayer {
    pub layer: usize,
    pub adjacent_similarity_vision: Option<f64>,
    pub adjacent_similarity_text: Option<f64>,
    pub topk_mass_vision: Option<f64>,
    pub topk_mass_text: Option<f64>,
    pub stability: Option<LayerStability>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub source: SourceSummary,
    pub window: usize,
    pub top_k: usize,
    pub layers: Vec<AnalysisLayer>,
}

pub fn to_json<T: Serialize>(report: &T) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("reports serialize");
    s.push('\n');
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// One row per layer.
pub fn layers_csv(report: &RunReport) -> Vec<u8> {
    let stability = |l: usize| report.stability.iter().find(|s| s.layer == l);
    csv_bytes(
        &[
            "layer",
            "tokens",
            "vision_tokens",
            "text_tokens",
            "routed_evaluations",
            "shared_evaluations",
            "reduced_tokens",
            "baseline_routed_evaluations",
            "baseline_shared_evaluations",
            "pruned_here",
            "stability_vision",
            "stability_text",
        ],
        report.layers.iter().map(|r| {
            let s = stability(r.layer);
            vec![
                r.layer.to_string(),
                r.tokens.to_string(),
                r.vision_tokens.to_string(),
                r.text_tokens.to_string(),
                r.routed_evaluations.to_string(),
                r.shared_evaluations.to_string(),
                r.reduced_tokens.to_string(),
                r.baseline_routed_evaluations.to_string(),
                r.baseline_shared_evaluations.to_string(),
                r.pruned_here.to_string(),
                opt(s.and_then(|s| s.vision.as_ref()).map(|v| v.score)),
                opt(s.and_then(|s| s.text.as_ref()).map(|v| v.score)),
            ]
        }),
    )
}

pub fn stages_csv(report: &RunReport) -> Vec<u8> {
    csv_bytes(
        &[
            "layer",
            "vision_before",
            "target",
            "kept",
            "dropped",
            "absorbed",
            "merged_windows",
            "warnings",
        ],
        report.stages.iter().map(|s| {
            vec![
                s.layer.to_string(),
                s.vision_before.to_string(),
                s.target.to_string(),
                s.vision_kept.to_string(),
                s.vision_dropped.to_string(),
                s.vision_absorbed.to_string(),
                s.merge_windows.len().to_string(),
                s.plan.warnings.len().to_string(),
            ]
        }),
    )
}

/// Start layers down the rows, reduced counts across the columns.
pub fn heatmap_csv(h: &Heatmap) -> Vec<u8> {
    let mut header = vec!["start_layer".to_string()];
    header.extend(h.reduced_counts.iter().map(|k| format!("k{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(
        &header,
        h.start_layers.iter().enumerate().map(|(i, l)| {
            let mut row = vec![l.to_string()];
            row.extend(h.savings.row(i).iter().map(|s| s.to_string()));
            row
        }),
    )
}

pub fn analysis_csv(report: &AnalysisReport) -> Vec<u8> {
    csv_bytes(
        &[
            "layer",
            "adjacent_similarity_vision",
            "adjacent_similarity_text",
            "topk_mass_vision",
            "topk_mass_text",
            "stability_vision",
            "stability_text",
        ],
        report.layers.iter().map(|l| {
            let st = l.stability.as_ref();
            vec![
                l.layer.to_string(),
                opt(l.adjacent_similarity_vision),
                opt(l.adjacent_similarity_text),
                opt(l.topk_mass_vision),
                opt(l.topk_mass_text),
                opt(st.and_then(|s| s.vision.as_ref()).map(|v| v.score)),
                opt(st.and_then(|s| s.text.as_ref()).map(|v| v.score)),
            ]
        }),
    )
}

/// Write `(file name, bytes)` pairs into `dir`, creating it if needed.
pub fn write_files(dir: &Path, files: &[(&str, Vec<u8>)]) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    files
        .iter()
        .map(|(name, bytes)| {
            let path = dir.join(name);
            fs::File::create(&path)?.write_all(bytes)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_table_flags_only_the_middle_row() {
        let t = gamma_reference_table();
        assert_eq!(
            t.iter().map(|r| r.discrepancy).collect::<Vec<_>>(),
            [false, true, false]
        );
        assert!((t[1].bound - 0.0665).abs() < 5e-4);
    }

    #[test]
    fn heatmap_csv_shape() {
        let h = Heatmap {
            start_layers: vec![0, 1],
            reduced_counts: vec![1, 2, 3],
            savings: routeprune_core::Matrix::zeros(2, 3),
        };
        let text = String::from_utf8(heatmap_csv(&h)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "start_layer,k1,k2,k3");
        assert_eq!(lines.len(), 3);
    }
}
