//! The audit report: one JSON document binding stage outputs and provenance,
//! plus a markdown rendering.
//!
//! Run-dependent values (timestamp, host) live only in
//! [`Provenance::volatile`], so two runs with identical inputs produce
//! reports that differ in that field alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{round4, GroupedMetrics};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Timestamp and host of a run; excluded from determinism comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Volatile {
    pub timestamp_unix: u64,
    pub host: String,
}

impl Volatile {
    pub fn now() -> Self {
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let host = std::env::var("HOSTNAME").unwrap_or_default();
        Volatile { timestamp_unix, host }
    }
}

/// Provenance block written by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    /// Resolved configuration of the stage.
    pub config: serde_json::Value,
    /// Input artifacts by role.
    pub inputs: BTreeMap<String, String>,
    pub volatile: Volatile,
}

impl Provenance {
    pub fn new(command: &str, config: serde_json::Value, inputs: BTreeMap<String, String>) -> Self {
        Provenance {
            tool: "grounded-audit".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            inputs,
            volatile: Volatile::now(),
        }
    }
}

/// One row of a metric table: a method and its grouped metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRow {
    pub method: String,
    /// Whether heatmap grounding fed this row's inputs.
    pub grounded: bool,
    pub metrics: GroupedMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceRow {
    pub method: String,
    pub grounded: bool,
    pub k: usize,
    pub precision_at_k: Option<f64>,
    pub num_slices: usize,
    /// `(size, accuracy)` of the worst slice.
    pub worst_slice: Option<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeywordRow {
    pub class: String,
    pub grounded: bool,
    pub keyword: String,
    pub score: f64,
    pub subgroup_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapRow {
    pub stratum: String,
    pub count: usize,
    pub mean_iou_core: f64,
    pub mean_iou_spurious: f64,
    pub median_iou_core: f64,
    pub median_iou_spurious: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPoint {
    pub tau: f64,
    pub precision_at_k: Option<f64>,
    pub worst_group_accuracy: Option<f64>,
    pub adjusted_average_accuracy: Option<f64>,
}

/// The audit report. Sections are present only for the stages that ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditReport {
    pub schema_version: u32,
    pub provenance: Provenance,
    /// Provenance blocks of the stage artifacts the report was built from.
    pub stages: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<Vec<OverlapRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slices: Option<Vec<SliceRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<KeywordRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_shot: Option<Vec<MetricRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mitigation: Option<Vec<MetricRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Vec<AblationPoint>>,
}

impl AuditReport {
    pub fn new(provenance: Provenance) -> Self {
        AuditReport {
            schema_version: REPORT_SCHEMA_VERSION,
            provenance,
            stages: BTreeMap::new(),
            overlap: None,
            slices: None,
            keywords: None,
            zero_shot: None,
            mitigation: None,
            ablation: None,
        }
    }

    fn has_content(&self) -> bool {
        self.overlap.is_some()
            || self.slices.is_some()
            || self.keywords.is_some()
            || self.zero_shot.is_some()
            || self.mitigation.is_some()
            || self.ablation.is_some()
    }

    /// Structural checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Schema(m));
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return fail(format!("schema version {} (expected {REPORT_SCHEMA_VERSION})", self.schema_version));
        }
        if !self.has_content() {
            return fail("report has no stage sections".into());
        }
        let unit = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Schema(format!("{name} = {v} outside [0, 1]")))
            }
        };
        for row in self.zero_shot.iter().chain(&self.mitigation).flatten() {
            let m = &row.metrics;
            unit("worst_group_accuracy", m.worst_group_accuracy)?;
            unit("adjusted_average_accuracy", m.adjusted_average_accuracy)?;
            unit("average_accuracy", m.average_accuracy)?;
            let gap_units = (m.adjusted_average_accuracy * 1e4).round() - (m.worst_group_accuracy * 1e4).round();
            if ((m.gap * 1e4).round() - gap_units).abs() > 0.5 {
                return fail(format!("{}: gap does not equal adjusted average minus worst group", row.method));
            }
            if !m.per_group.contains_key(&m.worst_group) {
                return fail(format!("{}: worst group `{}` not among groups", row.method, m.worst_group));
            }
        }
        for row in self.slices.iter().flatten() {
            if let Some(p) = row.precision_at_k {
                unit("precision_at_k", p)?;
            }
        }
        for row in self.keywords.iter().flatten() {
            unit("subgroup_accuracy", row.subgroup_accuracy)?;
            if !row.score.is_finite() {
                return fail(format!("keyword `{}` has a non-finite score", row.keyword));
            }
        }
        for row in self.overlap.iter().flatten() {
            unit("mean_iou_core", row.mean_iou_core)?;
            unit("mean_iou_spurious", row.mean_iou_spurious)?;
        }
        Ok(())
    }

    /// Parses and validates a serialized report.
    pub fn from_json(text: &str) -> Result<Self> {
        let report: AuditReport = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Audit report\n");
        let _ = writeln!(
            md,
            "Schema version {}, produced by {} {}.\n",
            self.schema_version, self.provenance.tool, self.provenance.tool_version
        );
        if let Some(rows) = &self.overlap {
            let _ = writeln!(md, "## Explanation overlap\n");
            let _ = writeln!(md, "| Stratum | n | Mean IoU core | Mean IoU spurious | Median IoU core | Median IoU spurious |");
            let _ = writeln!(md, "|---|---:|---:|---:|---:|---:|");
            for r in rows {
                let _ = writeln!(
                    md,
                    "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                    r.stratum, r.count, r.mean_iou_core, r.mean_iou_spurious, r.median_iou_core, r.median_iou_spurious
                );
            }
            md.push('\n');
        }
        if let Some(rows) = &self.slices {
            let _ = writeln!(md, "## Slice discovery\n");
            let _ = writeln!(md, "| Method | Grounded | Slices | Precision@k | Worst slice (size, acc.) |");
            let _ = writeln!(md, "|---|---|---:|---:|---|");
            for r in rows {
                let p = r.precision_at_k.map_or("n/a".into(), |p| format!("{:.1}% (k={})", 100.0 * p, r.k));
                let w = r.worst_slice.map_or("n/a".into(), |(n, a)| format!("{n}, {:.1}%", 100.0 * a));
                let _ = writeln!(md, "| {} | {} | {} | {} | {} |", r.method, yes_no(r.grounded), r.num_slices, p, w);
            }
            md.push('\n');
        }
        if let Some(rows) = &self.keywords {
            let _ = writeln!(md, "## Keywords\n");
            let _ = writeln!(md, "| Class | Grounded | Keyword | Score | Accuracy |");
            let _ = writeln!(md, "|---|---|---|---:|---:|");
            for r in rows {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {:.2} | {:.1}% |",
                    r.class,
                    yes_no(r.grounded),
                    r.keyword,
                    r.score,
                    100.0 * r.subgroup_accuracy
                );
            }
            md.push('\n');
        }
        for (title, rows) in [("Zero-shot classification", &self.zero_shot), ("Mitigation", &self.mitigation)] {
            if let Some(rows) = rows {
                let _ = writeln!(md, "## {title}\n");
                let _ = writeln!(md, "| Method | Grounded | Worst | Adj. avg. | Avg. | Gap |");
                let _ = writeln!(md, "|---|---|---:|---:|---:|---:|");
                for r in rows {
                    let m = &r.metrics;
                    let _ = writeln!(
                        md,
                        "| {} | {} | {} | {} | {} | {} |",
                        r.method,
                        yes_no(r.grounded),
                        pct(m.worst_group_accuracy),
                        pct(m.adjusted_average_accuracy),
                        pct(m.average_accuracy),
                        pct(round4(m.adjusted_average_accuracy) - round4(m.worst_group_accuracy)),
                    );
                }
                md.push('\n');
            }
        }
        if let Some(points) = &self.ablation {
            let _ = writeln!(md, "## Threshold ablation\n");
            let _ = writeln!(md, "| τ | Precision@k | Worst | Adj. avg. |");
            let _ = writeln!(md, "|---:|---:|---:|---:|");
            let opt = |v: Option<f64>| v.map_or("n/a".to_string(), pct);
            for p in points {
                let _ = writeln!(
                    md,
                    "| {:.2} | {} | {} | {} |",
                    p.tau,
                    opt(p.precision_at_k),
                    opt(p.worst_group_accuracy),
                    opt(p.adjusted_average_accuracy)
                );
            }
            md.push('\n');
        }
        md
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * round4(v))
}

/// Validates the report and writes `<stem>.json` and `<stem>.md`.
pub fn emit_report(report: &AuditReport, json_path: &Path) -> Result<()> {
    report.validate()?;
    let text = serde_json::to_string_pretty(report)? + "\n";
    // The written form must survive its own validator.
    AuditReport::from_json(&text)?;
    std::fs::write(json_path, &text).map_err(|e| Error::io(json_path, e))?;
    let md_path = json_path.with_extension("md");
    std::fs::write(&md_path, report.to_markdown()).map_err(|e| Error::io(&md_path, e))
}
