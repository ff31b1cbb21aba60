//! Overlap between explanation masks and core / spurious segmentations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::threshold_mask;
use crate::io::{mask_path, read_mask_png, HeatmapStore};
use crate::model::{check_tau, Alignment, BinaryMask, DatasetManifest};

/// Intersection over union. Two empty masks are identical, so their IoU is 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values().iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Five-number summary plus mean, for boxplots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    /// Quartiles use linear interpolation between order statistics.
    /// An empty sample summarizes to all zeros.
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary {
                count: 0,
                mean: 0.0,
                min: 0.0,
                q1: 0.0,
                median: 0.0,
                q3: 0.0,
                max: 0.0,
            };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Summary {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOverlap {
    pub sample_id: String,
    pub class: String,
    pub alignment: Alignment,
    pub iou_core: f64,
    pub iou_spurious: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub iou_core: Summary,
    pub iou_spurious: Summary,
}

impl StratumSummary {
    fn of(samples: &[&SampleOverlap]) -> Self {
        let core: Vec<f64> = samples.iter().map(|s| s.iou_core).collect();
        let sp: Vec<f64> = samples.iter().map(|s| s.iou_spurious).collect();
        StratumSummary {
            iou_core: Summary::of(&core),
            iou_spurious: Summary::of(&sp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub tau: f64,
    pub requested: usize,
    pub audited: usize,
    pub excluded: Vec<String>,
    pub samples: Vec<SampleOverlap>,
    pub overall: StratumSummary,
    /// Keyed by `aligned` / `conflicting` / `unknown`.
    pub by_alignment: BTreeMap<String, StratumSummary>,
    pub by_class: BTreeMap<String, StratumSummary>,
    /// Keyed by `<alignment>/<class>`.
    pub by_alignment_and_class: BTreeMap<String, StratumSummary>,
    pub empty_union_convention: String,
}

/// Per-sample masks supplied to the audit.
pub struct SegmentationMasks {
    pub core: BTreeMap<String, BinaryMask>,
    pub spurious: BTreeMap<String, BinaryMask>,
}

impl SegmentationMasks {
    /// Reads `<root>/<core_name>/<id>.png` and `<root>/<spurious_name>/<id>.png`;
    /// missing files are skipped (and later reported as excluded).
    pub fn load(root: &Path, core_name: &str, spurious_name: &str, ids: &[&str]) -> Result<Self> {
        let mut core = BTreeMap::new();
        let mut spurious = BTreeMap::new();
        for &id in ids {
            for (name, map) in [(core_name, &mut core), (spurious_name, &mut spurious)] {
                let p = mask_path(root, name, id);
                if p.exists() {
                    map.insert(id.to_string(), read_mask_png(&p)?);
                }
            }
        }
        Ok(SegmentationMasks { core, spurious })
    }
}

/// Audits `ids` (all samples with a heatmap when `None`). Samples missing a
/// heatmap or either segmentation are excluded and listed.
pub fn overlap_audit(
    manifest: &DatasetManifest,
    heatmaps: &HeatmapStore,
    masks: &SegmentationMasks,
    tau: f64,
    ids: Option<&[&str]>,
) -> Result<OverlapReport> {
    check_tau(tau)?;
    let by_id: BTreeMap<&str, usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let requested: Vec<String> = match ids {
        Some(ids) => ids.iter().map(|s| s.to_string()).collect(),
        None => heatmaps.iter().map(|(id, _)| id.clone()).collect(),
    };

    let mut samples = Vec::new();
    let mut excluded = Vec::new();
    for id in &requested {
        let (Some(&idx), Some(hm), Some(mc), Some(ms)) = (
            by_id.get(id.as_str()),
            heatmaps.get(id),
            masks.core.get(id),
            masks.spurious.get(id),
        ) else {
            excluded.push(id.clone());
            continue;
        };
        let b = threshold_mask(hm, tau)?;
        let record = &manifest.records[idx];
        samples.push(SampleOverlap {
            sample_id: id.clone(),
            class: manifest.header.class_names[record.label].clone(),
            alignment: manifest.alignment(record),
            iou_core: iou(&b, mc)?,
            iou_spurious: iou(&b, ms)?,
        });
    }

    let all: Vec<&SampleOverlap> = samples.iter().collect();
    let mut by_alignment: BTreeMap<String, Vec<&SampleOverlap>> = BTreeMap::new();
    let mut by_class: BTreeMap<String, Vec<&SampleOverlap>> = BTreeMap::new();
    let mut by_both: BTreeMap<String, Vec<&SampleOverlap>> = BTreeMap::new();
    for s in &samples {
        by_alignment.entry(s.alignment.as_str().into()).or_default().push(s);
        by_class.entry(s.class.clone()).or_default().push(s);
        by_both
            .entry(format!("{}/{}", s.alignment.as_str(), s.class))
            .or_default()
            .push(s);
    }
    let summarize = |m: BTreeMap<String, Vec<&SampleOverlap>>| {
        m.into_iter()
            .map(|(k, v)| (k, StratumSummary::of(&v)))
            .collect::<BTreeMap<_, _>>()
    };
    Ok(OverlapReport {
        tau,
        requested: requested.len(),
        audited: samples.len(),
        excluded,
        overall: StratumSummary::of(&all),
        by_alignment: summarize(by_alignment),
        by_class: summarize(by_class),
        by_alignment_and_class: summarize(by_both),
        samples,
        empty_union_convention: "iou(empty, empty) = 1".into(),
    })
}
