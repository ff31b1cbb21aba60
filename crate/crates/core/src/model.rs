//! Shared domain types: samples, manifests, group tables, heatmaps, masks and
//! predictions.
//!
//! Everything here is plain data. Groups are identified by the pair
//! `(attribute, label)` and serialized as `"attribute|label"` using the names
//! declared in the manifest header.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An image as an `H x W x C` grid of intensities in `[0, 1]`.
pub type Image = Array3<f64>;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    /// Path of the image, relative to the manifest directory.
    pub image_ref: String,
    pub label: usize,
    /// Ground-truth spurious attribute, if annotated.
    pub attribute: Option<usize>,
    pub split: Split,
}

/// A group `g(a, y)`, keyed by attribute and label indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub attribute: usize,
    pub label: usize,
}

/// Sidecar header declaring class and attribute vocabularies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub attribute_names: Vec<String>,
}

impl ManifestHeader {
    pub fn new(class_names: Vec<String>, attribute_names: Vec<String>) -> Self {
        ManifestHeader {
            schema_version: MANIFEST_SCHEMA_VERSION,
            class_names,
            attribute_names,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Group structure of a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupTable {
    /// Every `(attribute, label)` combination observed in the manifest, sorted.
    pub groups: Vec<GroupKey>,
    /// Training-split sample count `n_g` per group (zero for groups only seen
    /// outside the training split).
    pub train_counts: BTreeMap<GroupKey, usize>,
    /// Attribute -> majority label. Attributes absent from the training split
    /// have no entry.
    pub majority_map: BTreeMap<usize, usize>,
}

impl GroupTable {
    pub fn from_records(records: &[SampleRecord]) -> Self {
        let mut groups = BTreeSet::new();
        let mut train_counts = BTreeMap::new();
        for r in records {
            if let Some(attribute) = r.attribute {
                let key = GroupKey {
                    attribute,
                    label: r.label,
                };
                groups.insert(key);
                let count = train_counts.entry(key).or_insert(0);
                if r.split == Split::Train {
                    *count += 1;
                }
            }
        }
        let mut table = GroupTable {
            groups: groups.into_iter().collect(),
            train_counts,
            majority_map: BTreeMap::new(),
        };
        table.majority_map = majority_map_lenient(&table);
        table
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn attributes(&self) -> BTreeSet<usize> {
        self.groups.iter().map(|g| g.attribute).collect()
    }

    /// True when `M(a) = y` holds for the group.
    pub fn is_aligned(&self, key: GroupKey) -> Option<bool> {
        self.majority_map
            .get(&key.attribute)
            .map(|&label| label == key.label)
    }

    /// Groups where the spurious correlation fails (`M(a) != y`).
    pub fn conflicting_groups(&self) -> Vec<GroupKey> {
        self.groups
            .iter()
            .copied()
            .filter(|&g| self.is_aligned(g) == Some(false))
            .collect()
    }

    pub fn total_train(&self) -> usize {
        self.train_counts.values().sum()
    }
}

fn majority_for(table: &GroupTable, attribute: usize) -> Option<usize> {
    // Iterating in key order visits labels ascending, so `>` keeps the lowest
    // label on ties.
    let mut best: Option<(usize, usize)> = None;
    for (key, &count) in table.train_counts.range(
        GroupKey {
            attribute,
            label: 0,
        }..=GroupKey {
            attribute,
            label: usize::MAX,
        },
    ) {
        match best {
            Some((_, c)) if count <= c => {}
            _ => best = Some((key.label, count)),
        }
    }
    best.filter(|&(_, c)| c > 0).map(|(label, _)| label)
}

fn majority_map_lenient(table: &GroupTable) -> BTreeMap<usize, usize> {
    table
        .attributes()
        .into_iter()
        .filter_map(|a| majority_for(table, a).map(|y| (a, y)))
        .collect()
}

/// Maps each attribute to the label it co-occurs with most often in the
/// training split. Ties go to the lowest label id.
///
/// Unlike the map cached on [`GroupTable`], this fails when an attribute has
/// no training samples at all.
pub fn derive_majority_map(table: &GroupTable) -> Result<BTreeMap<usize, usize>> {
    let mut map = BTreeMap::new();
    for a in table.attributes() {
        match majority_for(table, a) {
            Some(y) => {
                map.insert(a, y);
            }
            None => return Err(Error::AttributeWithoutTrainSamples(a.to_string())),
        }
    }
    Ok(map)
}

/// A loaded dataset manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
    pub group_table: GroupTable,
    /// Directory image paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Validates records against the header and derives the group table.
    pub fn new(header: ManifestHeader, records: Vec<SampleRecord>, root: PathBuf) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if r.label >= header.class_names.len() {
                return Err(Error::ManifestParse {
                    location: r.id.clone(),
                    message: format!("label index {} outside class set", r.label),
                });
            }
            if let Some(a) = r.attribute {
                if a >= header.attribute_names.len() {
                    return Err(Error::ManifestParse {
                        location: r.id.clone(),
                        message: format!("attribute index {a} outside attribute set"),
                    });
                }
            }
        }
        let group_table = GroupTable::from_records(&records);
        Ok(DatasetManifest {
            header,
            records,
            group_table,
            root,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.header.num_classes()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn image_path(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.image_ref)
    }

    pub fn group_key(record: &SampleRecord) -> Option<GroupKey> {
        record.attribute.map(|attribute| GroupKey {
            attribute,
            label: record.label,
        })
    }

    /// `"attribute|label"` name of a group.
    pub fn group_name(&self, key: GroupKey) -> String {
        format!(
            "{}|{}",
            self.header.attribute_names[key.attribute], self.header.class_names[key.label]
        )
    }

    pub fn group_id(&self, record: &SampleRecord) -> Option<String> {
        Self::group_key(record).map(|k| self.group_name(k))
    }

    /// Training counts keyed by group name.
    pub fn train_counts_by_name(&self) -> BTreeMap<String, usize> {
        self.group_table
            .train_counts
            .iter()
            .map(|(&k, &n)| (self.group_name(k), n))
            .collect()
    }

    pub fn alignment(&self, record: &SampleRecord) -> Alignment {
        match Self::group_key(record).and_then(|k| self.group_table.is_aligned(k)) {
            Some(true) => Alignment::Aligned,
            Some(false) => Alignment::Conflicting,
            None => Alignment::Unknown,
        }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.header.class_names.iter().position(|c| c == name)
    }
}

/// Whether a sample follows the spurious correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Aligned,
    Conflicting,
    Unknown,
}

impl Alignment {
    pub fn as_str(self) -> &'static str {
        match self {
            Alignment::Aligned => "aligned",
            Alignment::Conflicting => "conflicting",
            Alignment::Unknown => "unknown",
        }
    }
}

/// Explanation intensity field with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    values: Array2<f64>,
    source_size: (usize, usize),
}

impl Heatmap {
    pub fn new(values: Array2<f64>, source_size: (usize, usize)) -> Result<Self> {
        for &v in values.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite("heatmap".into()));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("heatmap value {v} outside [0, 1]")));
            }
        }
        Ok(Heatmap {
            values,
            source_size,
        })
    }

    pub fn zeros(shape: (usize, usize), source_size: (usize, usize)) -> Self {
        Heatmap {
            values: Array2::zeros(shape),
            source_size,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Strictly binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    values: Array2<bool>,
}

impl BinaryMask {
    pub fn new(values: Array2<bool>) -> Self {
        BinaryMask { values }
    }

    pub fn from_fn(shape: (usize, usize), f: impl FnMut((usize, usize)) -> bool) -> Self {
        BinaryMask {
            values: Array2::from_shape_fn(shape, f),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<bool> {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[[row, col]]
    }

    /// Pixel-wise subset test.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape()
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .all(|(&a, &b)| !a || b)
    }
}

/// A classifier's output on one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub predicted_label: usize,
    pub class_probabilities: Vec<f64>,
    pub correct: bool,
}

impl PredictionRecord {
    pub fn from_probabilities(
        sample_id: impl Into<String>,
        class_probabilities: Vec<f64>,
        true_label: usize,
    ) -> Result<Self> {
        if class_probabilities.is_empty() {
            return Err(Error::invalid("empty probability vector"));
        }
        let mut sum = 0.0;
        for &p in &class_probabilities {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::invalid(format!("invalid probability {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("probabilities sum to {sum}")));
        }
        let predicted_label = argmax(&class_probabilities);
        Ok(PredictionRecord {
            sample_id: sample_id.into(),
            predicted_label,
            class_probabilities,
            correct: predicted_label == true_label,
        })
    }
}

/// Index of the maximum, lowest index on ties. NaNs are never selected.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Heatmap variant that produced an explanation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CamMethod {
    #[serde(rename = "gradcam")]
    GradCam,
    #[serde(rename = "scorecam")]
    ScoreCam,
    #[serde(rename = "gradcam++")]
    GradCamPlusPlus,
    #[serde(rename = "fullgrad")]
    FullGrad,
}

impl CamMethod {
    pub const ALL: [CamMethod; 4] = [
        CamMethod::GradCam,
        CamMethod::ScoreCam,
        CamMethod::GradCamPlusPlus,
        CamMethod::FullGrad,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::ScoreCam => "scorecam",
            CamMethod::GradCamPlusPlus => "gradcam++",
            CamMethod::FullGrad => "fullgrad",
        }
    }
}

impl FromStr for CamMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CamMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown cam method `{s}`")))
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How masked-out pixels are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    #[default]
    Zero,
    /// Per-channel mean of the image being masked.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Visual grounding switch and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub tau: f64,
    pub cam_method: CamMethod,
    pub enabled: bool,
    #[serde(default)]
    pub fill: FillMode,
    #[serde(default)]
    pub resize: ResizeMode,
}

impl GroundingConfig {
    pub const DEFAULT_TAU: f64 = 0.7;

    pub fn new(tau: f64, cam_method: CamMethod, enabled: bool) -> Result<Self> {
        check_tau(tau)?;
        Ok(GroundingConfig {
            tau,
            cam_method,
            enabled,
            fill: FillMode::Zero,
            resize: ResizeMode::Bilinear,
        })
    }

    pub fn enabled(tau: f64) -> Result<Self> {
        Self::new(tau, CamMethod::GradCam, true)
    }

    pub fn disabled() -> Self {
        GroundingConfig {
            tau: Self::DEFAULT_TAU,
            cam_method: CamMethod::GradCam,
            enabled: false,
            fill: FillMode::Zero,
            resize: ResizeMode::Bilinear,
        }
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::invalid(format!("tau {tau} outside [0, 1]")))
    }
}

// ---------------------------------------------------------------------------
// Manifest files
// ---------------------------------------------------------------------------

/// Path of the sidecar header for a manifest: `<stem>.header.json`.
pub fn header_path(manifest_path: &Path) -> PathBuf {
    let stem = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    manifest_path.with_file_name(format!("{stem}.header.json"))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    image_path: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attribute: Option<String>,
    split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("ndjson")
    )
}

/// Loads a CSV or JSON-lines manifest plus its sidecar header.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let header_file = header_path(path);
    let header_text =
        std::fs::read_to_string(&header_file).map_err(|e| Error::io(&header_file, e))?;
    let header: ManifestHeader =
        serde_json::from_str(&header_text).map_err(|e| Error::ManifestParse {
            location: header_file.display().to_string(),
            message: e.to_string(),
        })?;

    let rows = if is_jsonl(path) {
        read_jsonl_rows(path)?
    } else {
        read_csv_rows(path)?
    };

    let mut records = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        records.push(row_to_record(&header, row, line)?);
    }
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    DatasetManifest::new(header, records, root)
}

fn read_csv_rows(path: &Path) -> Result<Vec<(usize, ManifestRow)>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::ManifestParse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        // Line 1 is the column header.
        let line = i + 2;
        let row = row.map_err(|e| Error::ManifestParse {
            location: format!("{}:{line}", path.display()),
            message: e.to_string(),
        })?;
        rows.push((line, row));
    }
    Ok(rows)
}

fn read_jsonl_rows(path: &Path) -> Result<Vec<(usize, ManifestRow)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line).map_err(|e| Error::ManifestParse {
            location: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        rows.push((i + 1, row));
    }
    Ok(rows)
}

fn row_to_record(header: &ManifestHeader, row: ManifestRow, line: usize) -> Result<SampleRecord> {
    let parse_err = |message: String| Error::ManifestParse {
        location: format!("line {line} (id `{}`)", row.id),
        message,
    };
    if row.id.is_empty() {
        return Err(parse_err("empty id".into()));
    }
    let label = header
        .class_names
        .iter()
        .position(|c| *c == row.label)
        .ok_or_else(|| parse_err(format!("unknown label `{}`", row.label)))?;
    let attribute = match row.attribute.as_deref() {
        None | Some("") => None,
        Some(name) => Some(
            header
                .attribute_names
                .iter()
                .position(|a| a == name)
                .ok_or_else(|| parse_err(format!("unknown attribute `{name}`")))?,
        ),
    };
    let split: Split = row.split.parse()?;
    if let Some(group) = row.group.as_deref().filter(|g| !g.is_empty()) {
        let expected = attribute.map(|a| format!("{}|{}", header.attribute_names[a], row.label));
        if expected.as_deref() != Some(group) {
            return Err(parse_err(format!(
                "group `{group}` inconsistent with attribute and label"
            )));
        }
    }
    Ok(SampleRecord {
        id: row.id,
        image_ref: row.image_path,
        label,
        attribute,
        split,
    })
}

/// Writes the manifest rows and the sidecar header. The format follows the
/// file extension (`.jsonl` / `.ndjson` for JSON lines, CSV otherwise).
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let header_file = header_path(path);
    let header_json = serde_json::to_string_pretty(&manifest.header)? + "\n";
    std::fs::write(&header_file, header_json).map_err(|e| Error::io(&header_file, e))?;

    let has_attributes = manifest.records.iter().any(|r| r.attribute.is_some());
    let rows = manifest.records.iter().map(|r| ManifestRow {
        id: r.id.clone(),
        image_path: r.image_ref.clone(),
        label: manifest.header.class_names[r.label].clone(),
        attribute: r
            .attribute
            .map(|a| manifest.header.attribute_names[a].clone())
            .or_else(|| has_attributes.then(String::new)),
        split: r.split.as_str().to_string(),
        group: None,
    });

    if is_jsonl(path) {
        let mut out = String::new();
        for row in rows {
            out.push_str(&serde_json::to_string(&row)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    } else {
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::ManifestParse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        let csv_err = |e: csv::Error| Error::ManifestParse {
            location: path.display().to_string(),
            message: e.to_string(),
        };
        if has_attributes {
            writer
                .write_record(["id", "image_path", "label", "attribute", "split"])
                .map_err(csv_err)?;
        } else {
            writer
                .write_record(["id", "image_path", "label", "split"])
                .map_err(csv_err)?;
        }
        for row in rows {
            let mut fields = vec![row.id, row.image_path, row.label];
            if let Some(a) = row.attribute {
                fields.push(a);
            }
            fields.push(row.split);
            writer.write_record(&fields).map_err(csv_err)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: usize, attribute: Option<usize>, split: Split) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            image_ref: format!("images/{id}.png"),
            label,
            attribute,
            split,
        }
    }

    fn table_from_counts(counts: &[((usize, usize), usize)]) -> GroupTable {
        let mut records = Vec::new();
        for &((a, y), n) in counts {
            for i in 0..n {
                records.push(record(&format!("{a}-{y}-{i}"), y, Some(a), Split::Train));
            }
        }
        GroupTable::from_records(&records)
    }

    #[test]
    fn strict_majority() {
        let t = table_from_counts(&[((0, 0), 90), ((0, 1), 10)]);
        assert_eq!(derive_majority_map(&t).unwrap()[&0], 0);
    }

    #[test]
    fn majority_tie_breaks_to_lowest_label() {
        let t = table_from_counts(&[((0, 1), 50), ((0, 0), 50)]);
        assert_eq!(derive_majority_map(&t).unwrap()[&0], 0);
        let t = table_from_counts(&[((0, 2), 50), ((0, 1), 50)]);
        assert_eq!(derive_majority_map(&t).unwrap()[&0], 1);
    }

    #[test]
    fn attribute_without_train_samples_is_an_error() {
        let records = vec![
            record("a", 0, Some(0), Split::Train),
            record("b", 1, Some(1), Split::Val),
        ];
        let t = GroupTable::from_records(&records);
        assert!(matches!(
            derive_majority_map(&t),
            Err(Error::AttributeWithoutTrainSamples(_))
        ));
        // The cached map simply omits it.
        assert_eq!(t.majority_map.len(), 1);
        assert_eq!(t.is_aligned(GroupKey { attribute: 1, label: 1 }), None);
    }

    #[test]
    fn group_table_partitions_training_set() {
        let records = vec![
            record("a", 0, Some(0), Split::Train),
            record("b", 0, Some(1), Split::Train),
            record("c", 1, Some(1), Split::Train),
            record("d", 1, None, Split::Train),
            record("e", 1, Some(1), Split::Test),
        ];
        let t = GroupTable::from_records(&records);
        assert_eq!(t.groups.len(), 3);
        assert_eq!(t.total_train(), 3);
    }

    #[test]
    fn prediction_record_invariants() {
        let p = PredictionRecord::from_probabilities("x", vec![0.5, 0.5], 1).unwrap();
        assert_eq!(p.predicted_label, 0);
        assert!(!p.correct);
        assert!(PredictionRecord::from_probabilities("x", vec![0.5, 0.6], 1).is_err());
        assert!(PredictionRecord::from_probabilities("x", vec![-0.1, 1.1], 1).is_err());
    }

    #[test]
    fn heatmap_rejects_out_of_range() {
        assert!(Heatmap::new(Array2::from_elem((2, 2), 1.5), (2, 2)).is_err());
        assert!(Heatmap::new(Array2::from_elem((2, 2), f64::NAN), (2, 2)).is_err());
        assert!(Heatmap::new(Array2::from_elem((2, 2), 0.5), (2, 2)).is_ok());
    }

    #[test]
    fn cam_method_identifiers() {
        for id in ["gradcam", "scorecam", "gradcam++", "fullgrad"] {
            assert_eq!(id.parse::<CamMethod>().unwrap().as_str(), id);
        }
        assert!("lime".parse::<CamMethod>().is_err());
    }

    #[test]
    fn grounding_config_tau_range() {
        assert!(GroundingConfig::enabled(1.2).is_err());
        assert!(GroundingConfig::enabled(-0.1).is_err());
        assert!(GroundingConfig::enabled(0.0).is_ok());
    }
}
