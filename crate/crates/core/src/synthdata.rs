//! Procedural spurious-correlation datasets.
//!
//! Every image is a square with a central *core* region carrying a
//! low-contrast gray texture that encodes the class, surrounded by a
//! *background* of a flat, saturated color that encodes the attribute.
//! Attribute `i` is the majority attribute of class `i`. In the training
//! split a sample's attribute is its class's majority attribute with
//! probability `rho` (uniform over the others otherwise); validation and test
//! are balanced over all groups. The core and background masks are exact.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ensure_dir, mask_path, write_image_png, write_mask_png, Dataset, HeatmapStore};
use crate::model::{save_manifest, BinaryMask, DatasetManifest, Heatmap, Image, ManifestHeader, SampleRecord, Split};
use crate::overlap::SegmentationMasks;
use crate::providers::{CaptionProvider, FeatureRecipe, SyntheticEmbedder};

/// Class textures, in the order classes are assigned to them.
pub const PATTERNS: &[&str] = &["hstripes", "vstripes", "checker", "blocks", "hbands", "vbands"];

/// Attribute colors, in the order attributes are assigned to them.
pub const PALETTE: &[(&str, [f64; 3])] = &[
    ("red", [0.9, 0.1, 0.1]),
    ("blue", [0.1, 0.1, 0.9]),
    ("green", [0.1, 0.8, 0.1]),
    ("yellow", [0.9, 0.9, 0.1]),
    ("magenta", [0.9, 0.1, 0.9]),
    ("cyan", [0.1, 0.9, 0.9]),
];

pub const CORE_MASK: &str = "core";
pub const SPURIOUS_MASK: &str = "spurious";

fn pattern_sign(pattern: usize, y: usize, x: usize) -> f64 {
    let on = match pattern {
        0 => y % 2 == 0,
        1 => x % 2 == 0,
        2 => (x + y) % 2 == 0,
        3 => (x / 2 + y / 2) % 2 == 0,
        4 => (y / 2) % 2 == 0,
        _ => (x / 2) % 2 == 0,
    };
    if on {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub rho: f64,
    pub image_size: usize,
    pub core_size: usize,
    /// Peak-to-peak amplitude of the class texture.
    pub core_contrast: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 2,
            n_train: 400,
            n_val: 200,
            n_test: 200,
            rho: 0.95,
            image_size: 16,
            core_size: 8,
            core_contrast: 0.2,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 || k > PATTERNS.len() {
            return Err(Error::invalid(format!("class count must be in 2..={}", PATTERNS.len())));
        }
        if !(self.rho >= 1.0 / k as f64 && self.rho <= 1.0) {
            return Err(Error::invalid(format!("rho must lie in [1/{k}, 1], got {}", self.rho)));
        }
        if self.core_size < 2 || self.image_size < self.core_size + 2 || (self.image_size - self.core_size) % 2 != 0 {
            return Err(Error::invalid(format!(
                "image size {} too small for a centered core of {} with a background border",
                self.image_size, self.core_size
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.core_contrast > 0.0 && self.core_contrast <= 1.0) {
            return Err(Error::invalid("noise must be >= 0 and contrast in (0, 1]"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        PATTERNS[..self.num_classes].iter().map(|s| s.to_string()).collect()
    }

    pub fn attribute_names(&self) -> Vec<String> {
        PALETTE[..self.num_classes].iter().map(|(n, _)| n.to_string()).collect()
    }

    fn core_bounds(&self) -> (usize, usize) {
        let start = (self.image_size - self.core_size) / 2;
        (start, start + self.core_size)
    }

    pub fn in_core(&self, y: usize, x: usize) -> bool {
        let (a, b) = self.core_bounds();
        (a..b).contains(&y) && (a..b).contains(&x)
    }

    pub fn core_mask(&self) -> BinaryMask {
        BinaryMask::from_fn((self.image_size, self.image_size), |(y, x)| self.in_core(y, x))
    }

    pub fn spurious_mask(&self) -> BinaryMask {
        BinaryMask::from_fn((self.image_size, self.image_size), |(y, x)| !self.in_core(y, x))
    }

    /// Noise-free image; `None` leaves the region black.
    pub fn render(&self, class: Option<usize>, attribute: Option<usize>) -> Image {
        let s = self.image_size;
        Array3::from_shape_fn((s, s, 3), |(y, x, c)| {
            if self.in_core(y, x) {
                class.map_or(0.0, |k| 0.5 + 0.5 * self.core_contrast * pattern_sign(k, y, x))
            } else {
                attribute.map_or(0.0, |a| PALETTE[a].1[c])
            }
        })
    }

    /// Image of one sample: the clean rendering plus noise, quantized to 8 bits.
    pub fn sample_image(&self, class: usize, attribute: usize, rng: &mut ChaCha8Rng) -> Image {
        let mut img = self.render(Some(class), Some(attribute));
        if self.noise > 0.0 {
            let normal = Normal::new(0.0, self.noise).expect("finite noise");
            img.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        img.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        img
    }

    /// Class whose texture correlates best with the core region.
    pub fn detect_class(&self, image: &Image) -> usize {
        let (a, b) = self.core_bounds();
        let mut gray = Vec::new();
        for y in a..b {
            for x in a..b {
                gray.push((y, x, (0..3).map(|c| image[[y, x, c]]).sum::<f64>() / 3.0));
            }
        }
        let mean = gray.iter().map(|g| g.2).sum::<f64>() / gray.len() as f64;
        let scores: Vec<f64> = (0..self.num_classes)
            .map(|k| gray.iter().map(|&(y, x, v)| (v - mean) * pattern_sign(k, y, x)).sum())
            .collect();
        crate::model::argmax(&scores)
    }

    /// Palette attribute nearest to the mean color of the non-black background.
    /// `None` when the background is entirely black.
    pub fn detect_attribute(&self, image: &Image) -> Option<usize> {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        let s = self.image_size;
        for y in 0..s {
            for x in 0..s {
                if self.in_core(y, x) {
                    continue;
                }
                let px = [image[[y, x, 0]], image[[y, x, 1]], image[[y, x, 2]]];
                if px.iter().any(|&v| v > 0.0) {
                    (0..3).for_each(|c| sum[c] += px[c]);
                    n += 1;
                }
            }
        }
        if n == 0 {
            return None;
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
        let d: Vec<f64> = PALETTE[..self.num_classes]
            .iter()
            .map(|(_, rgb)| -rgb.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        Some(crate::model::argmax(&d))
    }

    /// Fraction of non-black pixels inside (`core = true`) or outside the core.
    pub fn visible_fraction(&self, image: &Image, core: bool) -> f64 {
        let s = self.image_size;
        let (mut vis, mut total) = (0usize, 0usize);
        for y in 0..s {
            for x in 0..s {
                if self.in_core(y, x) == core {
                    total += 1;
                    vis += (0..3).any(|c| image[[y, x, c]] > 0.0) as usize;
                }
            }
        }
        vis as f64 / total as f64
    }
}

/// Per-sample generator stream: the seed selects the key and the global
/// sample index selects the stream.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// A generated dataset. Masks are identical for every sample.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub dataset: Dataset,
    pub core_mask: BinaryMask,
    pub spurious_mask: BinaryMask,
}

pub fn generate_spurious_dataset(config: &SynthConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let k = config.num_classes;
    let mut plan: Vec<(Split, usize)> = Vec::new();
    for (split, n) in [(Split::Train, config.n_train), (Split::Val, config.n_val), (Split::Test, config.n_test)] {
        plan.extend((0..n).map(|i| (split, i)));
    }
    let samples: Vec<(SampleRecord, Image)> = plan
        .par_iter()
        .enumerate()
        .map(|(global, &(split, i))| {
            let mut rng = sample_rng(config.seed, global);
            let (label, attribute) = match split {
                Split::Train => {
                    let label = rng.random_range(0..k);
                    let attribute = if rng.random::<f64>() < config.rho {
                        label
                    } else {
                        let other = rng.random_range(0..k - 1);
                        if other >= label {
                            other + 1
                        } else {
                            other
                        }
                    };
                    (label, attribute)
                }
                _ => {
                    let g = i % (k * k);
                    (g % k, g / k)
                }
            };
            let id = format!("{}-{i:05}", split.as_str());
            let image = config.sample_image(label, attribute, &mut rng);
            let record = SampleRecord {
                image_ref: format!("images/{id}.png"),
                id,
                label,
                attribute: Some(attribute),
                split,
            };
            (record, image)
        })
        .collect();
    let (records, images): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
    let header = ManifestHeader::new(config.class_names(), config.attribute_names());
    let manifest = DatasetManifest::new(header, records, ".".into())?;
    Ok(SyntheticDataset {
        config: config.clone(),
        dataset: Dataset::new(manifest, images)?,
        core_mask: config.core_mask(),
        spurious_mask: config.spurious_mask(),
    })
}

impl SyntheticDataset {
    /// Writes `manifest.csv` (+ header), `images/` and `masks/{core,spurious}/`
    /// under `dir`, and points the manifest root at `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        ensure_dir(&dir.join("images"))?;
        ensure_dir(&dir.join("masks").join(CORE_MASK))?;
        ensure_dir(&dir.join("masks").join(SPURIOUS_MASK))?;
        let manifest = &self.dataset.manifest;
        manifest
            .records
            .par_iter()
            .zip(self.dataset.images.par_iter())
            .try_for_each(|(r, img)| -> Result<()> {
                write_image_png(&dir.join(&r.image_ref), img)?;
                write_mask_png(&mask_path(&dir.join("masks"), CORE_MASK, &r.id), &self.core_mask)?;
                write_mask_png(&mask_path(&dir.join("masks"), SPURIOUS_MASK, &r.id), &self.spurious_mask)
            })?;
        save_manifest(manifest, &dir.join("manifest.csv"))?;
        self.dataset.manifest.root = dir.to_path_buf();
        Ok(())
    }

    pub fn masks(&self) -> SegmentationMasks {
        let ids = self.dataset.manifest.records.iter().map(|r| r.id.clone());
        SegmentationMasks {
            core: ids.clone().map(|id| (id, self.core_mask.clone())).collect(),
            spurious: ids.map(|id| (id, self.spurious_mask.clone())).collect(),
        }
    }
}

/// Region a planted heatmap highlights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Core,
    Spurious,
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "core" => Ok(Region::Core),
            "spurious" => Ok(Region::Spurious),
            other => Err(Error::invalid(format!("unknown region `{other}`"))),
        }
    }
}

pub const DEFAULT_SHARPNESS: f64 = 2.0;

/// Gaussian blur (σ = 1/sharpness, replicate padding) of a mask indicator,
/// min-max normalized. An infinite sharpness returns the indicator itself.
pub fn smoothed_indicator(mask: &BinaryMask, sharpness: f64) -> Result<Heatmap> {
    if !(sharpness > 0.0) {
        return Err(Error::invalid("sharpness must be positive"));
    }
    let (h, w) = mask.shape();
    let ind = mask.values().mapv(|b| if b { 1.0 } else { 0.0 });
    let sigma = 1.0 / sharpness;
    let radius = (3.0 * sigma).ceil() as isize;
    let values = if radius == 0 {
        ind
    } else {
        let kernel: Vec<f64> = (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let ksum: f64 = kernel.iter().sum();
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let rows = ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
            (-radius..=radius)
                .map(|d| kernel[(d + radius) as usize] * ind[[y, clamp(x as isize + d, w)]])
                .sum::<f64>()
                / ksum
        });
        ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
            (-radius..=radius)
                .map(|d| kernel[(d + radius) as usize] * rows[[clamp(y as isize + d, h), x]])
                .sum::<f64>()
                / ksum
        })
    };
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let values = if max > min { values.mapv(|v| (v - min) / (max - min)) } else { values.mapv(|_| 0.0) };
    Heatmap::new(values.mapv(|v| v.clamp(0.0, 1.0)), (h, w))
}

/// Heatmaps highlighting one region for every sample of `manifest`.
pub fn plant_heatmaps(manifest: &DatasetManifest, masks: &SegmentationMasks, target: Region, sharpness: f64) -> Result<HeatmapStore> {
    plant_heatmaps_with(manifest, masks, |_| target, sharpness)
}

/// Heatmaps whose target region is chosen per sample.
pub fn plant_heatmaps_with(
    manifest: &DatasetManifest,
    masks: &SegmentationMasks,
    target: impl Fn(&SampleRecord) -> Region,
    sharpness: f64,
) -> Result<HeatmapStore> {
    let mut store = HeatmapStore::new();
    for r in &manifest.records {
        let set = match target(r) {
            Region::Core => &masks.core,
            Region::Spurious => &masks.spurious,
        };
        let mask = set
            .get(&r.id)
            .ok_or_else(|| Error::invalid(format!("missing {:?} mask for `{}`", target(r), r.id)))?;
        store.insert(r.id.clone(), smoothed_indicator(mask, sharpness)?);
    }
    Ok(store)
}

/// Embedder whose vocabulary anchors every class word at its core-only
/// prototype and every attribute word at its background-only prototype.
pub fn synthetic_embedder(config: &SynthConfig, recipe: FeatureRecipe) -> Result<SyntheticEmbedder> {
    let mut e = SyntheticEmbedder::new(recipe, 3, SyntheticEmbedder::DEFAULT_OFFSET);
    for (k, name) in config.class_names().iter().enumerate() {
        e = e.with_anchor_image(name, &config.render(Some(k), None))?;
    }
    for (a, name) in config.attribute_names().iter().enumerate() {
        e = e.with_anchor_image(name, &config.render(None, Some(a)))?;
    }
    Ok(e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionMode {
    /// Names only the most salient visible content: the class texture when
    /// the core is visible, else the background color.
    Salient,
    /// Names everything visible.
    Full,
}

/// Template captioner for synthetic images.
#[derive(Debug, Clone)]
pub struct SyntheticCaptioner {
    pub config: SynthConfig,
    pub mode: CaptionMode,
    /// Minimum fraction of non-black pixels for a region to count as visible.
    pub visibility: f64,
}

impl SyntheticCaptioner {
    pub fn new(config: SynthConfig, mode: CaptionMode) -> Self {
        SyntheticCaptioner {
            config,
            mode,
            visibility: 0.5,
        }
    }
}

impl CaptionProvider for SyntheticCaptioner {
    fn caption(&self, image: &Image) -> Result<String> {
        let s = self.config.image_size;
        if image.dim() != (s, s, 3) {
            return Err(Error::ShapeMismatch(format!("captioner expects {s}x{s}x3 images")));
        }
        let core = self.config.visible_fraction(image, true) >= self.visibility;
        let background = self.config.visible_fraction(image, false) >= self.visibility;
        let class = core.then(|| PATTERNS[self.config.detect_class(image)]);
        let attribute = if background {
            self.config.detect_attribute(image).map(|a| PALETTE[a].0)
        } else {
            None
        };
        Ok(match (self.mode, class, attribute) {
            (_, None, None) => "a photo".into(),
            (CaptionMode::Salient, Some(c), _) | (CaptionMode::Full, Some(c), None) => format!("a photo of a {c}"),
            (_, None, Some(a)) => format!("a photo of a {a} background"),
            (CaptionMode::Full, Some(c), Some(a)) => format!("a photo of a {c} on a {a} background"),
        })
    }

    fn version(&self) -> String {
        format!("synthetic-captioner/{:?}/{}", self.mode, self.config.image_size).to_lowercase()
    }
}
