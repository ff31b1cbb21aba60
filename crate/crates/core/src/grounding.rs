//! Explanation heatmaps and visual grounding.
//!
//! A GradCAM heatmap weights each last-layer feature map by the spatial mean
//! of its gradient, keeps the positive part of the weighted sum and min-max
//! normalizes it to `[0, 1]`. Grounding an image keeps the pixels whose
//! (upsampled) heatmap value reaches `tau` and fills the rest.

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::HeatmapStore;
use crate::model::{
    argmax, check_tau, BinaryMask, CamMethod, FillMode, GroundingConfig, Heatmap, Image,
    ResizeMode,
};
use crate::providers::{Classifier, Explanation};

/// Combines feature maps and gradients (`F x H' x W'`) into a heatmap.
///
/// A constant raw map (including all-zero) normalizes to all zeros.
pub fn combine_gradcam(feature_maps: &Array3<f64>, gradients: &Array3<f64>) -> Result<Heatmap> {
    if feature_maps.dim() != gradients.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature maps {:?} vs gradients {:?}",
            feature_maps.dim(),
            gradients.dim()
        )));
    }
    if feature_maps.iter().chain(gradients.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradcam input".into()));
    }
    let (f, h, w) = feature_maps.dim();
    if f == 0 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch("empty feature maps".into()));
    }
    let weights = gradients
        .mean_axis(Axis(2))
        .and_then(|m| m.mean_axis(Axis(1)))
        .expect("non-empty axes");

    let mut raw = Array2::<f64>::zeros((h, w));
    for (fm, &wf) in feature_maps.outer_iter().zip(weights.iter()) {
        raw.scaled_add(wf, &fm);
    }
    raw.mapv_inplace(|v| v.max(0.0));
    Heatmap::new(min_max_normalize(raw), (h, w))
}

fn min_max_normalize(mut raw: Array2<f64>) -> Array2<f64> {
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        let range = max - min;
        raw.mapv_inplace(|v| ((v - min) / range).clamp(0.0, 1.0));
    } else {
        raw.fill(0.0);
    }
    raw
}

/// `mask[p] = heatmap[p] >= tau`.
pub fn threshold_mask(heatmap: &Heatmap, tau: f64) -> Result<BinaryMask> {
    check_tau(tau)?;
    Ok(BinaryMask::new(heatmap.values().mapv(|v| v >= tau)))
}

/// Resamples a heatmap to `target` (rows, cols). Bilinear sampling aligns the
/// corner pixels of source and target grids.
pub fn resize_heatmap(heatmap: &Heatmap, target: (usize, usize), mode: ResizeMode) -> Result<Heatmap> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::invalid(format!("degenerate resize target {th}x{tw}")));
    }
    let src = heatmap.values();
    let (sh, sw) = src.dim();
    if (sh, sw) == target {
        return Ok(heatmap.clone());
    }
    let coord = |i: usize, from: usize, to: usize| -> f64 {
        if to == 1 {
            (from - 1) as f64 / 2.0
        } else {
            i as f64 * (from - 1) as f64 / (to - 1) as f64
        }
    };
    let out = Array2::from_shape_fn(target, |(y, x)| {
        let sy = coord(y, sh, th);
        let sx = coord(x, sw, tw);
        match mode {
            ResizeMode::Nearest => src[[sy.round() as usize, sx.round() as usize]],
            ResizeMode::Bilinear => {
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(sh - 1);
                let x1 = (x0 + 1).min(sw - 1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
                let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
                (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
            }
        }
    });
    Heatmap::new(out, heatmap.source_size())
}

/// Keeps image pixels where `heatmap >= tau`; other pixels become zero in
/// every channel.
pub fn apply_visual_grounding(image: &Image, heatmap: &Heatmap, tau: f64) -> Result<Image> {
    apply_visual_grounding_with(image, heatmap, tau, FillMode::Zero)
}

pub fn apply_visual_grounding_with(
    image: &Image,
    heatmap: &Heatmap,
    tau: f64,
    fill: FillMode,
) -> Result<Image> {
    check_tau(tau)?;
    let (h, w, c) = image.dim();
    if heatmap.shape() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "heatmap {:?} for image {h}x{w}",
            heatmap.shape()
        )));
    }
    let fill_values: Vec<f64> = match fill {
        FillMode::Zero => vec![0.0; c],
        FillMode::Mean => (0..c)
            .map(|ch| image.index_axis(Axis(2), ch).mean().unwrap_or(0.0))
            .collect(),
    };
    let hv = heatmap.values();
    Ok(Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        if hv[[y, x]] >= tau {
            image[[y, x, ch]]
        } else {
            fill_values[ch]
        }
    }))
}

/// Resizes a heatmap to the image when needed, then grounds the image.
pub fn ground_image(image: &Image, heatmap: &Heatmap, config: &GroundingConfig) -> Result<(Image, Heatmap)> {
    let (h, w, _) = image.dim();
    let resized = resize_heatmap(heatmap, (h, w), config.resize)?;
    let grounded = apply_visual_grounding_with(image, &resized, config.tau, config.fill)?;
    Ok((grounded, resized))
}

/// Turns a classifier explanation into an image-resolution heatmap.
pub fn explanation_heatmap(explanation: Explanation, image_size: (usize, usize), resize: ResizeMode) -> Result<Heatmap> {
    let coarse = match explanation {
        Explanation::Gradients {
            feature_maps,
            gradients,
        } => combine_gradcam(&feature_maps, &gradients)?,
        Explanation::Heatmap(h) => h,
    };
    let resized = resize_heatmap(&coarse, image_size, resize)?;
    Heatmap::new(resized.into_values(), image_size)
}

/// Where heatmaps come from.
#[derive(Clone, Copy)]
pub enum HeatmapSource<'a> {
    /// Explain each image's predicted class with the classifier.
    Classifier(&'a dyn Classifier),
    /// Provider-direct heatmaps computed elsewhere, keyed by sample id.
    Store(&'a HeatmapStore),
}

impl HeatmapSource<'_> {
    pub fn describe(&self) -> String {
        match self {
            HeatmapSource::Classifier(c) => format!("classifier:{}", c.version()),
            HeatmapSource::Store(s) => format!("store:{}", s.len()),
        }
    }

    pub fn heatmap_for(&self, id: &str, image: &Image, config: &GroundingConfig) -> Result<Heatmap> {
        let (h, w, _) = image.dim();
        match self {
            HeatmapSource::Classifier(clf) => {
                let target = argmax(&clf.predict_proba(image)?);
                let explanation = clf.explain(image, target, config.cam_method)?;
                explanation_heatmap(explanation, (h, w), config.resize)
            }
            HeatmapSource::Store(store) => {
                let hm = store
                    .get(id)
                    .ok_or_else(|| Error::Provider(format!("no heatmap for sample `{id}`")))?;
                let resized = resize_heatmap(hm, (h, w), config.resize)?;
                Heatmap::new(resized.into_values(), (h, w))
            }
        }
    }
}

/// Provenance of a grounding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingProvenance {
    pub enabled: bool,
    pub tau: f64,
    pub cam_method: CamMethod,
    pub fill: FillMode,
    pub resize: ResizeMode,
    pub heatmap_source: String,
    /// How the grounding function is read: the image masked by the
    /// thresholded heatmap, thresholded after upsampling.
    pub interpretation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingFailure {
    pub sample_id: String,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct GroundingOutput {
    /// One image per input sample, in input order. Flagged samples keep their
    /// original image.
    pub images: Vec<Image>,
    /// Image-resolution heatmaps; empty when grounding is disabled.
    pub heatmaps: HeatmapStore,
    pub failures: Vec<GroundingFailure>,
    pub provenance: GroundingProvenance,
}

pub const GROUNDING_INTERPRETATION: &str = "masked-image: x * 1{heatmap >= tau}, heatmap upsampled before thresholding";

/// Computes a heatmap and grounded image for every sample. A sample whose
/// heatmap cannot be produced is flagged and keeps its original image.
pub fn ground_dataset(
    ids: &[&str],
    images: &[&Image],
    source: HeatmapSource<'_>,
    config: &GroundingConfig,
) -> Result<GroundingOutput> {
    if ids.len() != images.len() {
        return Err(Error::invalid("one id per image required"));
    }
    check_tau(config.tau)?;
    let provenance = GroundingProvenance {
        enabled: config.enabled,
        tau: config.tau,
        cam_method: config.cam_method,
        fill: config.fill,
        resize: config.resize,
        heatmap_source: source.describe(),
        interpretation: GROUNDING_INTERPRETATION.into(),
    };
    if !config.enabled {
        return Ok(GroundingOutput {
            images: images.iter().map(|&im| im.clone()).collect(),
            heatmaps: HeatmapStore::new(),
            failures: Vec::new(),
            provenance,
        });
    }
    let results: Vec<Result<(Image, Heatmap)>> = ids
        .par_iter()
        .zip(images.par_iter())
        .map(|(id, image)| {
            let hm = source.heatmap_for(id, image, config)?;
            ground_image(image, &hm, config)
        })
        .collect();

    let mut out_images = Vec::with_capacity(images.len());
    let mut heatmaps = HeatmapStore::new();
    let mut failures = Vec::new();
    for ((id, image), result) in ids.iter().zip(images).zip(results) {
        match result {
            Ok((grounded, hm)) => {
                out_images.push(grounded);
                heatmaps.insert(*id, hm);
            }
            Err(e) => {
                log::warn!("grounding failed for `{id}`: {e}");
                failures.push(GroundingFailure {
                    sample_id: id.to_string(),
                    message: e.to_string(),
                });
                out_images.push((*image).clone());
            }
        }
    }
    Ok(GroundingOutput {
        images: out_images,
        heatmaps,
        failures,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn hm(values: Array2<f64>) -> Heatmap {
        let s = values.dim();
        Heatmap::new(values, s).unwrap()
    }

    #[test]
    fn single_map_unit_gradients() {
        let a = array![[[1.0, 2.0], [3.0, 4.0]]];
        let g = Array3::ones((1, 2, 2));
        let h = combine_gradcam(&a, &g).unwrap();
        let expected = array![[0.0, 1.0 / 3.0], [2.0 / 3.0, 1.0]];
        for (x, y) in h.values().iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradients_give_zero_heatmap() {
        let a = array![[[1.0, 2.0], [3.0, 4.0]]];
        let h = combine_gradcam(&a, &Array3::zeros((1, 2, 2))).unwrap();
        assert!(h.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_activations_are_clipped() {
        let a = array![[[-1.0, -2.0], [-3.0, -4.0]]];
        let h = combine_gradcam(&a, &Array3::ones((1, 2, 2))).unwrap();
        assert!(h.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn combine_rejects_bad_input() {
        let a = Array3::<f64>::zeros((2, 2, 2));
        assert!(matches!(
            combine_gradcam(&a, &Array3::zeros((1, 2, 2))),
            Err(Error::ShapeMismatch(_))
        ));
        let mut g = Array3::<f64>::zeros((2, 2, 2));
        g[[0, 0, 0]] = f64::INFINITY;
        assert!(matches!(combine_gradcam(&a, &g), Err(Error::NonFinite(_))));
    }

    #[test]
    fn threshold_examples() {
        let h = hm(array![[0.8, 0.6], [0.71, 0.0]]);
        let m = threshold_mask(&h, 0.7).unwrap();
        assert_eq!(m.values(), &array![[true, false], [true, false]]);
        assert_eq!(threshold_mask(&h, 0.0).unwrap().count(), 4);
        assert!(threshold_mask(&h, 1.5).is_err());
        assert!(threshold_mask(&h, -0.5).is_err());
    }

    #[test]
    fn resize_examples() {
        let h = hm(array![[0.0, 1.0], [0.0, 1.0]]);
        let r = resize_heatmap(&h, (2, 4), ResizeMode::Bilinear).unwrap();
        for row in r.values().rows() {
            for (x, y) in row.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_eq!(resize_heatmap(&h, (2, 2), ResizeMode::Bilinear).unwrap(), h);
        let one = hm(array![[0.37]]);
        let r = resize_heatmap(&one, (3, 5), ResizeMode::Bilinear).unwrap();
        assert!(r.values().iter().all(|&v| v == 0.37));
        assert!(resize_heatmap(&h, (0, 3), ResizeMode::Bilinear).is_err());
        let n = resize_heatmap(&h, (2, 4), ResizeMode::Nearest).unwrap();
        assert_eq!(n.values().row(0).to_vec(), vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn grounding_examples() {
        let img = Array3::from_elem((2, 2, 3), 0.5);
        let h = hm(array![[0.9, 0.1], [0.9, 0.1]]);
        let g = apply_visual_grounding(&img, &h, 0.7).unwrap();
        for y in 0..2 {
            for c in 0..3 {
                assert_eq!(g[[y, 0, c]], 0.5);
                assert_eq!(g[[y, 1, c]], 0.0);
            }
        }
        assert_eq!(apply_visual_grounding(&img, &h, 0.0).unwrap(), img);
        let low = hm(Array2::from_elem((2, 2), 0.2));
        assert!(apply_visual_grounding(&img, &low, 0.5).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(
            apply_visual_grounding(&img, &hm(Array2::zeros((3, 2))), 0.5),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mean_fill_uses_channel_means() {
        let img = Array3::from_shape_fn((1, 2, 2), |(_, x, c)| (x + c) as f64 * 0.25);
        let h = hm(array![[1.0, 0.0]]);
        let g = apply_visual_grounding_with(&img, &h, 0.5, FillMode::Mean).unwrap();
        assert_eq!(g[[0, 1, 0]], 0.125);
        assert_eq!(g[[0, 1, 1]], 0.375);
    }

    struct FixedExplainer;

    impl Classifier for FixedExplainer {
        fn num_classes(&self) -> usize {
            2
        }
        fn predict_proba(&self, _: &Image) -> Result<Vec<f64>> {
            Ok(vec![0.3, 0.7])
        }
        fn explain(&self, image: &Image, target: usize, _: CamMethod) -> Result<Explanation> {
            assert_eq!(target, 1);
            if image[[0, 0, 0]] < 0.0 {
                return Err(Error::Provider("boom".into()));
            }
            // Gradients concentrate on the left half of a 2x2 feature grid.
            let feature_maps = Array3::ones((1, 2, 2));
            let mut gradients = Array3::zeros((1, 2, 2));
            gradients[[0, 0, 0]] = 1.0;
            let mut fm = feature_maps.clone();
            fm[[0, 0, 1]] = 0.0;
            fm[[0, 1, 1]] = 0.0;
            Ok(Explanation::Gradients { feature_maps: fm, gradients })
        }
        fn version(&self) -> String {
            "fixed".into()
        }
    }

    #[test]
    fn ground_dataset_with_known_explanations() {
        let a = Array3::from_elem((4, 4, 3), 0.6);
        let mut bad = a.clone();
        bad[[0, 0, 0]] = -1.0;
        let cfg = GroundingConfig::enabled(0.7).unwrap();
        let clf = FixedExplainer;
        let out = ground_dataset(&["a", "bad"], &[&a, &bad], HeatmapSource::Classifier(&clf), &cfg).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].sample_id, "bad");
        assert_eq!(out.images[1], bad);
        let g = &out.images[0];
        // Left half of the 2x2 grid upsampled to 4x4 with corner alignment:
        // columns 0 and 1 have values 1 and 2/3 -> only column 0 survives tau = 0.7.
        for y in 0..4 {
            assert_eq!(g[[y, 0, 0]], 0.6);
            for x in 1..4 {
                assert_eq!(g[[y, x, 0]], 0.0);
            }
        }
        assert_eq!(out.heatmaps.len(), 1);

        let off = ground_dataset(&["a"], &[&a], HeatmapSource::Classifier(&clf), &GroundingConfig::disabled()).unwrap();
        assert_eq!(off.images[0], a);
        assert!(off.heatmaps.is_empty());
    }
}
