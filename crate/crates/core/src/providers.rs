//! Pluggable learned components and their deterministic synthetic stand-ins.
//!
//! Real vision backends plug in by implementing [`Classifier`],
//! [`EmbeddingProvider`], [`CaptionProvider`] or [`ZeroShotProvider`]. The
//! implementations in this module need nothing beyond the standard library:
//! region statistics act as image features, and a multinomial logistic
//! regression acts as the classifier under audit.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1};
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CamMethod, Heatmap, Image};

/// What a classifier returns when asked to explain a prediction.
#[derive(Debug, Clone, PartialEq)]
pub enum Explanation {
    /// Last-layer feature maps and the gradient of the target score with
    /// respect to them, both `F x H' x W'`.
    Gradients {
        feature_maps: Array3<f64>,
        gradients: Array3<f64>,
    },
    /// A finished heatmap from a gradient-free or provider-internal method.
    Heatmap(Heatmap),
}

/// A trained image classifier `f_θ`.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Class probabilities for one image; a simplex vector.
    fn predict_proba(&self, image: &Image) -> Result<Vec<f64>>;

    fn explain(&self, image: &Image, target: usize, method: CamMethod) -> Result<Explanation>;

    /// Identifies the trained handle in provenance records.
    fn version(&self) -> String;
}

/// Cross-modal encoder producing unit-norm vectors for images and text.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;

    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;

    fn embed_images(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|im| self.embed_image(im)).collect()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }

    fn version(&self) -> String;
}

pub trait CaptionProvider: Send + Sync {
    fn caption(&self, image: &Image) -> Result<String>;

    fn captions(&self, images: &[Image]) -> Result<Vec<String>> {
        images.iter().map(|im| self.caption(im)).collect()
    }

    fn version(&self) -> String;
}

/// Language-prompted classifier: scores an image against free-text prompts.
pub trait ZeroShotProvider: Send + Sync {
    /// One probability per prompt, summing to one.
    fn classify(&self, image: &Image, prompts: &[String]) -> Result<Vec<f64>>;

    fn version(&self) -> String;
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn normalize(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroEmbedding("vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// ---------------------------------------------------------------------------
// Region statistics
// ---------------------------------------------------------------------------

/// Per-cell image statistics on a `grid x grid` partition of the image:
/// the mean of every channel and, when `texture` is set, the mean absolute
/// horizontal and vertical finite differences (averaged over channels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecipe {
    pub grid: usize,
    pub texture: bool,
}

impl Default for FeatureRecipe {
    fn default() -> Self {
        FeatureRecipe {
            grid: 4,
            texture: true,
        }
    }
}

fn cell_bounds(len: usize, grid: usize, i: usize) -> (usize, usize) {
    (i * len / grid, (i + 1) * len / grid)
}

impl FeatureRecipe {
    pub fn num_maps(&self, channels: usize) -> usize {
        channels + if self.texture { 2 } else { 0 }
    }

    pub fn dim(&self, channels: usize) -> usize {
        self.num_maps(channels) * self.grid * self.grid
    }

    /// Statistic maps, `F x grid x grid`.
    pub fn maps(&self, image: &Image) -> Result<Array3<f64>> {
        let (h, w, c) = image.dim();
        if self.grid == 0 || h < self.grid || w < self.grid {
            return Err(Error::invalid(format!(
                "image {h}x{w} too small for a {0}x{0} grid",
                self.grid
            )));
        }
        let g = self.grid;
        let mut out = Array3::zeros((self.num_maps(c), g, g));
        for gi in 0..g {
            let (y0, y1) = cell_bounds(h, g, gi);
            for gj in 0..g {
                let (x0, x1) = cell_bounds(w, g, gj);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for ch in 0..c {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            s += image[[y, x, ch]];
                        }
                    }
                    out[[ch, gi, gj]] = s / n;
                }
                if self.texture {
                    let (mut sx, mut nx, mut sy, mut ny) = (0.0, 0usize, 0.0, 0usize);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            if x + 1 < w {
                                for ch in 0..c {
                                    sx += (image[[y, x + 1, ch]] - image[[y, x, ch]]).abs();
                                }
                                nx += c;
                            }
                            if y + 1 < h {
                                for ch in 0..c {
                                    sy += (image[[y + 1, x, ch]] - image[[y, x, ch]]).abs();
                                }
                                ny += c;
                            }
                        }
                    }
                    out[[c, gi, gj]] = if nx > 0 { sx / nx as f64 } else { 0.0 };
                    out[[c + 1, gi, gj]] = if ny > 0 { sy / ny as f64 } else { 0.0 };
                }
            }
        }
        Ok(out)
    }

    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.maps(image)?.into_iter().collect())
    }
}

// ---------------------------------------------------------------------------
// Synthetic embedder
// ---------------------------------------------------------------------------

/// Words ignored when embedding text: prompt boilerplate.
pub const DEFAULT_FILLER_WORDS: &[&str] = &[
    "a", "an", "the", "photo", "of", "on", "in", "with", "and", "image", "picture", "background",
];

/// Embeds images as their normalized region statistics (plus a constant
/// offset component so that blank images still have a direction). Text is
/// embedded through a fixed vocabulary of anchor vectors; a phrase is the
/// normalized sum of its words' anchors, ignoring filler words.
#[derive(Debug, Clone)]
pub struct SyntheticEmbedder {
    recipe: FeatureRecipe,
    channels: usize,
    offset: f64,
    vocabulary: BTreeMap<String, Vec<f64>>,
    filler: BTreeSet<String>,
}

impl SyntheticEmbedder {
    pub const DEFAULT_OFFSET: f64 = 0.05;

    pub fn new(recipe: FeatureRecipe, channels: usize, offset: f64) -> Self {
        SyntheticEmbedder {
            recipe,
            channels,
            offset,
            vocabulary: BTreeMap::new(),
            filler: DEFAULT_FILLER_WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Adds a word whose anchor is the embedding of a prototype image.
    pub fn with_anchor_image(mut self, word: &str, prototype: &Image) -> Result<Self> {
        let anchor = self.embed_image(prototype)?;
        self.vocabulary.insert(word.to_lowercase(), anchor);
        Ok(self)
    }

    pub fn with_anchor_vector(mut self, word: &str, mut anchor: Vec<f64>) -> Result<Self> {
        if anchor.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "anchor of length {} for embedding dim {}",
                anchor.len(),
                self.dim()
            )));
        }
        normalize(&mut anchor).map_err(|_| Error::ZeroEmbedding(word.into()))?;
        self.vocabulary.insert(word.to_lowercase(), anchor);
        Ok(self)
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.vocabulary.keys().map(String::as_str)
    }

    pub fn recipe(&self) -> FeatureRecipe {
        self.recipe
    }
}

impl EmbeddingProvider for SyntheticEmbedder {
    fn dim(&self) -> usize {
        self.recipe.dim(self.channels) + 1
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
        if image.dim().2 != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "embedder expects {} channels, got {}",
                self.channels,
                image.dim().2
            )));
        }
        let mut v = self.recipe.features(image)?;
        v.push(self.offset);
        normalize(&mut v)?;
        Ok(v)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim()];
        let mut any = false;
        for token in tokenize(text) {
            if self.filler.contains(&token) {
                continue;
            }
            let anchor = self
                .vocabulary
                .get(&token)
                .ok_or_else(|| Error::UnknownVocabulary(token.clone()))?;
            acc.iter_mut().zip(anchor).for_each(|(a, b)| *a += b);
            any = true;
        }
        if !any {
            return Err(Error::ZeroEmbedding(text.into()));
        }
        normalize(&mut acc).map_err(|_| Error::ZeroEmbedding(text.into()))?;
        Ok(acc)
    }

    fn version(&self) -> String {
        format!(
            "synthetic-embedder/grid{}/texture{}/offset{}",
            self.recipe.grid, self.recipe.texture, self.offset
        )
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '+' || c == '\''))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Zero-shot classifier built from an embedding provider:
/// `softmax(temperature * cos(image, prompt))` over the prompts.
#[derive(Debug, Clone)]
pub struct EmbeddingZeroShot<E> {
    embedder: E,
    temperature: f64,
}

impl<E: EmbeddingProvider> EmbeddingZeroShot<E> {
    /// Logit scale applied to cosine similarities.
    pub const DEFAULT_TEMPERATURE: f64 = 100.0;

    pub fn new(embedder: E, temperature: f64) -> Self {
        EmbeddingZeroShot {
            embedder,
            temperature,
        }
    }
}

impl<E: EmbeddingProvider> ZeroShotProvider for EmbeddingZeroShot<E> {
    fn classify(&self, image: &Image, prompts: &[String]) -> Result<Vec<f64>> {
        if prompts.is_empty() {
            return Err(Error::EmptySet("prompt list".into()));
        }
        let img = self.embedder.embed_image(image)?;
        let logits = prompts
            .iter()
            .map(|p| Ok(self.temperature * cosine(&img, &self.embedder.embed_text(p)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(softmax(&logits))
    }

    fn version(&self) -> String {
        format!("embedding-zero-shot/t{}/{}", self.temperature, self.embedder.version())
    }
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

/// Multinomial logistic regression parameters: `logits = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Array2<f64>,
    pub bias: Vec<f64>,
}

impl LogisticModel {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        LogisticModel {
            weights: Array2::zeros((num_classes, dim)),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let mut out = self.weights.dot(&x).to_vec();
        out.iter_mut().zip(&self.bias).for_each(|(l, b)| *l += b);
        out
    }

    pub fn predict_proba(&self, x: ArrayView1<f64>) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Weighted objective `1/N Σ w_i ℓ_i + λ/2 ||W||²` and its gradient with
    /// respect to `(W, b)`. `rows` selects the samples entering the average.
    pub fn objective_and_gradient(
        &self,
        features: &Array2<f64>,
        labels: &[usize],
        weights: &[f64],
        rows: &[usize],
        weight_decay: f64,
    ) -> (f64, Array2<f64>, Vec<f64>) {
        let k = self.num_classes();
        let mut grad_w = Array2::zeros(self.weights.raw_dim());
        let mut grad_b = vec![0.0; k];
        let mut loss = 0.0;
        let n = rows.len() as f64;
        for &i in rows {
            let x = features.row(i);
            let p = self.predict_proba(x);
            let y = labels[i];
            let w = weights[i];
            loss += w * -(p[y].max(f64::MIN_POSITIVE)).ln();
            for c in 0..k {
                let delta = w * (p[c] - if c == y { 1.0 } else { 0.0 }) / n;
                grad_b[c] += delta;
                grad_w.row_mut(c).scaled_add(delta, &x);
            }
        }
        loss /= n;
        loss += 0.5 * weight_decay * self.weights.iter().map(|v| v * v).sum::<f64>();
        grad_w.scaled_add(weight_decay, &self.weights);
        (loss, grad_w, grad_b)
    }

    /// Per-sample cross-entropy losses.
    pub fn losses(&self, features: &Array2<f64>, labels: &[usize], rows: &[usize]) -> Vec<f64> {
        rows.iter()
            .map(|&i| {
                let p = self.predict_proba(features.row(i));
                -(p[labels[i]].max(f64::MIN_POSITIVE)).ln()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// `None` trains full-batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Standard deviation of the Gaussian weight initialization.
    #[serde(default)]
    pub init_scale: f64,
    /// Observer cadence, in steps.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_eval_every() -> usize {
    50
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 0.5,
            steps: 600,
            weight_decay: 1e-2,
            seed: 0,
            batch_size: None,
            init_scale: 0.01,
            eval_every: 50,
        }
    }
}

/// Training objective.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Weighted average cross-entropy. `None` means unit weights.
    Weighted { sample_weights: Option<&'a [f64]> },
    /// Online group-robust training: per step, `q_g ← q_g exp(η L_g)`,
    /// renormalize, then descend on `Σ_g q_g L_g`.
    GroupDro {
        groups: &'a [usize],
        num_groups: usize,
        eta: f64,
    },
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: LogisticModel,
    /// Objective value per step.
    pub loss_trace: Vec<f64>,
    /// Group weights after every step (group-robust objective only).
    pub group_weight_trace: Vec<Vec<f64>>,
    /// Number of steps in which some group had no sample in the batch.
    pub absent_group_steps: usize,
}

/// Group-robust exponentiated weight update followed by renormalization.
pub fn exponentiated_update(q: &[f64], group_losses: &[f64], eta: f64) -> Vec<f64> {
    let mut out: Vec<f64> = q
        .iter()
        .zip(group_losses)
        .map(|(&qg, &l)| qg * (eta * l).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Gradient-descent trainer for [`LogisticModel`].
#[derive(Debug, Clone)]
pub struct LogisticTrainer {
    pub config: TrainerConfig,
}

impl LogisticTrainer {
    pub fn new(config: TrainerConfig) -> Self {
        LogisticTrainer { config }
    }

    pub fn init_model(&self, num_classes: usize, dim: usize) -> LogisticModel {
        let mut model = LogisticModel::zeros(num_classes, dim);
        if self.config.init_scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            let normal = Normal::new(0.0, self.config.init_scale).expect("positive scale");
            model.weights.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
        }
        model
    }

    /// Trains on `features` (one row per sample). `observer` is called with
    /// the step count every `eval_every` steps and after the final step.
    pub fn fit(
        &self,
        features: &Array2<f64>,
        labels: &[usize],
        num_classes: usize,
        objective: Objective<'_>,
        mut observer: Option<&mut dyn FnMut(usize, &LogisticModel)>,
    ) -> Result<FitOutput> {
        let n = features.nrows();
        if n == 0 || labels.len() != n {
            return Err(Error::invalid(format!(
                "{} feature rows for {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {y} >= {num_classes} classes")));
        }
        let cfg = &self.config;
        let mut model = self.init_model(num_classes, features.ncols());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
        let mut order: Vec<usize> = (0..n).collect();
        let batch = cfg.batch_size.unwrap_or(n).clamp(1, n);
        let mut cursor = n;

        let ones;
        let base_weights: &[f64] = match objective {
            Objective::Weighted {
                sample_weights: Some(w),
            } => {
                if w.len() != n || w.iter().any(|&v| !v.is_finite() || v < 0.0) {
                    return Err(Error::invalid("sample weights must be finite, nonnegative, one per sample"));
                }
                w
            }
            _ => {
                ones = vec![1.0; n];
                &ones
            }
        };
        let mut q = match objective {
            Objective::GroupDro {
                groups,
                num_groups,
                eta,
            } => {
                if groups.len() != n || num_groups == 0 || groups.iter().any(|&g| g >= num_groups) {
                    return Err(Error::invalid("every sample needs a group id below num_groups"));
                }
                if !(eta > 0.0) {
                    return Err(Error::invalid("group step size must be positive"));
                }
                vec![1.0 / num_groups as f64; num_groups]
            }
            Objective::Weighted { .. } => Vec::new(),
        };

        let mut out = FitOutput {
            model: model.clone(),
            loss_trace: Vec::with_capacity(cfg.steps),
            group_weight_trace: Vec::new(),
            absent_group_steps: 0,
        };
        let mut dro_weights = vec![0.0; n];
        for step in 1..=cfg.steps {
            let rows: Vec<usize> = if batch == n {
                (0..n).collect()
            } else {
                if cursor + batch > n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += batch;
                order[cursor - batch..cursor].to_vec()
            };

            let weights: &[f64] = match objective {
                Objective::Weighted { .. } => base_weights,
                Objective::GroupDro {
                    groups,
                    num_groups,
                    eta,
                } => {
                    let losses = model.losses(features, labels, &rows);
                    let mut sums = vec![0.0; num_groups];
                    let mut counts = vec![0usize; num_groups];
                    for (&i, l) in rows.iter().zip(&losses) {
                        sums[groups[i]] += l;
                        counts[groups[i]] += 1;
                    }
                    if counts.iter().any(|&c| c == 0) {
                        out.absent_group_steps += 1;
                        log::debug!("step {step}: group absent from batch, loss taken as 0");
                    }
                    let group_losses: Vec<f64> = sums
                        .iter()
                        .zip(&counts)
                        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                        .collect();
                    q = exponentiated_update(&q, &group_losses, eta);
                    if q.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Divergence {
                            step,
                            message: "group weights became non-finite".into(),
                        });
                    }
                    out.group_weight_trace.push(q.clone());
                    // Σ_g q_g (1/n_g) Σ_{i∈g} ℓ_i written as a weighted mean over the batch.
                    let m = rows.len() as f64;
                    for &i in &rows {
                        let g = groups[i];
                        dro_weights[i] = q[g] * m / counts[g] as f64;
                    }
                    &dro_weights
                }
            };

            let (loss, grad_w, grad_b) =
                model.objective_and_gradient(features, labels, weights, &rows, cfg.weight_decay);
            if !loss.is_finite() || grad_w.iter().chain(&grad_b).any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    message: format!("objective is {loss} or its gradient is not finite"),
                });
            }
            out.loss_trace.push(loss);
            model.weights.scaled_add(-cfg.learning_rate, &grad_w);
            model
                .bias
                .iter_mut()
                .zip(&grad_b)
                .for_each(|(b, g)| *b -= cfg.learning_rate * g);

            if let Some(obs) = observer.as_deref_mut() {
                if step % cfg.eval_every.max(1) == 0 || step == cfg.steps {
                    obs(step, &model);
                }
            }
        }
        out.model = model;
        Ok(out)
    }
}

/// A logistic model over region statistics of the image: the classifier
/// under audit in desk-scale runs.
///
/// Its GradCAM explanation is exact: the statistic maps are the last-layer
/// feature maps and, the score being linear in them, the gradient of the
/// target logit is the matching slice of the weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledLogisticClassifier {
    pub recipe: FeatureRecipe,
    pub channels: usize,
    pub model: LogisticModel,
}

pub const MODEL_MAGIC: &[u8; 4] = b"GAMD";
pub const MODEL_VERSION: u32 = 1;

impl PooledLogisticClassifier {
    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        if image.dim().2 != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "classifier expects {} channels, got {}",
                self.channels,
                image.dim().2
            )));
        }
        self.recipe.features(image)
    }

    /// Feature matrix for a set of images.
    pub fn feature_matrix(recipe: FeatureRecipe, images: &[&Image]) -> Result<Array2<f64>> {
        let channels = images.first().map(|im| im.dim().2).unwrap_or(0);
        let d = recipe.dim(channels);
        let mut out = Array2::zeros((images.len(), d));
        for (i, im) in images.iter().enumerate() {
            let f = recipe.features(im)?;
            if f.len() != d {
                return Err(Error::ShapeMismatch("images with differing channel counts".into()));
            }
            out.row_mut(i).assign(&ArrayView1::from(&f));
        }
        Ok(out)
    }

    /// Binary model file:
    ///
    /// ```text
    /// magic b"GAMD" | version u32 | grid u32 | texture u8 | channels u32
    /// | classes u32 | dim u32 | weights f64 x classes*dim (row-major) | bias f64 x classes
    /// ```
    /// little-endian throughout.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.recipe.grid as u32).to_le_bytes())?;
        w.write_all(&[self.recipe.texture as u8])?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        w.write_all(&(self.model.num_classes() as u32).to_le_bytes())?;
        w.write_all(&(self.model.dim() as u32).to_le_bytes())?;
        for &v in self.model.weights.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in &self.model.bias {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let err = |m: &str| Error::Container(format!("model file: {m}"));
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        let mut u32_ = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut b4).map_err(|_| err("truncated"))?;
            Ok(u32::from_le_bytes(b4))
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| err("truncated"))?;
        if &magic != MODEL_MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32_(&mut r)?;
        if version != MODEL_VERSION {
            return Err(err(&format!("unsupported version {version}")));
        }
        let grid = u32_(&mut r)? as usize;
        let mut t = [0u8; 1];
        r.read_exact(&mut t).map_err(|_| err("truncated"))?;
        let channels = u32_(&mut r)? as usize;
        let k = u32_(&mut r)? as usize;
        let d = u32_(&mut r)? as usize;
        let recipe = FeatureRecipe {
            grid,
            texture: t[0] != 0,
        };
        if recipe.dim(channels) != d {
            return Err(err("dimension does not match recipe"));
        }
        let mut read_f64 = |r: &mut dyn Read| -> Result<f64> {
            r.read_exact(&mut b8).map_err(|_| err("truncated"))?;
            Ok(f64::from_le_bytes(b8))
        };
        let mut weights = Vec::with_capacity(k * d);
        for _ in 0..k * d {
            weights.push(read_f64(&mut r)?);
        }
        let mut bias = Vec::with_capacity(k);
        for _ in 0..k {
            bias.push(read_f64(&mut r)?);
        }
        Ok(PooledLogisticClassifier {
            recipe,
            channels,
            model: LogisticModel {
                weights: Array2::from_shape_vec((k, d), weights).map_err(|_| err("shape"))?,
                bias,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

impl Classifier for PooledLogisticClassifier {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn predict_proba(&self, image: &Image) -> Result<Vec<f64>> {
        let f = self.features(image)?;
        Ok(self.model.predict_proba(ArrayView1::from(&f)))
    }

    fn explain(&self, image: &Image, target: usize, method: CamMethod) -> Result<Explanation> {
        if method != CamMethod::GradCam {
            return Err(Error::Unsupported(format!(
                "{method} heatmaps are not produced by the logistic classifier"
            )));
        }
        if target >= self.num_classes() {
            return Err(Error::invalid(format!("target class {target} out of range")));
        }
        if image.dim().2 != self.channels {
            return Err(Error::ShapeMismatch("channel count".into()));
        }
        let feature_maps = self.recipe.maps(image)?;
        let gradients = self
            .model
            .weights
            .row(target)
            .to_owned()
            .into_shape_with_order(feature_maps.raw_dim())
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(Explanation::Gradients {
            feature_maps,
            gradients,
        })
    }

    fn version(&self) -> String {
        // Content hash so that provenance distinguishes retrained handles.
        let mut h: u64 = 0xcbf29ce484222325;
        for v in self.model.weights.iter().chain(self.model.bias.iter()) {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        format!("logistic/grid{}/{h:016x}", self.recipe.grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::Rng;

    fn blank(h: usize, w: usize, v: f64) -> Image {
        Array3::from_elem((h, w, 3), v)
    }

    #[test]
    fn identical_images_embed_identically() {
        let e = SyntheticEmbedder::new(FeatureRecipe { grid: 2, texture: true }, 3, 0.05);
        let img = Array3::from_shape_fn((4, 4, 3), |(y, x, c)| ((y + x + c) % 3) as f64 / 2.0);
        let a = e.embed_image(&img).unwrap();
        let b = e.embed_image(&img.clone()).unwrap();
        assert_eq!(a, b);
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn black_versus_white_cosine() {
        // 2x2 images, one cell, no texture: black -> (0,0,0,b), white -> (1,1,1,b).
        let b = 0.05;
        let e = SyntheticEmbedder::new(FeatureRecipe { grid: 1, texture: false }, 3, b);
        let black = e.embed_image(&blank(2, 2, 0.0)).unwrap();
        let white = e.embed_image(&blank(2, 2, 1.0)).unwrap();
        assert_eq!(black, vec![0.0, 0.0, 0.0, 1.0]);
        let expected = b / (3.0 + b * b).sqrt();
        assert!((cosine(&black, &white) - expected).abs() < 1e-12);
    }

    #[test]
    fn masked_image_embeds_foreground_statistics() {
        // 2x2 grid on a 4x4 image; the right half is zeroed.
        let e = SyntheticEmbedder::new(FeatureRecipe { grid: 2, texture: false }, 1, 0.05);
        let mut img = Array3::zeros((4, 4, 1));
        for y in 0..4 {
            for x in 0..2 {
                img[[y, x, 0]] = 0.2 + 0.1 * y as f64;
            }
        }
        // Cell means: top-left (0.2+0.3)/2, top-right 0, bottom-left (0.4+0.5)/2, bottom-right 0.
        let mut expected = vec![0.25, 0.0, 0.45, 0.0, 0.05];
        normalize(&mut expected).unwrap();
        let got = e.embed_image(&img).unwrap();
        for (g, x) in got.iter().zip(&expected) {
            assert!((g - x).abs() < 1e-12);
        }
    }

    #[test]
    fn text_embedding_vocabulary() {
        let e = SyntheticEmbedder::new(FeatureRecipe { grid: 1, texture: false }, 3, 0.05)
            .with_anchor_image("red", &Array3::from_shape_fn((2, 2, 3), |(_, _, c)| if c == 0 { 1.0 } else { 0.0 }))
            .unwrap();
        let red = e.embed_text("red").unwrap();
        assert_eq!(e.embed_text("a photo of a red").unwrap(), red);
        assert!(matches!(e.embed_text("green"), Err(Error::UnknownVocabulary(_))));
        assert!(matches!(e.embed_text("a photo of"), Err(Error::ZeroEmbedding(_))));
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-50.0..50.0)).collect();
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn toy_problem(seed: u64, n: usize, d: usize, k: usize) -> (Array2<f64>, Vec<usize>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let y = (0..n).map(|_| rng.random_range(0..k)).collect();
        let w = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        (x, y, w)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let (x, y, w) = toy_problem(seed, 12, 4, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let model = LogisticModel {
                weights: Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)),
                bias: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let rows: Vec<usize> = (0..12).collect();
            let lambda = 0.3;
            let (_, gw, gb) = model.objective_and_gradient(&x, &y, &w, &rows, lambda);
            let h = 1e-6;
            let f = |m: &LogisticModel| m.objective_and_gradient(&x, &y, &w, &rows, lambda).0;
            for c in 0..3 {
                for j in 0..4 {
                    let mut p = model.clone();
                    p.weights[[c, j]] += h;
                    let mut m = model.clone();
                    m.weights[[c, j]] -= h;
                    let fd = (f(&p) - f(&m)) / (2.0 * h);
                    let rel = (fd - gw[[c, j]]).abs() / fd.abs().max(gw[[c, j]].abs()).max(1e-8);
                    assert!(rel < 1e-5, "seed {seed} w[{c},{j}]: {fd} vs {}", gw[[c, j]]);
                }
                let mut p = model.clone();
                p.bias[c] += h;
                let mut m = model.clone();
                m.bias[c] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let rel = (fd - gb[c]).abs() / fd.abs().max(gb[c].abs()).max(1e-8);
                assert!(rel < 1e-5);
            }
        }
    }

    #[test]
    fn separable_data_is_fit_perfectly() {
        let x = array![[0.0, 1.0], [0.1, 0.9], [0.2, 1.2], [1.0, 0.0], [0.9, 0.2], [1.1, 0.1]];
        let y = vec![0, 0, 0, 1, 1, 1];
        let trainer = LogisticTrainer::new(TrainerConfig {
            learning_rate: 1.0,
            steps: 500,
            weight_decay: 0.0,
            ..TrainerConfig::default()
        });
        let out = trainer
            .fit(&x, &y, 2, Objective::Weighted { sample_weights: None }, None)
            .unwrap();
        for (i, &label) in y.iter().enumerate() {
            let p = out.model.predict_proba(x.row(i));
            assert_eq!(crate::model::argmax(&p), label);
        }
    }

    #[test]
    fn heavy_weight_decay_shrinks_toward_uniform() {
        let (x, y, _) = toy_problem(1, 40, 3, 2);
        let fit = |wd: f64| {
            LogisticTrainer::new(TrainerConfig {
                learning_rate: 0.1 / (1.0 + wd),
                steps: 400,
                weight_decay: wd,
                init_scale: 0.0,
                ..TrainerConfig::default()
            })
            .fit(&x, &y, 2, Objective::Weighted { sample_weights: None }, None)
            .unwrap()
            .model
        };
        let norm = |m: &LogisticModel| m.weights.iter().map(|v| v * v).sum::<f64>().sqrt();
        let small = fit(0.0);
        let large = fit(1e4);
        assert!(norm(&large) < 1e-3 * norm(&small).max(1e-3));
        let p = large.predict_proba(x.row(0));
        // Only the (unregularized) bias remains; it tracks the class balance.
        let frac1 = y.iter().filter(|&&v| v == 1).count() as f64 / 40.0;
        assert!((p[1] - frac1).abs() < 0.05);
    }

    #[test]
    fn constant_sample_weights_match_scaled_learning_rate() {
        let (x, y, _) = toy_problem(2, 30, 3, 3);
        let c = 4.0;
        let base = TrainerConfig {
            learning_rate: 0.4,
            steps: 200,
            weight_decay: 0.0,
            ..TrainerConfig::default()
        };
        let plain = LogisticTrainer::new(base.clone())
            .fit(&x, &y, 3, Objective::Weighted { sample_weights: None }, None)
            .unwrap();
        let w = vec![c; 30];
        let weighted = LogisticTrainer::new(TrainerConfig {
            learning_rate: base.learning_rate / c,
            ..base
        })
        .fit(&x, &y, 3, Objective::Weighted { sample_weights: Some(&w) }, None)
        .unwrap();
        for i in 0..30 {
            let a = plain.model.predict_proba(x.row(i));
            let b = weighted.model.predict_proba(x.row(i));
            assert_eq!(crate::model::argmax(&a), crate::model::argmax(&b));
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_group_dro_equals_erm() {
        let (x, y, _) = toy_problem(5, 25, 4, 2);
        let trainer = LogisticTrainer::new(TrainerConfig {
            steps: 150,
            ..TrainerConfig::default()
        });
        let erm = trainer
            .fit(&x, &y, 2, Objective::Weighted { sample_weights: None }, None)
            .unwrap();
        let groups = vec![0; 25];
        let dro = trainer
            .fit(
                &x,
                &y,
                2,
                Objective::GroupDro { groups: &groups, num_groups: 1, eta: 0.5 },
                None,
            )
            .unwrap();
        for (a, b) in erm.model.weights.iter().zip(dro.model.weights.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(dro.group_weight_trace.iter().all(|q| q == &vec![1.0]));
    }

    #[test]
    fn non_finite_objective_aborts() {
        let x = array![[f64::NAN, 1.0], [1.0, 0.0]];
        let err = LogisticTrainer::new(TrainerConfig::default())
            .fit(&x, &[0, 1], 2, Objective::Weighted { sample_weights: None }, None)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }));
    }

    #[test]
    fn minibatch_training_is_deterministic() {
        let (x, y, _) = toy_problem(9, 50, 3, 2);
        let t = LogisticTrainer::new(TrainerConfig {
            batch_size: Some(8),
            steps: 60,
            seed: 11,
            ..TrainerConfig::default()
        });
        let a = t.fit(&x, &y, 2, Objective::Weighted { sample_weights: None }, None).unwrap();
        let b = t.fit(&x, &y, 2, Objective::Weighted { sample_weights: None }, None).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn model_file_roundtrip() {
        let (x, y, _) = toy_problem(4, 20, 16 * 5, 2);
        let model = LogisticTrainer::new(TrainerConfig { steps: 5, ..TrainerConfig::default() })
            .fit(&x, &y, 2, Objective::Weighted { sample_weights: None }, None)
            .unwrap()
            .model;
        let clf = PooledLogisticClassifier {
            recipe: FeatureRecipe { grid: 4, texture: true },
            channels: 3,
            model,
        };
        let mut bytes = Vec::new();
        clf.write_to(&mut bytes).unwrap();
        assert_eq!(PooledLogisticClassifier::read_from(bytes.as_slice()).unwrap(), clf);
        bytes[4] = 9;
        assert!(PooledLogisticClassifier::read_from(bytes.as_slice()).is_err());
    }

    #[test]
    fn gradcam_gradients_are_the_target_weights() {
        let recipe = FeatureRecipe { grid: 2, texture: true };
        let d = recipe.dim(3);
        let model = LogisticModel {
            weights: Array2::from_shape_fn((2, d), |(c, j)| (c * d + j) as f64),
            bias: vec![0.0, 0.0],
        };
        let clf = PooledLogisticClassifier { recipe, channels: 3, model };
        let img = Array3::from_elem((4, 4, 3), 0.5);
        match clf.explain(&img, 1, CamMethod::GradCam).unwrap() {
            Explanation::Gradients { feature_maps, gradients } => {
                assert_eq!(feature_maps.dim(), (5, 2, 2));
                assert_eq!(gradients[[0, 0, 0]], d as f64);
                assert_eq!(gradients[[4, 1, 1]], (2 * d - 1) as f64);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(clf.explain(&img, 0, CamMethod::ScoreCam).is_err());
    }
}
