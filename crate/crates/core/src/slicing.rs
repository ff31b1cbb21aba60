//! Slice discovery with an error-aware mixture model.
//!
//! Each component `j` models a sample `(z, y, ŷ)` (embedding, true label and
//! predicted class distribution) with the unnormalized density
//!
//! ```text
//! π_j · N(z; μ_j, diag σ²_j) · φ_y,j[y]^γ_y · Π_c φ_ŷ,j[c]^(γ_ŷ · ŷ_c)
//! ```
//!
//! and EM alternates normalized responsibilities with closed-form weighted
//! updates. The label and prediction exponents pull components towards
//! homogeneous error types, so a discovered slice groups samples that look
//! alike *and* fail alike.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{ground_dataset, GroundingProvenance, HeatmapSource};
use crate::io::{Dataset, HeatmapStore};
use crate::model::{argmax, DatasetManifest, GroundingConfig, Split};
use crate::providers::{Classifier, EmbeddingProvider, FeatureRecipe, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub num_slices: usize,
    pub gamma_y: f64,
    pub gamma_yhat: f64,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop when the relative log-likelihood improvement falls below this.
    pub tol: f64,
    pub variance_floor: f64,
    /// Components whose responsibility mass falls below this are re-seeded
    /// once, then removed.
    pub mass_floor: f64,
}

impl MixtureConfig {
    pub const DEFAULT_GAMMA: f64 = 10.0;

    pub fn new(num_slices: usize, seed: u64) -> Self {
        MixtureConfig {
            num_slices,
            gamma_y: Self::DEFAULT_GAMMA,
            gamma_yhat: Self::DEFAULT_GAMMA,
            seed,
            max_iter: 100,
            tol: 1e-6,
            variance_floor: 1e-6,
            mass_floor: 1e-6,
        }
    }

    pub fn with_gammas(mut self, gamma_y: f64, gamma_yhat: f64) -> Self {
        self.gamma_y = gamma_y;
        self.gamma_yhat = gamma_yhat;
        self
    }
}

/// A fitted error-aware mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceModel {
    pub weights: Vec<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
    /// `k x |Y|` label categoricals.
    pub label_probs: Array2<f64>,
    /// `k x |Y|` prediction categoricals.
    pub prediction_probs: Array2<f64>,
    pub gamma_y: f64,
    pub gamma_yhat: f64,
    /// Log-likelihood at every E-step.
    pub log_likelihood_trace: Vec<f64>,
    /// Trace indices at which a component was re-seeded or removed; the
    /// trace is only monotone between consecutive restarts.
    pub restarts: Vec<usize>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl SliceModel {
    pub fn num_slices(&self) -> usize {
        self.weights.len()
    }

    /// Responsibilities of every component for new data.
    pub fn assign(&self, embeddings: &Array2<f64>, labels: &[usize], probs: &Array2<f64>) -> Result<SliceAssignment> {
        check_inputs(embeddings, labels, probs, self.label_probs.ncols())?;
        Ok(e_step(self, embeddings, labels, probs).0)
    }
}

/// Per-sample responsibilities over slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceAssignment {
    pub responsibilities: Array2<f64>,
}

impl SliceAssignment {
    pub fn num_slices(&self) -> usize {
        self.responsibilities.ncols()
    }

    /// Arg-max slice per sample (lowest slice on ties).
    pub fn hard(&self) -> Vec<usize> {
        self.responsibilities
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("row-major")))
            .collect()
    }
}

fn check_inputs(embeddings: &Array2<f64>, labels: &[usize], probs: &Array2<f64>, num_classes: usize) -> Result<()> {
    let n = embeddings.nrows();
    if labels.len() != n || probs.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} embeddings, {} labels, {} prediction rows",
            labels.len(),
            probs.nrows()
        )));
    }
    if embeddings.ncols() == 0 {
        return Err(Error::invalid("embedding dimension must be at least 1"));
    }
    if probs.ncols() != num_classes {
        return Err(Error::ShapeMismatch(format!(
            "prediction rows of length {} for {num_classes} classes",
            probs.ncols()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::invalid(format!("label {y} out of range")));
    }
    if embeddings.iter().chain(probs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixture input".into()));
    }
    Ok(())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Responsibilities, total log-likelihood and per-sample log-likelihoods.
fn e_step(model: &SliceModel, z: &Array2<f64>, labels: &[usize], probs: &Array2<f64>) -> (SliceAssignment, f64, Vec<f64>) {
    let (n, d) = z.dim();
    let k = model.num_slices();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let log_norm: Vec<f64> = (0..k)
        .map(|j| -0.5 * model.variances.row(j).iter().map(|v| ln2pi + v.ln()).sum::<f64>())
        .collect();
    let log_pi: Vec<f64> = model.weights.iter().map(|w| w.ln()).collect();
    let log_label = model.label_probs.mapv(f64::ln);
    let log_pred = model.prediction_probs.mapv(f64::ln);

    let mut resp = Array2::zeros((n, k));
    let mut total = 0.0;
    let mut per_sample = Vec::with_capacity(n);
    let mut scores = vec![0.0; k];
    for i in 0..n {
        let zi = z.row(i);
        for j in 0..k {
            let mut s = log_pi[j] + log_norm[j];
            let mu = model.means.row(j);
            let var = model.variances.row(j);
            let mut quad = 0.0;
            for t in 0..d {
                let diff = zi[t] - mu[t];
                quad += diff * diff / var[t];
            }
            s -= 0.5 * quad;
            if model.gamma_y > 0.0 {
                s += model.gamma_y * log_label[[j, labels[i]]];
            }
            if model.gamma_yhat > 0.0 {
                for (c, &p) in probs.row(i).iter().enumerate() {
                    if p > 0.0 {
                        s += model.gamma_yhat * p * log_pred[[j, c]];
                    }
                }
            }
            scores[j] = s;
        }
        let lse = log_sum_exp(&scores);
        for j in 0..k {
            resp[[i, j]] = if lse.is_finite() { (scores[j] - lse).exp() } else { 1.0 / k as f64 };
        }
        total += lse;
        per_sample.push(lse);
    }
    (SliceAssignment { responsibilities: resp }, total, per_sample)
}

fn m_step(model: &mut SliceModel, resp: &Array2<f64>, z: &Array2<f64>, labels: &[usize], probs: &Array2<f64>, floor: f64) {
    let n = z.nrows();
    let k = model.num_slices();
    let num_classes = model.label_probs.ncols();
    let mass = resp.sum_axis(Axis(0));
    for j in 0..k {
        let m = mass[j];
        model.weights[j] = m / n as f64;
        if m <= 0.0 {
            continue;
        }
        let r = resp.column(j);
        let mut mean = Array1::<f64>::zeros(z.ncols());
        for (i, zi) in z.rows().into_iter().enumerate() {
            mean.scaled_add(r[i], &zi);
        }
        mean /= m;
        let mut var = Array1::<f64>::zeros(z.ncols());
        for (i, zi) in z.rows().into_iter().enumerate() {
            let diff = &zi - &mean;
            var.scaled_add(r[i], &(&diff * &diff));
        }
        var /= m;
        var.mapv_inplace(|v| v.max(floor));
        model.means.row_mut(j).assign(&mean);
        model.variances.row_mut(j).assign(&var);

        let mut lp = vec![0.0; num_classes];
        let mut pp = vec![0.0; num_classes];
        for i in 0..n {
            lp[labels[i]] += r[i];
            for (c, &p) in probs.row(i).iter().enumerate() {
                pp[c] += r[i] * p;
            }
        }
        let psum: f64 = pp.iter().sum();
        for c in 0..num_classes {
            model.label_probs[[j, c]] = lp[c] / m;
            model.prediction_probs[[j, c]] = pp[c] / psum;
        }
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Independent k-means++ seedings tried by [`kmeans_plus_plus`].
pub const KMEANS_SEEDINGS: usize = 10;

/// Best of [`KMEANS_SEEDINGS`] k-means++ seedings, each refined by a few
/// Lloyd iterations, by within-cluster sum of squares (earliest on ties).
pub fn kmeans_plus_plus(z: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Array2<f64>)> = None;
    for _ in 0..KMEANS_SEEDINGS {
        let (centers, inertia) = kmeans_once(z, k, &mut rng);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, centers));
        }
    }
    best.expect("at least one seeding").1
}

fn inertia(z: &Array2<f64>, centers: &Array2<f64>) -> f64 {
    z.rows()
        .into_iter()
        .map(|x| {
            centers
                .rows()
                .into_iter()
                .map(|c| sq_dist(x, c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn kmeans_once(z: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, f64) {
    let n = z.nrows();
    let mut centers = Array2::zeros((k, z.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&z.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                if target < v {
                    chosen = i;
                    break;
                }
                target -= v;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&z.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(z.row(i), centers.row(c)));
        }
    }
    for _ in 0..20 {
        let assign: Vec<usize> = (0..n)
            .map(|i| {
                let d: Vec<f64> = (0..k).map(|c| -sq_dist(z.row(i), centers.row(c))).collect();
                argmax(&d)
            })
            .collect();
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &z.row(i));
            counts[c] += 1;
        }
        let mut moved = false;
        for c in 0..k {
            if counts[c] > 0 {
                let new = sums.row(c).mapv(|v| v / counts[c] as f64);
                if new != centers.row(c) {
                    moved = true;
                    centers.row_mut(c).assign(&new);
                }
            }
        }
        if !moved {
            break;
        }
    }
    let w = inertia(z, &centers);
    (centers, w)
}

/// Fits the error-aware mixture by EM.
///
/// Returns the model and the responsibilities of the final E-step (which
/// correspond to the returned parameters).
pub fn fit_error_aware_mixture(
    embeddings: &Array2<f64>,
    labels: &[usize],
    prediction_probs: &Array2<f64>,
    config: &MixtureConfig,
) -> Result<(SliceModel, SliceAssignment)> {
    let num_classes = prediction_probs.ncols();
    check_inputs(embeddings, labels, prediction_probs, num_classes)?;
    let (n, d) = embeddings.dim();
    let k = config.num_slices;
    if k == 0 || n < k {
        return Err(Error::invalid(format!("need 1 <= slices ({k}) <= samples ({n})")));
    }
    if config.gamma_y < 0.0 || config.gamma_yhat < 0.0 {
        return Err(Error::invalid("gamma exponents must be nonnegative"));
    }
    let global_mean = embeddings.mean_axis(Axis(0)).expect("non-empty");
    let global_var = embeddings
        .var_axis(Axis(0), 0.0)
        .mapv(|v| v.max(config.variance_floor));

    let mut model = SliceModel {
        weights: vec![1.0 / k as f64; k],
        means: kmeans_plus_plus(embeddings, k, config.seed),
        variances: Array2::from_shape_fn((k, d), |(_, t)| global_var[t]),
        label_probs: Array2::from_elem((k, num_classes), 1.0 / num_classes as f64),
        prediction_probs: Array2::from_elem((k, num_classes), 1.0 / num_classes as f64),
        gamma_y: config.gamma_y,
        gamma_yhat: config.gamma_yhat,
        log_likelihood_trace: Vec::new(),
        restarts: Vec::new(),
        converged: false,
        warnings: Vec::new(),
    };
    let _ = global_mean;
    let mut reseeded = vec![false; k];

    let mut iterations = 0;
    loop {
        let (assignment, ll, per_sample) = e_step(&model, embeddings, labels, prediction_probs);
        if !ll.is_finite() {
            return Err(Error::Mixture(format!("log-likelihood is {ll} at iteration {iterations}")));
        }
        let trace_len = model.log_likelihood_trace.len();
        let segment_start = model.restarts.last().copied().unwrap_or(0);
        let prev = (trace_len > segment_start).then(|| model.log_likelihood_trace[trace_len - 1]);
        model.log_likelihood_trace.push(ll);
        if let Some(prev) = prev {
            let tolerance = 1e-9 * prev.abs().max(1.0);
            if ll < prev - tolerance {
                return Err(Error::Mixture(format!(
                    "log-likelihood decreased from {prev} to {ll} at iteration {iterations}"
                )));
            }
            if (ll - prev) / prev.abs().max(f64::MIN_POSITIVE) < config.tol {
                model.converged = true;
                return Ok((model, assignment));
            }
        }
        if iterations >= config.max_iter {
            return Ok((model, assignment));
        }

        // Empty components: re-seed once, then drop.
        let mass = assignment.responsibilities.sum_axis(Axis(0));
        let empty: Vec<usize> = (0..model.num_slices()).filter(|&j| mass[j] < config.mass_floor).collect();
        if !empty.is_empty() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| per_sample[a].total_cmp(&per_sample[b]).then(a.cmp(&b)));
            let mut worst = order.into_iter();
            let mut remove = Vec::new();
            for &j in &empty {
                if reseeded[j] {
                    remove.push(j);
                    continue;
                }
                reseeded[j] = true;
                let i = worst.next().expect("n >= k");
                model.means.row_mut(j).assign(&embeddings.row(i));
                model.variances.row_mut(j).assign(&global_var);
                model.label_probs.row_mut(j).fill(1.0 / num_classes as f64);
                model.prediction_probs.row_mut(j).fill(1.0 / num_classes as f64);
                model.weights[j] = 1.0 / model.num_slices() as f64;
                model
                    .warnings
                    .push(format!("component {j} emptied at iteration {iterations}; re-seeded"));
            }
            if !remove.is_empty() {
                for &j in remove.iter().rev() {
                    model.warnings.push(format!(
                        "component {j} emptied again at iteration {iterations}; removed"
                    ));
                    log::warn!("mixture component {j} collapsed and was removed");
                }
                let keep: Vec<usize> = (0..model.num_slices()).filter(|j| !remove.contains(j)).collect();
                model.weights = keep.iter().map(|&j| model.weights[j]).collect();
                model.means = model.means.select(Axis(0), &keep);
                model.variances = model.variances.select(Axis(0), &keep);
                model.label_probs = model.label_probs.select(Axis(0), &keep);
                model.prediction_probs = model.prediction_probs.select(Axis(0), &keep);
                reseeded = keep.iter().map(|&j| reseeded[j]).collect();
                if model.num_slices() == 0 {
                    return Err(Error::Mixture("all components collapsed".into()));
                }
            }
            let total: f64 = model.weights.iter().sum();
            model.weights.iter_mut().for_each(|w| *w /= total);
            model.restarts.push(model.log_likelihood_trace.len());
            iterations += 1;
            continue;
        }

        m_step(&mut model, &assignment.responsibilities, embeddings, labels, prediction_probs, config.variance_floor);
        iterations += 1;
    }
}

/// Sample indices ordered by responsibility for `slice`, descending; ties by
/// sample id.
pub fn rank_slice_members(assignment: &SliceAssignment, slice: usize, sample_ids: &[String]) -> Result<Vec<usize>> {
    if slice >= assignment.num_slices() {
        return Err(Error::invalid(format!(
            "slice {slice} out of range ({} slices)",
            assignment.num_slices()
        )));
    }
    if sample_ids.len() != assignment.responsibilities.nrows() {
        return Err(Error::ShapeMismatch("one id per sample required".into()));
    }
    let r = assignment.responsibilities.column(slice);
    let mut order: Vec<usize> = (0..sample_ids.len()).collect();
    order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then_with(|| sample_ids[a].cmp(&sample_ids[b])));
    Ok(order)
}

/// For each ground-truth slice, the best fraction of any discovered slice's
/// top-`k` members that fall in it; averaged over ground-truth slices.
pub fn precision_at_k(rankings: &[Vec<usize>], ground_truth: &[BTreeSet<usize>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if ground_truth.is_empty() {
        return Err(Error::EmptySet("no bias-conflicting slices defined".into()));
    }
    if rankings.is_empty() {
        return Err(Error::EmptySet("no discovered slices".into()));
    }
    let total: f64 = ground_truth
        .iter()
        .map(|truth| {
            rankings
                .iter()
                .map(|ranking| ranking.iter().take(k).filter(|i| truth.contains(i)).count())
                .max()
                .unwrap_or(0) as f64
                / k as f64
        })
        .sum();
    Ok(total / ground_truth.len() as f64)
}

/// Ground-truth bias-conflicting slices among `indices`: for each group with
/// `M(a) != y`, the positions (into `indices`) of its members. Groups with no
/// member among `indices` are skipped.
pub fn conflicting_slices(manifest: &DatasetManifest, indices: &[usize]) -> Vec<(String, BTreeSet<usize>)> {
    let mut out: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    let conflicting: BTreeSet<_> = manifest.group_table.conflicting_groups().into_iter().collect();
    for (pos, &i) in indices.iter().enumerate() {
        let r = &manifest.records[i];
        if let Some(key) = DatasetManifest::group_key(r) {
            if conflicting.contains(&key) {
                out.entry(manifest.group_name(key)).or_default().insert(pos);
            }
        }
    }
    out.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum SlicingMethod {
    Domino,
    /// Amplify the classifier's reliance on easy correlations with heavy
    /// weight decay before slicing.
    Facts {
        trainer: TrainerConfig,
        recipe: FeatureRecipe,
        lambda_high: f64,
    },
}

impl SlicingMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SlicingMethod::Domino => "domino",
            SlicingMethod::Facts { .. } => "facts",
        }
    }

    pub const DEFAULT_AMPLIFICATION: f64 = 100.0;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub slice: usize,
    pub size: usize,
    /// Classifier accuracy over hard-assigned members; `None` for an empty slice.
    pub accuracy: Option<f64>,
    pub mean_responsibility: f64,
    pub top_members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryProvenance {
    pub method: String,
    pub split: Split,
    pub mixture: MixtureConfig,
    pub grounding: GroundingProvenance,
    pub classifier: String,
    pub embedder: String,
    pub amplification: Option<AmplificationRecord>,
    pub precision_protocol: String,
    pub grounding_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationRecord {
    pub baseline_weight_decay: f64,
    pub amplified_weight_decay: f64,
    pub classifier: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryResult {
    pub slices: Vec<SliceStats>,
    pub top_k: usize,
    pub precision_at_k: Option<f64>,
    pub ground_truth_slices: Vec<String>,
    pub sample_ids: Vec<String>,
    pub hard_assignment: Vec<usize>,
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub provenance: DiscoveryProvenance,
    #[serde(skip)]
    pub assignment: Option<SliceAssignment>,
}

pub const PRECISION_PROTOCOL: &str =
    "for each ground-truth conflicting group: max over discovered slices of |top-k ∩ group| / k; mean over groups";

/// Inputs of a discovery run.
pub struct DiscoveryRequest<'a> {
    pub dataset: &'a Dataset,
    pub split: Split,
    pub classifier: &'a dyn Classifier,
    pub embedder: &'a dyn EmbeddingProvider,
    pub grounding: &'a GroundingConfig,
    /// Precomputed heatmaps; when absent, the (possibly amplified)
    /// classifier explains its own predictions.
    pub heatmaps: Option<&'a HeatmapStore>,
    pub method: SlicingMethod,
    pub mixture: MixtureConfig,
    pub top_k: usize,
}

/// Default slice count: twice the number of annotated groups.
pub fn default_num_slices(manifest: &DatasetManifest) -> Option<usize> {
    let g = manifest.group_table.groups.len();
    (g > 0).then_some(2 * g)
}

pub fn discover_slices(req: DiscoveryRequest<'_>) -> Result<DiscoveryResult> {
    let dataset = req.dataset;
    let indices = dataset.manifest.split_indices(req.split);
    if indices.is_empty() {
        return Err(Error::EmptySet(format!("{} split", req.split)));
    }

    let amplified;
    let (classifier, amplification): (&dyn Classifier, Option<AmplificationRecord>) = match &req.method {
        SlicingMethod::Domino => (req.classifier, None),
        SlicingMethod::Facts {
            trainer,
            recipe,
            lambda_high,
        } => {
            amplified = amplify_bias(trainer, *recipe, dataset, *lambda_high)?;
            let record = AmplificationRecord {
                baseline_weight_decay: trainer.weight_decay,
                amplified_weight_decay: *lambda_high,
                classifier: amplified.version(),
            };
            (&amplified, Some(record))
        }
    };

    let ids: Vec<&str> = indices.iter().map(|&i| dataset.manifest.records[i].id.as_str()).collect();
    let images: Vec<_> = indices.iter().map(|&i| &dataset.images[i]).collect();
    let source = match req.heatmaps {
        Some(store) => HeatmapSource::Store(store),
        None => HeatmapSource::Classifier(classifier),
    };
    let grounded = ground_dataset(&ids, &images, source, req.grounding)?;

    let num_classes = dataset.manifest.num_classes();
    let mut probs = Array2::zeros((indices.len(), num_classes));
    let mut labels = Vec::with_capacity(indices.len());
    let mut correct = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        let p = classifier.predict_proba(&dataset.images[i])?;
        let y = dataset.manifest.records[i].label;
        correct.push(argmax(&p) == y);
        labels.push(y);
        probs.row_mut(row).assign(&Array1::from(p));
    }
    let embeddings = req.embedder.embed_images(&grounded.images)?;
    let dim = req.embedder.dim();
    let z = Array2::from_shape_fn((embeddings.len(), dim), |(i, t)| embeddings[i][t]);

    let (model, assignment) = fit_error_aware_mixture(&z, &labels, &probs, &req.mixture)?;
    let sample_ids: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
    let hard = assignment.hard();
    let mut rankings = Vec::with_capacity(model.num_slices());
    let mut slices = Vec::with_capacity(model.num_slices());
    for j in 0..model.num_slices() {
        let ranking = rank_slice_members(&assignment, j, &sample_ids)?;
        let members: Vec<usize> = (0..hard.len()).filter(|&i| hard[i] == j).collect();
        let accuracy = (!members.is_empty())
            .then(|| members.iter().filter(|&&i| correct[i]).count() as f64 / members.len() as f64);
        slices.push(SliceStats {
            slice: j,
            size: members.len(),
            accuracy,
            mean_responsibility: assignment.responsibilities.column(j).mean().unwrap_or(0.0),
            top_members: ranking.iter().take(req.top_k).map(|&i| sample_ids[i].clone()).collect(),
        });
        rankings.push(ranking);
    }

    let truth = conflicting_slices(&dataset.manifest, &indices);
    let precision = if truth.is_empty() {
        None
    } else {
        let sets: Vec<BTreeSet<usize>> = truth.iter().map(|(_, s)| s.clone()).collect();
        Some(precision_at_k(&rankings, &sets, req.top_k)?)
    };

    Ok(DiscoveryResult {
        slices,
        top_k: req.top_k,
        precision_at_k: precision,
        ground_truth_slices: truth.into_iter().map(|(name, _)| name).collect(),
        sample_ids,
        hard_assignment: hard,
        log_likelihood_trace: model.log_likelihood_trace.clone(),
        converged: model.converged,
        warnings: model.warnings.clone(),
        provenance: DiscoveryProvenance {
            method: req.method.name().into(),
            split: req.split,
            mixture: req.mixture.clone(),
            grounding: grounded.provenance,
            classifier: classifier.version(),
            embedder: req.embedder.version(),
            amplification,
            precision_protocol: PRECISION_PROTOCOL.into(),
            grounding_failures: grounded.failures.len(),
        },
        assignment: Some(assignment),
    })
}

/// Retrains the classifier on the training split with weight decay raised to
/// `lambda_high`, amplifying its reliance on the easiest correlations.
pub fn amplify_bias(
    trainer: &TrainerConfig,
    recipe: FeatureRecipe,
    dataset: &Dataset,
    lambda_high: f64,
) -> Result<crate::providers::PooledLogisticClassifier> {
    if !(lambda_high >= trainer.weight_decay) {
        return Err(Error::invalid(format!(
            "amplified weight decay {lambda_high} below baseline {}",
            trainer.weight_decay
        )));
    }
    let config = TrainerConfig {
        weight_decay: lambda_high,
        ..trainer.clone()
    };
    crate::mitigation::erm_train(&config, recipe, dataset)
}
