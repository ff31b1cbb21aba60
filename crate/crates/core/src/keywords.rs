//! Keyword bias description.
//!
//! Misclassified images of a class are captioned, frequent n-grams become
//! candidate keywords, and each candidate is scored by how much closer it
//! sits to the misclassified images than to the correctly classified ones:
//!
//! ```text
//! score(k) = sim(k, wrong) - sim(k, correct)
//! sim(k, D) = mean over x in D of cos(embed_text(k), embed_image(x))
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::{ground_dataset, GroundingProvenance, HeatmapSource};
use crate::io::Dataset;
use crate::model::{GroundingConfig, Split};
use crate::providers::{cosine, tokenize, CaptionProvider, EmbeddingProvider};

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "on", "in", "at", "with", "and", "or", "is", "are", "to", "for", "by", "from", "its",
    "this", "that", "photo", "picture", "image", "background",
];

/// Minimum number (or fraction) of captions an n-gram must occur in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinFrequency {
    Count(usize),
    Fraction(f64),
}

impl MinFrequency {
    fn admits(&self, count: usize, num_captions: usize) -> bool {
        match *self {
            MinFrequency::Count(c) => count >= c,
            MinFrequency::Fraction(f) => count as f64 >= f * num_captions as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordConfig {
    pub stopwords: BTreeSet<String>,
    pub max_ngram: usize,
    pub min_frequency: MinFrequency,
}

impl Default for KeywordConfig {
    fn default() -> Self {
        KeywordConfig {
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            max_ngram: 3,
            min_frequency: MinFrequency::Count(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordCandidate {
    pub keyword: String,
    /// Number of captions containing the n-gram.
    pub count: usize,
}

/// Lowercased 1..=`max_ngram`-grams over the stopword-free token stream of
/// each caption, counted once per caption. Ordered by count (descending),
/// then lexicographically.
pub fn extract_keywords(captions: &[String], config: &KeywordConfig) -> Vec<KeywordCandidate> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for caption in captions {
        let tokens: Vec<String> = tokenize(caption)
            .into_iter()
            .filter(|t| !config.stopwords.contains(t))
            .collect();
        let mut seen = BTreeSet::new();
        for n in 1..=config.max_ngram.max(1) {
            for w in tokens.windows(n) {
                seen.insert(w.join(" "));
            }
        }
        for g in seen {
            *counts.entry(g).or_default() += 1;
        }
    }
    let mut out: Vec<KeywordCandidate> = counts
        .into_iter()
        .filter(|(_, c)| config.min_frequency.admits(*c, captions.len()))
        .map(|(keyword, count)| KeywordCandidate { keyword, count })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.keyword.cmp(&b.keyword)));
    out
}

/// Mean of values summed in sorted order, so that the result does not depend
/// on the order of the set.
fn order_free_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean cosine similarity between `text` and each image embedding.
pub fn similarity(text: &[f64], images: &[Vec<f64>]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptySet("image set".into()));
    }
    Ok(order_free_mean(images.iter().map(|e| cosine(text, e)).collect()))
}

/// `sim(k, wrong) - sim(k, correct)`.
pub fn clip_score(
    keyword: &str,
    wrong: &[Vec<f64>],
    correct: &[Vec<f64>],
    embedder: &dyn EmbeddingProvider,
) -> Result<f64> {
    if wrong.is_empty() || correct.is_empty() {
        return Err(Error::EmptySet("both the wrong and correct sets must be non-empty".into()));
    }
    let k = embedder.embed_text(keyword)?;
    if k.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroEmbedding(keyword.into()));
    }
    Ok(similarity(&k, wrong)? - similarity(&k, correct)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordScore {
    pub keyword: String,
    pub score: f64,
    /// Classifier accuracy on the quarter of the class's images closest to
    /// the keyword.
    pub subgroup_accuracy: f64,
    pub caption_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassKeywords {
    pub class: String,
    pub num_wrong: usize,
    pub num_correct: usize,
    pub keywords: Vec<KeywordScore>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordProvenance {
    pub split: Split,
    pub grounding: GroundingProvenance,
    pub captioner: String,
    pub embedder: String,
    pub similarity_aggregator: String,
    pub subgroup_rule: String,
    pub top_n: usize,
    pub config: KeywordConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordReport {
    pub classes: Vec<ClassKeywords>,
    pub provenance: KeywordProvenance,
}

impl KeywordReport {
    /// Ranked keyword strings for `class`.
    pub fn keywords_for(&self, class: &str) -> Vec<&str> {
        self.classes
            .iter()
            .find(|c| c.class == class)
            .map(|c| c.keywords.iter().map(|k| k.keyword.as_str()).collect())
            .unwrap_or_default()
    }

    /// The top keyword of every class that has one.
    pub fn top_keywords(&self) -> BTreeMap<String, Vec<String>> {
        self.classes
            .iter()
            .filter_map(|c| c.keywords.first().map(|k| (c.class.clone(), vec![k.keyword.clone()])))
            .collect()
    }
}

pub struct KeywordRequest<'a> {
    pub dataset: &'a Dataset,
    pub split: Split,
    /// Predicted class per sample of `split`, in split order.
    pub predictions: &'a [usize],
    pub captioner: &'a dyn CaptionProvider,
    pub embedder: &'a dyn EmbeddingProvider,
    pub grounding: &'a GroundingConfig,
    pub heatmaps: HeatmapSource<'a>,
    pub top_n: usize,
    pub config: KeywordConfig,
    /// Restrict to one class name.
    pub class: Option<String>,
}

/// Per class: split the class's samples by correctness, caption the wrong
/// ones (grounded when enabled), extract candidates and rank them by score
/// (descending, ties lexicographic).
pub fn rank_keywords(req: KeywordRequest<'_>) -> Result<KeywordReport> {
    let dataset = req.dataset;
    let manifest = &dataset.manifest;
    let idx = dataset.split_indices(req.split);
    if req.predictions.len() != idx.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} {} samples",
            req.predictions.len(),
            idx.len(),
            req.split
        )));
    }
    if let Some(c) = &req.class {
        if manifest.class_index(c).is_none() {
            return Err(Error::invalid(format!("unknown class `{c}`")));
        }
    }
    let ids = dataset.ids_at(&idx);
    let grounded = ground_dataset(&ids, &dataset.images_at(&idx), req.heatmaps, req.grounding)?;
    let embeddings = req.embedder.embed_images(&grounded.images)?;

    let mut classes = Vec::new();
    for (y, class) in manifest.header.class_names.iter().enumerate() {
        if req.class.as_ref().is_some_and(|c| c != class) {
            continue;
        }
        let members: Vec<usize> = (0..idx.len()).filter(|&p| manifest.records[idx[p]].label == y).collect();
        let (wrong, correct): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&p| req.predictions[p] != y);
        let mut entry = ClassKeywords {
            class: class.clone(),
            num_wrong: wrong.len(),
            num_correct: correct.len(),
            keywords: Vec::new(),
            notes: Vec::new(),
        };
        if wrong.is_empty() || correct.is_empty() {
            let which = if wrong.is_empty() { "misclassified" } else { "correctly classified" };
            entry.notes.push(format!("skipped: no {which} samples"));
            classes.push(entry);
            continue;
        }
        let wrong_images: Vec<_> = wrong.iter().map(|&p| grounded.images[p].clone()).collect();
        let captions = req.captioner.captions(&wrong_images)?;
        let wrong_emb: Vec<Vec<f64>> = wrong.iter().map(|&p| embeddings[p].clone()).collect();
        let correct_emb: Vec<Vec<f64>> = correct.iter().map(|&p| embeddings[p].clone()).collect();

        let mut scored = Vec::new();
        for cand in extract_keywords(&captions, &req.config) {
            let text = match req.embedder.embed_text(&cand.keyword) {
                Ok(t) => t,
                Err(e) => {
                    entry.notes.push(format!("keyword `{}` not embeddable: {e}", cand.keyword));
                    continue;
                }
            };
            let score = similarity(&text, &wrong_emb)? - similarity(&text, &correct_emb)?;
            let subgroup_accuracy = subgroup_accuracy(&text, &members, &embeddings, &ids, |p| req.predictions[p] == y);
            scored.push(KeywordScore {
                keyword: cand.keyword,
                score,
                subgroup_accuracy,
                caption_count: cand.count,
            });
        }
        scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.keyword.cmp(&b.keyword)));
        scored.truncate(req.top_n);
        entry.keywords = scored;
        classes.push(entry);
    }

    Ok(KeywordReport {
        classes,
        provenance: KeywordProvenance {
            split: req.split,
            grounding: grounded.provenance,
            captioner: req.captioner.version(),
            embedder: req.embedder.version(),
            similarity_aggregator: "mean cosine".into(),
            subgroup_rule: "top quartile (rounded up) of the class's samples by keyword similarity".into(),
            top_n: req.top_n,
            config: req.config,
        },
    })
}

fn subgroup_accuracy(
    text: &[f64],
    members: &[usize],
    embeddings: &[Vec<f64>],
    ids: &[&str],
    correct: impl Fn(usize) -> bool,
) -> f64 {
    let mut ranked: Vec<(f64, usize)> = members.iter().map(|&p| (cosine(text, &embeddings[p]), p)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| ids[a.1].cmp(ids[b.1])));
    let take = members.len().div_ceil(4).max(1);
    let hits = ranked.iter().take(take).filter(|(_, p)| correct(*p)).count();
    hits as f64 / take as f64
}
