//! Debiased training (ERM, JTT, group-robust) and zero-shot evaluation.
//!
//! All trainers fit a [`PooledLogisticClassifier`] on the training split.
//! With [`Selection::BestValidation`], the trainer observer evaluates the
//! model every `eval_every` steps and the checkpoint with the best validation
//! worst-group accuracy is kept (the earliest one on ties).

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::metrics::{group_accuracies, GroupAccuracy, GroupedMetrics};
use crate::model::{argmax, DatasetManifest, Image, Split};
use crate::providers::{
    FeatureRecipe, LogisticModel, LogisticTrainer, Objective, PooledLogisticClassifier, TrainerConfig, ZeroShotProvider,
};

/// Checkpoint policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep the model after the last step.
    Final,
    /// Keep the checkpoint maximizing validation worst-group accuracy.
    BestValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub policy: Selection,
    pub selected_step: usize,
    pub selected_val_worst_group_accuracy: Option<f64>,
    /// `(step, validation worst-group accuracy)` for every evaluated checkpoint.
    pub curve: Vec<(usize, f64)>,
}

/// A trained model with its training record.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub classifier: PooledLogisticClassifier,
    pub method: String,
    pub selection: SelectionRecord,
    pub loss_trace: Vec<f64>,
    pub group_weight_trace: Vec<Vec<f64>>,
    pub absent_group_steps: usize,
    /// JTT only: size of the phase-1 error set.
    pub error_set_size: Option<usize>,
    pub warnings: Vec<String>,
}

struct SplitFeatures {
    features: Array2<f64>,
    labels: Vec<usize>,
}

fn split_features(dataset: &Dataset, recipe: FeatureRecipe, split: Split) -> Result<(Vec<usize>, SplitFeatures)> {
    let idx = dataset.split_indices(split);
    let features = PooledLogisticClassifier::feature_matrix(recipe, &dataset.images_at(&idx))?;
    let labels = dataset.labels_at(&idx);
    Ok((idx, SplitFeatures { features, labels }))
}

fn channels(dataset: &Dataset) -> usize {
    dataset.images.first().map(|im| im.dim().2).unwrap_or(0)
}

/// Validation worst-group accuracy of a raw model, over ground-truth groups.
struct Validator {
    data: SplitFeatures,
    groups: Vec<String>,
}

impl Validator {
    fn new(dataset: &Dataset, recipe: FeatureRecipe) -> Result<Option<Self>> {
        let (idx, data) = split_features(dataset, recipe, Split::Val)?;
        let groups: Option<Vec<String>> = idx
            .iter()
            .map(|&i| dataset.manifest.group_id(&dataset.manifest.records[i]))
            .collect();
        Ok(match groups {
            Some(groups) if !groups.is_empty() => Some(Validator { data, groups }),
            _ => None,
        })
    }

    fn worst_group(&self, model: &LogisticModel) -> f64 {
        let preds: Vec<usize> = (0..self.data.labels.len())
            .map(|i| argmax(&model.predict_proba(self.data.features.row(i))))
            .collect();
        let acc = group_accuracies(&preds, &self.data.labels, &self.groups).expect("consistent lengths");
        acc.values().map(GroupAccuracy::accuracy).fold(f64::INFINITY, f64::min)
    }
}

fn fit_selected(
    trainer: &TrainerConfig,
    recipe: FeatureRecipe,
    dataset: &Dataset,
    train: &SplitFeatures,
    objective: Objective<'_>,
    selection: Selection,
) -> Result<(crate::providers::FitOutput, SelectionRecord)> {
    let num_classes = dataset.manifest.num_classes();
    let t = LogisticTrainer::new(trainer.clone());
    let validator = match selection {
        Selection::Final => None,
        Selection::BestValidation => Validator::new(dataset, recipe)?,
    };
    let Some(validator) = validator else {
        let fit = t.fit(&train.features, &train.labels, num_classes, objective, None)?;
        let record = SelectionRecord {
            policy: Selection::Final,
            selected_step: trainer.steps,
            selected_val_worst_group_accuracy: None,
            curve: Vec::new(),
        };
        return Ok((fit, record));
    };
    let mut best: Option<(usize, f64, LogisticModel)> = None;
    let mut curve = Vec::new();
    let mut observe = |step: usize, model: &LogisticModel| {
        let wga = validator.worst_group(model);
        curve.push((step, wga));
        if best.as_ref().is_none_or(|(_, b, _)| wga > *b) {
            best = Some((step, wga, model.clone()));
        }
    };
    let mut fit = t.fit(&train.features, &train.labels, num_classes, objective, Some(&mut observe))?;
    let (step, wga, model) = best.expect("observer runs at least once");
    fit.model = model;
    Ok((
        fit,
        SelectionRecord {
            policy: Selection::BestValidation,
            selected_step: step,
            selected_val_worst_group_accuracy: Some(wga),
            curve,
        },
    ))
}

fn outcome(
    method: &str,
    recipe: FeatureRecipe,
    dataset: &Dataset,
    fit: crate::providers::FitOutput,
    selection: SelectionRecord,
) -> TrainOutcome {
    TrainOutcome {
        classifier: PooledLogisticClassifier {
            recipe,
            channels: channels(dataset),
            model: fit.model,
        },
        method: method.into(),
        selection,
        loss_trace: fit.loss_trace,
        group_weight_trace: fit.group_weight_trace,
        absent_group_steps: fit.absent_group_steps,
        error_set_size: None,
        warnings: Vec::new(),
    }
}

/// Empirical risk minimization on the training split.
pub fn erm_fit(trainer: &TrainerConfig, recipe: FeatureRecipe, dataset: &Dataset, selection: Selection) -> Result<TrainOutcome> {
    let (_, train) = split_features(dataset, recipe, Split::Train)?;
    let (fit, sel) = fit_selected(
        trainer,
        recipe,
        dataset,
        &train,
        Objective::Weighted { sample_weights: None },
        selection,
    )?;
    Ok(outcome("erm", recipe, dataset, fit, sel))
}

/// ERM, keeping the final model.
pub fn erm_train(trainer: &TrainerConfig, recipe: FeatureRecipe, dataset: &Dataset) -> Result<PooledLogisticClassifier> {
    Ok(erm_fit(trainer, recipe, dataset, Selection::Final)?.classifier)
}

pub const DEFAULT_LAMBDA_UP: f64 = 20.0;

/// Just-train-twice: an ERM pass finds the misclassified training samples,
/// then a fresh model is trained with those samples weighted by `lambda_up`.
///
/// `phase1` configures the identification pass (defaults to `trainer`).
pub fn jtt_fit(
    trainer: &TrainerConfig,
    phase1: Option<&TrainerConfig>,
    recipe: FeatureRecipe,
    dataset: &Dataset,
    lambda_up: f64,
    selection: Selection,
) -> Result<TrainOutcome> {
    if !(lambda_up >= 1.0) || !lambda_up.is_finite() {
        return Err(Error::invalid(format!("upweight factor must be >= 1, got {lambda_up}")));
    }
    let (_, train) = split_features(dataset, recipe, Split::Train)?;
    let num_classes = dataset.manifest.num_classes();
    let phase1_cfg = phase1.unwrap_or(trainer);
    let first = LogisticTrainer::new(phase1_cfg.clone()).fit(
        &train.features,
        &train.labels,
        num_classes,
        Objective::Weighted { sample_weights: None },
        None,
    )?;
    let errors: Vec<bool> = (0..train.labels.len())
        .map(|i| argmax(&first.model.predict_proba(train.features.row(i))) != train.labels[i])
        .collect();
    let error_count = errors.iter().filter(|&&e| e).count();
    if error_count == 0 {
        log::warn!("phase-1 model makes no training errors; returning it unchanged");
        let record = SelectionRecord {
            policy: Selection::Final,
            selected_step: phase1_cfg.steps,
            selected_val_worst_group_accuracy: None,
            curve: Vec::new(),
        };
        let mut out = outcome("jtt", recipe, dataset, first, record);
        out.error_set_size = Some(0);
        out.warnings.push("empty error set: phase-1 model returned".into());
        return Ok(out);
    }
    let weights: Vec<f64> = errors.iter().map(|&e| if e { lambda_up } else { 1.0 }).collect();
    let (fit, sel) = fit_selected(
        trainer,
        recipe,
        dataset,
        &train,
        Objective::Weighted {
            sample_weights: Some(&weights),
        },
        selection,
    )?;
    let mut out = outcome("jtt", recipe, dataset, fit, sel);
    out.error_set_size = Some(error_count);
    Ok(out)
}

pub const DEFAULT_ETA: f64 = 0.01;

/// Group-robust training. `train_groups` holds one group name per training
/// sample, in training-split order.
pub fn groupdro_fit(
    trainer: &TrainerConfig,
    recipe: FeatureRecipe,
    dataset: &Dataset,
    train_groups: &[String],
    eta: f64,
    selection: Selection,
) -> Result<TrainOutcome> {
    let (idx, train) = split_features(dataset, recipe, Split::Train)?;
    if train_groups.len() != idx.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} group ids for {} training samples",
            train_groups.len(),
            idx.len()
        )));
    }
    let names: Vec<&String> = train_groups.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<&String, usize> = names.iter().enumerate().map(|(i, g)| (*g, i)).collect();
    let groups: Vec<usize> = train_groups.iter().map(|g| index[g]).collect();
    let (fit, sel) = fit_selected(
        trainer,
        recipe,
        dataset,
        &train,
        Objective::GroupDro {
            groups: &groups,
            num_groups: names.len(),
            eta,
        },
        selection,
    )?;
    let mut out = outcome("groupdro", recipe, dataset, fit, sel);
    if out.absent_group_steps > 0 {
        out.warnings.push(format!(
            "{} steps had a group absent from the batch (its loss was taken as 0)",
            out.absent_group_steps
        ));
    }
    Ok(out)
}

/// Ground-truth group names of the training split.
pub fn ground_truth_train_groups(manifest: &DatasetManifest) -> Result<Vec<String>> {
    manifest
        .split_indices(Split::Train)
        .into_iter()
        .map(|i| {
            let r = &manifest.records[i];
            manifest
                .group_id(r)
                .ok_or_else(|| Error::invalid(format!("training sample `{}` has no attribute", r.id)))
        })
        .collect()
}

/// Grouped metrics of any predictor on `split`, against ground-truth groups
/// and training-set group counts.
pub fn evaluate_predictions(manifest: &DatasetManifest, indices: &[usize], predictions: &[usize]) -> Result<GroupedMetrics> {
    let labels: Vec<usize> = indices.iter().map(|&i| manifest.records[i].label).collect();
    let groups = indices
        .iter()
        .map(|&i| {
            let r = &manifest.records[i];
            manifest
                .group_id(r)
                .ok_or_else(|| Error::invalid(format!("sample `{}` has no ground-truth attribute", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    GroupedMetrics::compute(predictions, &labels, &groups, &manifest.train_counts_by_name())
}

/// Grouped metrics of a classifier on a split.
pub fn evaluate_classifier(
    classifier: &dyn crate::providers::Classifier,
    dataset: &Dataset,
    split: Split,
) -> Result<(Vec<usize>, GroupedMetrics)> {
    let idx = dataset.split_indices(split);
    let preds = idx
        .iter()
        .map(|&i| Ok(argmax(&classifier.predict_proba(&dataset.images[i])?)))
        .collect::<Result<Vec<_>>>()?;
    let metrics = evaluate_predictions(&dataset.manifest, &idx, &preds)?;
    Ok((preds, metrics))
}

// ---------------------------------------------------------------------------
// Zero-shot
// ---------------------------------------------------------------------------

/// Prompt templates. `{class}`, `{keyword}` and `{group}` are substituted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub base: String,
    pub keyword: String,
    pub group: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            base: "a photo of a {class}".into(),
            keyword: "a photo of a {class} {keyword}".into(),
            group: "a photo of a {class} on a {group} background".into(),
        }
    }
}

impl PromptTemplates {
    pub fn base_prompt(&self, class: &str) -> String {
        self.base.replace("{class}", class)
    }

    pub fn keyword_prompt(&self, class: &str, keyword: &str) -> String {
        self.keyword.replace("{class}", class).replace("{keyword}", keyword)
    }

    pub fn group_prompt(&self, class: &str, group: &str) -> String {
        self.group.replace("{class}", class).replace("{group}", group)
    }

    fn check(&self) -> Result<()> {
        if !self.keyword.contains("{class}") || !self.keyword.contains("{keyword}") {
            return Err(Error::invalid("keyword template needs {class} and {keyword} slots"));
        }
        if !self.base.contains("{class}") {
            return Err(Error::invalid("base template needs a {class} slot"));
        }
        Ok(())
    }
}

/// Name of the pseudo-attribute assigned when the base prompt wins.
pub const BASE_PSEUDO_ATTRIBUTE: &str = "base";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInference {
    pub sample_ids: Vec<String>,
    /// `"<pseudo-attribute>|<class>"` per sample.
    pub groups: Vec<String>,
    /// Samples whose zero-shot call failed; they get the base group.
    pub fallbacks: Vec<String>,
    pub vocabulary: String,
}

/// Assigns every sample a pseudo-attribute: the argmax over the base prompt
/// and one keyword prompt per keyword of the sample's own class. Keyword
/// vocabularies are kept per class.
pub fn infer_groups_zero_shot(
    dataset: &Dataset,
    indices: &[usize],
    keywords: &BTreeMap<String, Vec<String>>,
    zs: &dyn ZeroShotProvider,
    templates: &PromptTemplates,
) -> Result<GroupInference> {
    templates.check()?;
    let header = &dataset.manifest.header;
    for class in &header.class_names {
        if keywords.get(class).is_none_or(|k| k.is_empty()) {
            return Err(Error::invalid(format!("no keyword for class `{class}`")));
        }
    }
    let mut out = GroupInference {
        sample_ids: Vec::with_capacity(indices.len()),
        groups: Vec::with_capacity(indices.len()),
        fallbacks: Vec::new(),
        vocabulary: "per-class".into(),
    };
    for &i in indices {
        let r = &dataset.manifest.records[i];
        let class = &header.class_names[r.label];
        let kws = &keywords[class];
        let mut prompts = vec![templates.base_prompt(class)];
        prompts.extend(kws.iter().map(|k| templates.keyword_prompt(class, k)));
        let pseudo = match zs.classify(&dataset.images[i], &prompts) {
            Ok(p) => match argmax(&p) {
                0 => BASE_PSEUDO_ATTRIBUTE.to_string(),
                j => kws[j - 1].clone(),
            },
            Err(e) => {
                log::warn!("zero-shot failed on `{}`: {e}", r.id);
                out.fallbacks.push(r.id.clone());
                BASE_PSEUDO_ATTRIBUTE.to_string()
            }
        };
        out.sample_ids.push(r.id.clone());
        out.groups.push(format!("{pseudo}|{class}"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    Base,
    GroupInformed,
    KeywordAugmented,
}

impl std::str::FromStr for PromptStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(PromptStrategy::Base),
            "group_informed" | "group-informed" => Ok(PromptStrategy::GroupInformed),
            "keyword_augmented" | "keyword-augmented" => Ok(PromptStrategy::KeywordAugmented),
            other => Err(Error::invalid(format!("unknown prompt strategy `{other}`"))),
        }
    }
}

/// Prompts per class under a strategy.
pub fn strategy_prompts(
    manifest: &DatasetManifest,
    strategy: PromptStrategy,
    keywords: Option<&BTreeMap<String, Vec<String>>>,
    templates: &PromptTemplates,
) -> Result<Vec<Vec<String>>> {
    let header = &manifest.header;
    header
        .class_names
        .iter()
        .map(|class| match strategy {
            PromptStrategy::Base => Ok(vec![templates.base_prompt(class)]),
            PromptStrategy::GroupInformed => {
                if header.attribute_names.is_empty() {
                    return Err(Error::invalid("group-informed prompts need attribute names"));
                }
                Ok(header
                    .attribute_names
                    .iter()
                    .map(|a| templates.group_prompt(class, a))
                    .collect())
            }
            PromptStrategy::KeywordAugmented => {
                let kws = keywords
                    .and_then(|k| k.get(class))
                    .filter(|k| !k.is_empty())
                    .ok_or_else(|| Error::invalid(format!("keyword-augmented prompts need keywords for `{class}`")))?;
                let mut p = vec![templates.base_prompt(class)];
                p.extend(kws.iter().map(|k| templates.keyword_prompt(class, k)));
                Ok(p)
            }
        })
        .collect()
}

/// Zero-shot class decision: the class owning the most probable prompt.
pub fn zero_shot_predict(zs: &dyn ZeroShotProvider, image: &Image, class_prompts: &[Vec<String>]) -> Result<usize> {
    let flat: Vec<String> = class_prompts.iter().flatten().cloned().collect();
    let probs = zs.classify(image, &flat)?;
    let mut per_class = Vec::with_capacity(class_prompts.len());
    let mut offset = 0;
    for prompts in class_prompts {
        let best = probs[offset..offset + prompts.len()]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        per_class.push(best);
        offset += prompts.len();
    }
    Ok(argmax(&per_class))
}

/// Grouped metrics of a zero-shot classifier on `split` under `strategy`.
pub fn zero_shot_eval(
    dataset: &Dataset,
    split: Split,
    zs: &dyn ZeroShotProvider,
    strategy: PromptStrategy,
    keywords: Option<&BTreeMap<String, Vec<String>>>,
    templates: &PromptTemplates,
) -> Result<GroupedMetrics> {
    let prompts = strategy_prompts(&dataset.manifest, strategy, keywords, templates)?;
    let idx = dataset.split_indices(split);
    let preds = idx
        .iter()
        .map(|&i| zero_shot_predict(zs, &dataset.images[i], &prompts))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&dataset.manifest, &idx, &preds)
}
