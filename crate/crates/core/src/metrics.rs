//! Grouped evaluation metrics.
//!
//! Per-group accuracies are kept as exact counts; floating point only enters
//! when a ratio is reported. Serialized metrics are rounded to four decimal
//! places, and the serialized gap is the difference of the serialized
//! adjusted average and worst-group accuracy, so the identity
//! `gap = adjusted_average - worst` also holds in the JSON.

use std::collections::BTreeMap;

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl GroupAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    /// Exact comparison of two ratios.
    fn less_than(&self, other: &GroupAccuracy) -> bool {
        (self.correct as u128) * (other.total as u128) < (other.correct as u128) * (self.total as u128)
    }
}

fn check_lengths(predictions: &[usize], labels: &[usize], n_groups: usize) -> Result<()> {
    if predictions.len() != labels.len() || labels.len() != n_groups {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions, {} labels, {} group ids",
            predictions.len(),
            labels.len(),
            n_groups
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptySet("evaluation set".into()));
    }
    Ok(())
}

pub fn group_accuracies<G: Ord + Clone>(
    predictions: &[usize],
    labels: &[usize],
    groups: &[G],
) -> Result<BTreeMap<G, GroupAccuracy>> {
    check_lengths(predictions, labels, groups.len())?;
    let mut out: BTreeMap<G, GroupAccuracy> = BTreeMap::new();
    for ((p, y), g) in predictions.iter().zip(labels).zip(groups) {
        let e = out.entry(g.clone()).or_insert(GroupAccuracy { correct: 0, total: 0 });
        e.total += 1;
        e.correct += (p == y) as usize;
    }
    Ok(out)
}

fn worst_of<G: Ord + Clone>(acc: &BTreeMap<G, GroupAccuracy>) -> (G, GroupAccuracy) {
    let mut it = acc.iter();
    let (mut wg, mut wa) = it.next().map(|(g, a)| (g, *a)).expect("non-empty");
    for (g, a) in it {
        if a.less_than(&wa) {
            wg = g;
            wa = *a;
        }
    }
    (wg.clone(), wa)
}

/// Minimum over groups of the per-group accuracy.
pub fn worst_group_accuracy<G: Ord + Clone>(predictions: &[usize], labels: &[usize], groups: &[G]) -> Result<f64> {
    let acc = group_accuracies(predictions, labels, groups)?;
    Ok(worst_of(&acc).1.accuracy())
}

/// Group accuracies weighted by training-set group proportions:
/// `Σ_g (n_g / N) acc_g`, with `N` the total training count over all groups
/// in `train_counts`.
///
/// Every evaluated group must appear in `train_counts`, and every group with a
/// positive training count must be evaluated.
pub fn adjusted_average_accuracy<G: Ord + Clone + std::fmt::Debug>(
    predictions: &[usize],
    labels: &[usize],
    groups: &[G],
    train_counts: &BTreeMap<G, usize>,
) -> Result<f64> {
    let acc = group_accuracies(predictions, labels, groups)?;
    adjusted_from(&acc, train_counts)
}

fn adjusted_from<G: Ord + Clone + std::fmt::Debug>(
    acc: &BTreeMap<G, GroupAccuracy>,
    train_counts: &BTreeMap<G, usize>,
) -> Result<f64> {
    for g in acc.keys() {
        if !train_counts.contains_key(g) {
            return Err(Error::MissingTrainGroup(format!("{g:?}")));
        }
    }
    for (g, &n) in train_counts {
        if n > 0 && !acc.contains_key(g) {
            return Err(Error::EmptyGroup(format!("{g:?}")));
        }
    }
    let total: usize = train_counts.values().sum();
    if total == 0 {
        return Err(Error::EmptySet("training counts".into()));
    }
    Ok(acc
        .iter()
        .map(|(g, a)| train_counts[g] as f64 / total as f64 * a.accuracy())
        .sum())
}

/// Grouped evaluation of one model on one split.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct GroupedMetrics {
    pub per_group: BTreeMap<String, GroupAccuracy>,
    pub worst_group: String,
    pub worst_group_accuracy: f64,
    pub adjusted_average_accuracy: f64,
    /// Plain sample-weighted accuracy on the evaluated split.
    pub average_accuracy: f64,
    /// `adjusted_average_accuracy - worst_group_accuracy`.
    pub gap: f64,
    pub train_counts: BTreeMap<String, usize>,
}

impl GroupedMetrics {
    pub fn compute(
        predictions: &[usize],
        labels: &[usize],
        groups: &[String],
        train_counts: &BTreeMap<String, usize>,
    ) -> Result<Self> {
        let per_group = group_accuracies(predictions, labels, groups)?;
        let (worst_group, worst) = worst_of(&per_group);
        let adjusted = adjusted_from(&per_group, train_counts)?;
        let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
        let worst_group_accuracy = worst.accuracy();
        Ok(GroupedMetrics {
            worst_group,
            worst_group_accuracy,
            adjusted_average_accuracy: adjusted,
            average_accuracy: correct as f64 / labels.len() as f64,
            gap: adjusted - worst_group_accuracy,
            train_counts: train_counts.clone(),
            per_group,
        })
    }
}

/// Rounds to four decimals.
pub fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn units4(v: f64) -> i64 {
    (v * 1e4).round() as i64
}

impl Serialize for GroupedMetrics {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Group {
            correct: usize,
            total: usize,
            accuracy: f64,
        }
        let groups: BTreeMap<&String, Group> = self
            .per_group
            .iter()
            .map(|(g, a)| {
                (
                    g,
                    Group {
                        correct: a.correct,
                        total: a.total,
                        accuracy: round4(a.accuracy()),
                    },
                )
            })
            .collect();
        let gap_units = units4(self.adjusted_average_accuracy) - units4(self.worst_group_accuracy);
        let mut st = s.serialize_struct("GroupedMetrics", 7)?;
        st.serialize_field("per_group", &groups)?;
        st.serialize_field("worst_group", &self.worst_group)?;
        st.serialize_field("worst_group_accuracy", &round4(self.worst_group_accuracy))?;
        st.serialize_field("adjusted_average_accuracy", &round4(self.adjusted_average_accuracy))?;
        st.serialize_field("average_accuracy", &round4(self.average_accuracy))?;
        st.serialize_field("gap", &(gap_units as f64 / 1e4))?;
        st.serialize_field("train_counts", &self.train_counts)?;
        st.end()
    }
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let total = c2(n as u64);
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
