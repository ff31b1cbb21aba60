//! Randomized comparison of the metric implementations against naive
//! reference computations.

use std::collections::{BTreeMap, BTreeSet};

use grounded_audit::metrics::{adjusted_average_accuracy, worst_group_accuracy, GroupedMetrics};
use grounded_audit::model::BinaryMask;
use grounded_audit::overlap::iou;
use grounded_audit::slicing::{precision_at_k, rank_slice_members, SliceAssignment};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 1000;
const TOL: f64 = 1e-12;

struct Instance {
    preds: Vec<usize>,
    labels: Vec<usize>,
    groups: Vec<String>,
    train_counts: BTreeMap<String, usize>,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(1..=500);
    let num_groups = rng.random_range(1..=8);
    let classes = rng.random_range(2..=4);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    // Accuracy varies by instance so that all-correct and all-wrong groups occur.
    let p_correct: f64 = rng.random();
    let preds = labels
        .iter()
        .map(|&y| if rng.random_bool(p_correct) { y } else { (y + rng.random_range(1..classes)) % classes })
        .collect();
    let groups: Vec<String> = (0..n).map(|_| format!("g{}", rng.random_range(0..num_groups))).collect();
    let present: BTreeSet<&String> = groups.iter().collect();
    let train_counts = present
        .into_iter()
        .map(|g| (g.clone(), rng.random_range(1..=1000)))
        .collect();
    Instance {
        preds,
        labels,
        groups,
        train_counts,
    }
}

/// (correct, total) per group by a linear scan for each distinct group.
fn naive_counts(inst: &Instance) -> Vec<(String, usize, usize)> {
    let mut names: Vec<String> = Vec::new();
    for g in &inst.groups {
        if !names.contains(g) {
            names.push(g.clone());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mut correct = 0;
            let mut total = 0;
            for i in 0..inst.labels.len() {
                if inst.groups[i] == name {
                    total += 1;
                    if inst.preds[i] == inst.labels[i] {
                        correct += 1;
                    }
                }
            }
            (name, correct, total)
        })
        .collect()
}

fn naive_worst(inst: &Instance) -> f64 {
    naive_counts(inst)
        .iter()
        .map(|(_, c, t)| *c as f64 / *t as f64)
        .fold(f64::INFINITY, f64::min)
}

fn naive_adjusted(inst: &Instance) -> f64 {
    let total: usize = inst.train_counts.values().sum();
    naive_counts(inst)
        .iter()
        .map(|(g, c, t)| inst.train_counts[g] as f64 / total as f64 * (*c as f64 / *t as f64))
        .sum()
}

#[test]
fn worst_group_adjusted_and_gap_match_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..INSTANCES {
        let inst = instance(&mut rng);
        let wga = worst_group_accuracy(&inst.preds, &inst.labels, &inst.groups).unwrap();
        let aaa = adjusted_average_accuracy(&inst.preds, &inst.labels, &inst.groups, &inst.train_counts).unwrap();
        let m = GroupedMetrics::compute(&inst.preds, &inst.labels, &inst.groups, &inst.train_counts).unwrap();
        let (w, a) = (naive_worst(&inst), naive_adjusted(&inst));
        assert!((wga - w).abs() <= TOL, "{wga} vs {w}");
        assert!((aaa - a).abs() <= TOL, "{aaa} vs {a}");
        assert!((m.worst_group_accuracy - w).abs() <= TOL);
        assert!((m.adjusted_average_accuracy - a).abs() <= TOL);
        assert!((m.gap - (a - w)).abs() <= TOL);
        let correct = inst.preds.iter().zip(&inst.labels).filter(|(p, y)| p == y).count();
        assert!((m.average_accuracy - correct as f64 / inst.labels.len() as f64).abs() <= TOL);
    }
}

fn random_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), density: f64) -> BinaryMask {
    BinaryMask::from_fn(shape, |_| rng.random_bool(density))
}

#[test]
fn iou_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..INSTANCES {
        let shape = (rng.random_range(1..=24), rng.random_range(1..=24));
        let (da, db) = (rng.random::<f64>(), rng.random::<f64>());
        let a = random_mask(&mut rng, shape, da);
        let b = random_mask(&mut rng, shape, db);
        let (mut inter, mut union) = (0, 0);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                if a.get(r, c) && b.get(r, c) {
                    inter += 1;
                }
                if a.get(r, c) || b.get(r, c) {
                    union += 1;
                }
            }
        }
        let expected = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let got = iou(&a, &b).unwrap();
        assert!((got - expected).abs() <= TOL);
        assert_eq!(got, iou(&b, &a).unwrap());
    }
}

#[test]
fn precision_at_k_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=500);
        let slices = rng.random_range(1..=8);
        let k = rng.random_range(1..=20);
        // Coarse responsibilities so that ties are common.
        let resp = Array2::from_shape_fn((n, slices), |_| rng.random_range(0..5) as f64 / 4.0);
        let ids: Vec<String> = (0..n).map(|i| format!("s{:04}", rng.random_range(0..10_000) * 1000 + i)).collect();
        let truth_count = rng.random_range(1..=4);
        let truth: Vec<BTreeSet<usize>> = (0..truth_count)
            .map(|_| (0..n).filter(|_| rng.random_bool(0.2)).collect())
            .collect();

        let assignment = SliceAssignment {
            responsibilities: resp.clone(),
        };
        let rankings: Vec<Vec<usize>> = (0..slices)
            .map(|s| rank_slice_members(&assignment, s, &ids).unwrap())
            .collect();
        let got = precision_at_k(&rankings, &truth, k).unwrap();

        // Reference: repeated selection of the best remaining member.
        let top_k = |s: usize| -> Vec<usize> {
            let mut taken = vec![false; n];
            let mut out = Vec::new();
            for _ in 0..k.min(n) {
                let mut best: Option<usize> = None;
                for i in 0..n {
                    if taken[i] {
                        continue;
                    }
                    best = match best {
                        None => Some(i),
                        Some(b) if resp[[i, s]] > resp[[b, s]] || (resp[[i, s]] == resp[[b, s]] && ids[i] < ids[b]) => Some(i),
                        keep => keep,
                    };
                }
                let b = best.unwrap();
                taken[b] = true;
                out.push(b);
            }
            out
        };
        let tops: Vec<Vec<usize>> = (0..slices).map(top_k).collect();
        let mut hits_sum = 0usize;
        for t in &truth {
            hits_sum += tops.iter().map(|top| top.iter().filter(|i| t.contains(i)).count()).max().unwrap();
        }
        let expected = hits_sum as f64 / (k * truth.len()) as f64;
        assert!((got - expected).abs() <= TOL, "{got} vs {expected}");
    }
}
