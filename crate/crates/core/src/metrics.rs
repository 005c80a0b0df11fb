//! Accuracy, hit@k, generalized (seen/unseen) metrics and class-wise cross-validation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Hyperparams, MetricMode, PoolView, SeenSet};
use crate::numlin::DenseMatrix;
use crate::solver::{self, predict_all};
use crate::superclass::fit_with_superclasses;

fn check_lengths(preds: usize, truth: usize) -> Result<()> {
    if preds != truth {
        return Err(Error::dim(format!(
            "{preds} predictions for {truth} labels"
        )));
    }
    if truth == 0 {
        return Err(Error::invalid("accuracy of an empty label set"));
    }
    Ok(())
}

pub fn multiway_accuracy(preds: &[usize], truth: &[usize], mode: MetricMode) -> Result<f64> {
    check_lengths(preds.len(), truth.len())?;
    match mode {
        MetricMode::PerSample => {
            let hits = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
            Ok(hits as f64 / truth.len() as f64)
        }
        MetricMode::PerClass => {
            let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
            for (p, t) in preds.iter().zip(truth) {
                let entry = per_class.entry(*t).or_default();
                entry.1 += 1;
                if p == t {
                    entry.0 += 1;
                }
            }
            let total: f64 = per_class
                .values()
                .map(|&(hit, n)| hit as f64 / n as f64)
                .sum();
            Ok(total / per_class.len() as f64)
        }
    }
}

pub fn topk_accuracy(ranked: &[Vec<usize>], truth: &[usize], k: usize) -> Result<f64> {
    check_lengths(ranked.len(), truth.len())?;
    if k == 0 {
        return Err(Error::invalid("hit@k needs k >= 1"));
    }
    let mut hits = 0;
    for (i, (list, t)) in ranked.iter().zip(truth).enumerate() {
        if list.len() < k {
            return Err(Error::invalid(format!(
                "ranking for sample {i} has {} labels, fewer than k={k}",
                list.len()
            )));
        }
        if list[..k].contains(t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / truth.len() as f64)
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

/// Seen/unseen accuracies over a joint label space and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GzslReport {
    pub acc_s: Option<f64>,
    pub acc_u: Option<f64>,
    pub hm: f64,
}

impl GzslReport {
    pub fn from_accuracies(acc_s: Option<f64>, acc_u: Option<f64>) -> Self {
        let hm = match (acc_s, acc_u) {
            (Some(s), Some(u)) => harmonic_mean(s, u),
            _ => 0.0,
        };
        GzslReport { acc_s, acc_u, hm }
    }
}

/// `seen_mask[i]` marks samples whose true class is a seen class.
pub fn generalized_metrics(
    preds: &[usize],
    truth: &[usize],
    seen_mask: &[bool],
) -> Result<GzslReport> {
    check_lengths(preds.len(), truth.len())?;
    if seen_mask.len() != truth.len() {
        return Err(Error::dim(format!(
            "seen mask has {} entries for {} samples",
            seen_mask.len(),
            truth.len()
        )));
    }
    let side = |want_seen: bool| {
        let (mut hit, mut n) = (0usize, 0usize);
        for ((p, t), &s) in preds.iter().zip(truth).zip(seen_mask) {
            if s == want_seen {
                n += 1;
                if p == t {
                    hit += 1;
                }
            }
        }
        (n > 0).then(|| hit as f64 / n as f64)
    };
    Ok(GzslReport::from_accuracies(side(true), side(false)))
}

/// Serialised metric summary; absent fields are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_per_class: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_at_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_u: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hm: Option<f64>,
}

/// One grid point for cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub superclass_r: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub point: GridPoint,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best: Hyperparams,
    pub table: Vec<CvRow>,
    /// Seen classes held out in each fold.
    pub folds: Vec<Vec<usize>>,
}

struct FoldData {
    train: SeenSet,
    held_features: DenseMatrix,
    held_prototypes: DenseMatrix,
    held_truth: Vec<usize>,
}

fn select_rows(m: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

fn split_fold(seen: &SeenSet, held: &[usize]) -> Result<FoldData> {
    let p = seen.p();
    let mut new_index = vec![None; p];
    let mut train_classes = Vec::new();
    let mut held_index = vec![None; p];
    for (pos, &c) in held.iter().enumerate() {
        held_index[c] = Some(pos);
    }
    for c in 0..p {
        if held_index[c].is_none() {
            new_index[c] = Some(train_classes.len());
            train_classes.push(c);
        }
    }
    let (mut train_rows, mut train_labels) = (Vec::new(), Vec::new());
    let (mut held_rows, mut held_truth) = (Vec::new(), Vec::new());
    for (i, &l) in seen.labels.iter().enumerate() {
        match (new_index[l], held_index[l]) {
            (Some(nl), _) => {
                train_rows.push(i);
                train_labels.push(nl);
            }
            (None, Some(hl)) => {
                held_rows.push(i);
                held_truth.push(hl);
            }
            (None, None) => unreachable!(),
        }
    }
    if train_rows.is_empty() || held_rows.is_empty() {
        return Err(Error::invalid(
            "a cross-validation fold has no samples on one side",
        ));
    }
    Ok(FoldData {
        train: SeenSet::new(
            select_rows(&seen.features, &train_rows),
            train_labels,
            select_rows(&seen.prototypes, &train_classes),
        )?,
        held_features: select_rows(&seen.features, &held_rows),
        held_prototypes: select_rows(&seen.prototypes, held),
        held_truth,
    })
}

fn fold_score(fold: &FoldData, hp: &Hyperparams) -> Result<f64> {
    let pool = PoolView {
        features: &fold.held_features,
        prototypes: &fold.held_prototypes,
    };
    let w = match hp.superclass_r {
        Some(r) => {
            let classes = fold.train.p() + pool.q();
            let hp = Hyperparams {
                superclass_r: Some(r.min(classes)),
                ..hp.clone()
            };
            fit_with_superclasses(&fold.train, pool, &hp)?.projection
        }
        None => solver::fit(&fold.train, pool, hp, None)?.0,
    };
    let preds = predict_all(&w, &fold.held_features, &fold.held_prototypes, hp.loss_mode)?;
    multiway_accuracy(&preds, &fold.held_truth, hp.metric_mode)
}

/// Holds out whole seen classes as pseudo-unseen folds and picks the grid
/// point with the highest mean accuracy (ties: smaller alpha, then smaller r).
pub fn cross_validate(
    seen: &SeenSet,
    grid: &[GridPoint],
    base: &Hyperparams,
    folds: usize,
    seed: u64,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    if folds < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    if folds > seen.p() {
        return Err(Error::invalid(format!(
            "{folds} folds but only {} seen classes",
            seen.p()
        )));
    }
    let mut classes: Vec<usize> = (0..seen.p()).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_classes = vec![Vec::new(); folds];
    for (i, c) in classes.into_iter().enumerate() {
        fold_classes[i % folds].push(c);
    }
    for f in &mut fold_classes {
        f.sort_unstable();
    }
    let fold_data = fold_classes
        .iter()
        .map(|held| split_fold(seen, held))
        .collect::<Result<Vec<_>>>()?;

    let mut ordered: Vec<GridPoint> = grid.to_vec();
    ordered.sort_by(|a, b| {
        a.alpha
            .total_cmp(&b.alpha)
            .then(a.superclass_r.cmp(&b.superclass_r))
    });

    let mut table = Vec::with_capacity(ordered.len());
    for point in ordered {
        let scores = fold_data
            .par_iter()
            .enumerate()
            .map(|(f, fold)| {
                let hp = Hyperparams {
                    alpha: point.alpha,
                    transductive: point.alpha > 0.0,
                    superclass_r: point.superclass_r,
                    seed: base.seed ^ (f as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    ..base.clone()
                };
                fold_score(fold, &hp)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        table.push(CvRow {
            point,
            fold_scores: scores,
            mean,
        });
    }
    let best_row = table
        .iter()
        .fold(None::<&CvRow>, |best, row| match best {
            Some(b) if row.mean <= b.mean => Some(b),
            _ => Some(row),
        })
        .expect("grid is non-empty");
    let best = Hyperparams {
        alpha: best_row.point.alpha,
        transductive: best_row.point.alpha > 0.0,
        superclass_r: best_row.point.superclass_r,
        ..base.clone()
    };
    Ok(CvResult {
        best,
        table,
        folds: fold_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let t = [0, 0, 0, 1];
        assert_eq!(
            multiway_accuracy(&t, &t, MetricMode::PerSample).unwrap(),
            1.0
        );
        let p = [0, 0, 0, 0];
        assert_eq!(
            multiway_accuracy(&p, &t, MetricMode::PerSample).unwrap(),
            0.75
        );
        assert_eq!(
            multiway_accuracy(&p, &t, MetricMode::PerClass).unwrap(),
            0.5
        );
        assert_eq!(
            multiway_accuracy(&[1, 1], &[0, 0], MetricMode::PerSample).unwrap(),
            0.0
        );
        assert!(multiway_accuracy(&[1], &[0, 0], MetricMode::PerSample).is_err());
        assert!(multiway_accuracy(&[], &[], MetricMode::PerSample).is_err());
    }

    #[test]
    fn topk_examples() {
        let ranked = vec![vec![2, 0, 1], vec![1, 2, 0]];
        assert_eq!(topk_accuracy(&ranked, &[2, 1], 1).unwrap(), 1.0);
        let ranked = vec![(0..10).collect::<Vec<_>>(); 3];
        assert_eq!(topk_accuracy(&ranked, &[5, 5, 5], 5).unwrap(), 0.0);
        // ranks 1, 3, 5, 7 under k=3 hit twice
        let ranked = vec![
            vec![0, 1, 2, 3, 4, 5, 6],
            vec![1, 2, 0, 3, 4, 5, 6],
            vec![1, 2, 3, 4, 0, 5, 6],
            vec![1, 2, 3, 4, 5, 6, 0],
        ];
        assert_eq!(topk_accuracy(&ranked, &[0; 4], 3).unwrap(), 0.5);
        assert!(topk_accuracy(&[vec![0]], &[0], 2).is_err());
    }

    #[test]
    fn harmonic_mean_examples() {
        let r = GzslReport::from_accuracies(Some(0.837), Some(0.689));
        assert!((r.hm - 0.756).abs() <= 0.0005);
        assert_eq!(harmonic_mean(0.5, 0.5), 0.5);
        assert_eq!(harmonic_mean(0.9, 0.0), 0.0);
        assert_eq!(GzslReport::from_accuracies(Some(0.9), None).hm, 0.0);
    }

    #[test]
    fn generalized_from_predictions() {
        let truth = [0, 1, 2, 3];
        let preds = [0, 2, 2, 2];
        let mask = [true, true, false, false];
        let r = generalized_metrics(&preds, &truth, &mask).unwrap();
        assert_eq!(r.acc_s, Some(0.5));
        assert_eq!(r.acc_u, Some(0.5));
        assert_eq!(r.hm, 0.5);
        let r = generalized_metrics(&[0], &[0], &[true]).unwrap();
        assert_eq!(r.acc_u, None);
        assert_eq!(r.hm, 0.0);
    }

    #[test]
    fn report_omits_absent_fields() {
        let r = MetricsReport {
            acc: Some(0.5),
            ..Default::default()
        };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"acc":0.5}"#);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn balanced_classes_agree(labels in proptest::collection::vec(0usize..4, 1..8), reps in 1usize..4) {
                let truth: Vec<usize> = (0..4).flat_map(|c| std::iter::repeat_n(c, reps)).collect();
                let preds: Vec<usize> = truth.iter().enumerate().map(|(i, &t)| if labels[i % labels.len()] == t { t } else { (t + 1) % 4 }).collect();
                let a = multiway_accuracy(&preds, &truth, MetricMode::PerSample).unwrap();
                let b = multiway_accuracy(&preds, &truth, MetricMode::PerClass).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }

            #[test]
            fn topk_monotone(perms in proptest::collection::vec(Just((0..6).collect::<Vec<usize>>()).prop_shuffle(), 1..10), truth_seed in 0usize..6) {
                let truth: Vec<usize> = (0..perms.len()).map(|i| (i + truth_seed) % 6).collect();
                let mut last = 0.0;
                for k in 1..=6 {
                    let acc = topk_accuracy(&perms, &truth, k).unwrap();
                    prop_assert!(acc >= last);
                    last = acc;
                }
                prop_assert_eq!(last, 1.0);
            }

            #[test]
            fn hm_bounds(s in 0.0f64..=1.0, u in 0.0f64..=1.0) {
                let hm = harmonic_mean(s, u);
                prop_assert!(hm <= s.max(u) + 1e-15);
                prop_assert!(hm >= s.min(u) - 1e-15 || s + u == 0.0);
                prop_assert!((0.0..=1.0).contains(&hm));
                if s == u { prop_assert!((hm - s).abs() < 1e-15); }
            }
        }
    }
}
