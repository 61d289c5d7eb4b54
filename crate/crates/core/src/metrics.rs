//! Ranking and classification metrics.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

/// Fraction of `positives` found in the first `k` entries of `ranked`.
pub fn recall_at_k(ranked: &[usize], positives: &[usize], k: usize) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let pos: HashSet<usize> = positives.iter().copied().collect();
    let hits = ranked.iter().take(k).filter(|i| pos.contains(i)).count();
    hits as f64 / pos.len() as f64
}

/// Binary-gain NDCG: hits at 1-based rank `i` earn `1 / log2(i + 1)`, divided
/// by the gain of `min(k, |positives|)` hits at the top.
pub fn ndcg_at_k(ranked: &[usize], positives: &[usize], k: usize) -> f64 {
    let pos: HashSet<usize> = positives.iter().copied().collect();
    if pos.is_empty() {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| pos.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(pos.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / idcg
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub recall_5: f64,
    pub recall_20: f64,
    pub ndcg_5: f64,
    /// Users with at least one held-out positive.
    pub users: usize,
}

/// Averages over users that have at least one positive.
pub fn ranking_metrics(rankings: &[Vec<usize>], positives: &[Vec<usize>]) -> RankingMetrics {
    let mut m = RankingMetrics::default();
    for (ranked, pos) in rankings.iter().zip(positives) {
        if pos.is_empty() {
            continue;
        }
        m.recall_5 += recall_at_k(ranked, pos, 5);
        m.recall_20 += recall_at_k(ranked, pos, 20);
        m.ndcg_5 += ndcg_at_k(ranked, pos, 5);
        m.users += 1;
    }
    if m.users > 0 {
        let n = m.users as f64;
        m.recall_5 /= n;
        m.recall_20 /= n;
        m.ndcg_5 /= n;
    }
    m
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Positive class is label 1. Empty denominators give 0.
pub fn binary_metrics(predicted: &[usize], gold: &[usize]) -> BinaryMetrics {
    let (mut tp, mut fp, mut fneg, mut correct) = (0, 0, 0, 0);
    for (&p, &g) in predicted.iter().zip(gold) {
        correct += usize::from(p == g);
        match (p == 1, g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    BinaryMetrics {
        accuracy: ratio(correct, gold.len()),
        precision,
        recall,
        f1: f1(precision, recall),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MulticlassMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

/// Macro-F1 is the unweighted mean over all `n_classes` (absent classes
/// count as 0); micro-F1 pools counts over classes.
pub fn multiclass_metrics(predicted: &[usize], gold: &[usize], n_classes: usize) -> MulticlassMetrics {
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&p, &g) in predicted.iter().zip(gold) {
        if p == g {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let macro_f1 = (0..n_classes)
        .map(|c| f1(ratio(tp[c], tp[c] + fp[c]), ratio(tp[c], tp[c] + fneg[c])))
        .sum::<f64>()
        / n_classes.max(1) as f64;
    let (stp, sfp, sfn) = (tp.iter().sum(), fp.iter().sum::<usize>(), fneg.iter().sum::<usize>());
    let micro_f1 = f1(ratio(stp, stp + sfp), ratio(stp, stp + sfn));
    MulticlassMetrics {
        accuracy: ratio(stp, gold.len()),
        macro_f1,
        micro_f1,
    }
}
