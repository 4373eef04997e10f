//! Set and ranking metrics for multi-label medication prediction.

use std::collections::BTreeSet;

fn as_set(xs: &[usize]) -> BTreeSet<usize> {
    xs.iter().copied().collect()
}

/// `|pred ∩ truth| / |pred ∪ truth|`; two empty sets score 1.
pub fn jaccard(pred: &[usize], truth: &[usize]) -> f64 {
    let (p, t) = (as_set(pred), as_set(truth));
    let union = p.union(&t).count();
    if union == 0 {
        return 1.0;
    }
    p.intersection(&t).count() as f64 / union as f64
}

/// Harmonic mean of precision and recall. Two empty sets score 1; one empty
/// side scores 0.
pub fn f1(pred: &[usize], truth: &[usize]) -> f64 {
    let (p, t) = (as_set(pred), as_set(truth));
    match (p.is_empty(), t.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hit = p.intersection(&t).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let precision = hit / p.len() as f64;
    let recall = hit / t.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Average precision of a score vector against binary labels.
///
/// Labels are ranked by descending score with ties broken by ascending
/// index; the result is the mean of precision@k over the ranks `k` that hold
/// a positive. Returns `None` without positives.
pub fn prauc(probs: &[f64], truth: &[bool]) -> Option<f64> {
    assert_eq!(probs.len(), truth.len(), "prauc: length mismatch");
    let n_pos = truth.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}
