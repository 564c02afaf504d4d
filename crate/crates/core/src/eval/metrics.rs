//! Ranking and classification metrics.

use super::{EvalError, Result};

/// `Σ_{i≤k} (2^gᵢ − 1) / log₂(i + 1)` over the first `k` ranked gains.
pub fn dcg_at_k(ranked_gains: &[f64], k: usize) -> f64 {
    ranked_gains
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| (2f64.powf(*g) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// DCG of the ranking divided by the DCG of `pool` sorted by gain. `pool`
/// holds every judged gain for the query, retrieved or not. Returns 0 when
/// no judged document has positive gain.
pub fn ndcg_at_k(ranked_gains: &[f64], pool: &[f64], k: usize) -> f64 {
    let mut ideal = pool.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg_at_k(&ideal, k);
    if idcg <= 0.0 {
        return 0.0;
    }
    (dcg_at_k(ranked_gains, k) / idcg).min(1.0)
}

/// NDCG where the ranked list itself is the whole judged pool.
pub fn ndcg_of_ranking(ranked_gains: &[f64], k: usize) -> f64 {
    ndcg_at_k(ranked_gains, ranked_gains, k)
}

/// Average precision of one ranking over binary relevance; `total_relevant`
/// counts relevant documents including ones that were not retrieved.
pub fn average_precision(ranked_relevant: &[bool], total_relevant: usize) -> Option<f64> {
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, rel) in ranked_relevant.iter().enumerate() {
        if *rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

/// Mean AP over queries with at least one relevant document, plus the
/// number of queries left out for having none.
pub fn mean_average_precision(lists: &[(Vec<bool>, usize)]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for (ranked, total) in lists {
        match average_precision(ranked, *total) {
            Some(ap) => {
                sum += ap;
                n += 1;
            }
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} queries without relevant documents excluded from mAP");
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, excluded)
}

/// Fraction of the relevant documents found in the top `k`.
pub fn recall_at_k(ranked_relevant: &[bool], total_relevant: usize, k: usize) -> Option<f64> {
    if total_relevant == 0 {
        return None;
    }
    let hits = ranked_relevant.iter().take(k).filter(|r| **r).count();
    Some(hits as f64 / total_relevant as f64)
}

/// ROC-AUC as the Mann-Whitney statistic: the probability that a random
/// positive outscores a random negative, ties counting one half. Computed
/// from midranks in `O(n log n)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::Invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Invalid("NaN score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}
