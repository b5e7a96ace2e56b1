use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use taskvec_autodiff::Rng;

use crate::{Error, Result};

fn check_permutation(predicted: &[String], keys: &BTreeMap<String, f64>) -> Result<()> {
    let unique: HashSet<&String> = predicted.iter().collect();
    if unique.len() != predicted.len() || predicted.len() != keys.len() || predicted.iter().any(|id| !keys.contains_key(id)) {
        return Err(Error::Argument(format!(
            "predicted order {predicted:?} is not a permutation of the scored candidates"
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Argument("no candidates to rank".into()));
    }
    if let Some((id, v)) = keys.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Argument(format!("score of `{id}` is {v}")));
    }
    Ok(())
}

/// 1-based position of the best-scoring candidate in `predicted`. When
/// several candidates share the best score, the earliest of them counts.
pub fn avg_rank(predicted: &[String], true_scores: &BTreeMap<String, f64>) -> Result<usize> {
    check_permutation(predicted, true_scores)?;
    let best = true_scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(1 + predicted
        .iter()
        .position(|id| true_scores[id] == best)
        .expect("maximum is attained"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ndcg {
    pub value: f64,
    /// Every relevance is zero, so every order is ideal.
    pub degenerate: bool,
}

/// `Σᵢ rel(predᵢ)/log₂(i+1)` normalized by the relevance-sorted order.
pub fn ndcg(predicted: &[String], relevance: &BTreeMap<String, f64>) -> Result<Ndcg> {
    check_permutation(predicted, relevance)?;
    if let Some((id, v)) = relevance.iter().find(|(_, v)| **v < 0.0) {
        return Err(Error::Argument(format!("relevance of `{id}` is negative ({v})")));
    }
    let discount = |i: usize| ((i + 2) as f64).log2();
    let dcg: f64 = predicted.iter().enumerate().map(|(i, id)| relevance[id] / discount(i)).sum();
    let mut ideal: Vec<f64> = relevance.values().copied().collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().enumerate().map(|(i, r)| r / discount(i)).sum();
    if idcg == 0.0 {
        return Ok(Ndcg {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(Ndcg {
        value: (dcg / idcg).min(1.0),
        degenerate: false,
    })
}

/// `selected / max(all)`.
pub fn performance_rate(selected: f64, all: &[f64]) -> Result<f64> {
    if all.is_empty() {
        return Err(Error::Argument("no candidate performances".into()));
    }
    let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::UndefinedRate(format!("best performance is {max}")));
    }
    Ok(selected / max)
}

/// How raw gains become non-negative relevance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceMapping {
    /// Best → 1, worst → 0; all equal → all 1.
    #[default]
    MinMax,
    /// Subtract the minimum only.
    ShiftOnly,
}

pub fn relevance(scores: &BTreeMap<String, f64>, mapping: RelevanceMapping) -> BTreeMap<String, f64> {
    let lo = scores.values().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .map(|(id, &s)| {
            let r = match mapping {
                RelevanceMapping::MinMax if hi == lo => 1.0,
                RelevanceMapping::MinMax => (s - lo) / (hi - lo),
                RelevanceMapping::ShiftOnly => s - lo,
            };
            (id.clone(), r)
        })
        .collect()
}

/// Mean rank and NDCG of uniformly random orders.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    pub avg_rank: f64,
    pub ndcg: f64,
    /// Standard error of `avg_rank`.
    pub rank_stderr: f64,
    pub trials: usize,
}

/// Monte-Carlo estimate over `trials` seeded shuffles.
pub fn random_baseline(true_scores: &BTreeMap<String, f64>, relevance: &BTreeMap<String, f64>, trials: usize, seed: u64) -> Result<RandomBaseline> {
    if trials == 0 {
        return Err(Error::Argument("random baseline needs at least one trial".into()));
    }
    let mut rng = Rng::derive(seed, 0x7a4d);
    let mut order: Vec<String> = true_scores.keys().cloned().collect();
    let (mut sum, mut sq, mut nd) = (0.0, 0.0, 0.0);
    for _ in 0..trials {
        rng.shuffle(&mut order);
        let r = avg_rank(&order, true_scores)? as f64;
        sum += r;
        sq += r * r;
        nd += ndcg(&order, relevance)?.value;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    Ok(RandomBaseline {
        avg_rank: mean,
        ndcg: nd / n,
        rank_stderr: (var / n).sqrt(),
        trials,
    })
}

/// Ids sorted by `key` descending, ties by ascending id.
pub fn order_by(scores: &BTreeMap<String, f64>) -> Vec<String> {
    let mut ids: Vec<(&String, f64)> = scores.iter().map(|(k, &v)| (k, v)).collect();
    ids.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ids.into_iter().map(|(k, _)| k.clone()).collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
