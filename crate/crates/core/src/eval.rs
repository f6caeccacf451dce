//! Full-ranking Recall@K and NDCG@K with train-item masking.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Forward;
use crate::dataset::{InteractionDataset, ItemId, UserId};
use crate::error::{Error, Result};
use crate::par;
use crate::sparse::dot;

pub const DEFAULT_KS: [usize; 2] = [10, 20];

/// Top-`k` unmasked items by `scores`, descending, ties to the lowest id.
/// `mask` must be sorted.
pub fn top_k(scores: &[f64], mask: &[ItemId], k: usize) -> Vec<ItemId> {
    let mut cand: Vec<(f64, ItemId)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.binary_search(&(*i as ItemId)).is_err())
        .map(|(i, &s)| (s, i as ItemId))
        .collect();
    let order = |a: &(f64, ItemId), b: &(f64, ItemId)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(order);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Scores every item for `u`, masks `mask` (the user's train positives) and
/// returns the top `k`.
pub fn rank_items(forward: &Forward, u: UserId, mask: &[ItemId], k: usize) -> Vec<ItemId> {
    let eu = forward.users.row(u as usize);
    let scores: Vec<f64> = (0..forward.items.rows).map(|i| dot(eu, forward.items.row(i))).collect();
    top_k(&scores, mask, k)
}

/// `|topk[..k] ∩ relevant| / |relevant|`. `relevant` must be sorted.
pub fn recall_at_k(topk: &[ItemId], relevant: &[ItemId], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = topk.iter().take(k).filter(|i| relevant.binary_search(i).is_ok()).count();
    hits as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with 1-based ranks in the log₂(r + 1) discount.
/// `relevant` must be sorted.
pub fn ndcg_at_k(topk: &[ItemId], relevant: &[ItemId], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let dcg: f64 = topk
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..k.min(relevant.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / ideal
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Validation,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub users_evaluated: usize,
}

impl MetricReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(0.0)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(0.0)
    }
}

/// Averages Recall@K / NDCG@K over users with a non-empty held-out set.
pub fn evaluate(forward: &Forward, ds: &InteractionDataset, split: EvalSplit, ks: &[usize]) -> MetricReport {
    let relevant = match split {
        EvalSplit::Validation => ds.validation_by_user(),
        EvalSplit::Test => ds.test_by_user(),
    };
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let users: Vec<UserId> = (0..ds.user_count as UserId).filter(|&u| !relevant[u as usize].is_empty()).collect();
    let per_user: Vec<Vec<(f64, f64)>> = par::map_slice(&users, |&u| {
        let top = rank_items(forward, u, ds.user_pos(u), kmax);
        let rel = &relevant[u as usize];
        ks.iter().map(|&k| (recall_at_k(&top, rel, k), ndcg_at_k(&top, rel, k))).collect()
    });
    let mut report = MetricReport { users_evaluated: users.len(), ..Default::default() };
    for (j, &k) in ks.iter().enumerate() {
        let n = users.len().max(1) as f64;
        report.recall.insert(k, per_user.iter().map(|v| v[j].0).sum::<f64>() / n);
        report.ndcg.insert(k, per_user.iter().map(|v| v[j].1).sum::<f64>() / n);
    }
    report
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub dataset: String,
    pub sampler: String,
    pub seed: u64,
    pub metrics: MetricReport,
}

pub const RESULTS_HEADER: &str = "run_id,dataset,sampler,seed,recall@10,ndcg@10,recall@20,ndcg@20";

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = fs::File::create(path)?;
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.run_id,
            r.dataset,
            r.sampler,
            r.seed,
            r.metrics.recall_at(10),
            r.metrics.ndcg_at(10),
            r.metrics.recall_at(20),
            r.metrics.ndcg_at(20)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (n − 1); zero for a single value.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub recall: BTreeMap<usize, MeanStd>,
    pub ndcg: BTreeMap<usize, MeanStd>,
}

pub fn aggregate(rows: &[ResultRow]) -> Result<Aggregate> {
    if rows.is_empty() {
        return Err(Error::invalid("no result rows to aggregate"));
    }
    let ks: Vec<usize> = rows[0].metrics.recall.keys().copied().collect();
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for k in ks {
        let r: Vec<f64> = rows.iter().map(|x| x.metrics.recall_at(k)).collect();
        let n: Vec<f64> = rows.iter().map(|x| x.metrics.ndcg_at(k)).collect();
        recall.insert(k, MeanStd::of(&r));
        ndcg.insert(k, MeanStd::of(&n));
    }
    Ok(Aggregate { runs: rows.len(), seeds: rows.iter().map(|r| r.seed).collect(), recall, ndcg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Dense;

    #[test]
    fn rank_simple_and_masked() {
        let f = Forward {
            users: Dense::from_vec(1, 1, vec![1.0]),
            items: Dense::from_vec(3, 1, vec![0.9, 0.1, 0.5]),
        };
        assert_eq!(rank_items(&f, 0, &[], 2), vec![0, 2]);
        assert_eq!(rank_items(&f, 0, &[0], 2), vec![2, 1]);
    }

    #[test]
    fn ties_break_to_lowest_id() {
        assert_eq!(top_k(&[1.0, 2.0, 2.0, 2.0], &[], 2), vec![1, 2]);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[1, 2, 3], &[2, 9], 3), 0.5);
        assert_eq!(recall_at_k(&[1, 2, 3], &[1, 3], 3), 1.0);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[7, 1, 2], &[7], 10), 1.0);
        assert!((ndcg_at_k(&[1, 7, 2], &[7], 10) - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&[1, 2], &[7], 10), 0.0);
    }

    #[test]
    fn ndcg_perfect_iff_top_slots_relevant() {
        assert_eq!(ndcg_at_k(&[3, 1, 9, 8], &[1, 3], 4), 1.0);
        assert!(ndcg_at_k(&[3, 9, 1, 8], &[1, 3], 4) < 1.0);
        // More relevant items than K: all K slots relevant is ideal.
        assert_eq!(ndcg_at_k(&[1, 2], &[1, 2, 3, 4], 2), 1.0);
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
    }
}
