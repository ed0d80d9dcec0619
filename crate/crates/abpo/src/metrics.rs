//! Ranking quality, popularity-aware diversity, and exposure-matching rates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::logging::{BanditLog, UserSequence};
use crate::policy::{CandidateSet, Context, ItemId, PolicyParams};

/// Add-one smoothed item popularity with the derived `-ln p(x)` scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityModel {
    pub probs: Vec<f64>,
    pub neg_log: Vec<f64>,
    pub min_neg_log: f64,
    pub max_neg_log: f64,
}

/// Estimate popularity from the training-visible portion of each sequence
/// (everything before the held-out target), with add-one smoothing.
pub fn popularity_estimate(seqs: &[UserSequence], catalog_size: usize) -> PopularityModel {
    let mut counts = vec![1.0f64; catalog_size];
    let mut total = catalog_size as f64;
    for seq in seqs {
        for item in seq.eval_history() {
            counts[item.index()] += 1.0;
            total += 1.0;
        }
    }
    let probs: Vec<f64> = counts.iter().map(|c| c / total).collect();
    let neg_log: Vec<f64> = probs.iter().map(|p| -p.ln()).collect();
    let min_neg_log = neg_log.iter().copied().fold(f64::INFINITY, f64::min);
    let max_neg_log = neg_log.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    PopularityModel {
        probs,
        neg_log,
        min_neg_log,
        max_neg_log,
    }
}

impl PopularityModel {
    /// Position of an item's `-ln p` on the dataset-level min-max scale.
    fn scaled(&self, item: ItemId) -> f64 {
        let span = self.max_neg_log - self.min_neg_log;
        if span <= 0.0 {
            return 0.0;
        }
        (self.neg_log[item.index()] - self.min_neg_log) / span
    }
}

/// A policy's top-K recommendation list for one evaluation context.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub context: Context,
    pub items: Vec<ItemId>,
    pub target: ItemId,
}

/// Rank a candidate set by policy probability, descending, ties broken by
/// ascending item id, and keep the top `k`. The candidate set's positive
/// marks the evaluation target.
pub fn rank_candidates(
    policy: &PolicyParams,
    ctx: &Context,
    cands: &CandidateSet,
    k: usize,
) -> Result<RankedList> {
    if k < 1 || k > cands.len() {
        return Err(Error::Config(format!(
            "k must lie in [1, {}], got {k}",
            cands.len()
        )));
    }
    let target = cands
        .positive_item()
        .ok_or_else(|| Error::Config("evaluation candidate set has no target".into()))?;
    let dist = policy.item_distribution(ctx, cands)?;
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        dist.probs[b]
            .partial_cmp(&dist.probs[a])
            .unwrap()
            .then(cands.items[a].cmp(&cands.items[b]))
    });
    Ok(RankedList {
        context: ctx.clone(),
        items: order[..k].iter().map(|&i| cands.items[i]).collect(),
        target,
    })
}

/// Fraction of lists whose top-k contains the target.
pub fn hit_rate_at_k(lists: &[RankedList], k: usize) -> f64 {
    let hits = lists
        .iter()
        .filter(|l| l.items.iter().take(k).any(|&it| it == l.target))
        .count();
    hits as f64 / lists.len() as f64
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` when the target sits at
/// `rank <= k` (1-based), else 0; averaged over lists.
pub fn ndcg_at_k(lists: &[RankedList], k: usize) -> f64 {
    let total: f64 = lists
        .iter()
        .map(|l| {
            l.items
                .iter()
                .take(k)
                .position(|&it| it == l.target)
                .map_or(0.0, |idx| 1.0 / ((idx + 2) as f64).log2())
        })
        .sum();
    total / lists.len() as f64
}

/// Popularity-aware diversity: mean `-ln p(x)` over each list's top-k items,
/// min-max normalized by the dataset-level per-item scale, on 0-100. Returns
/// 0 when popularity is uniform (no scale to normalize against).
pub fn diversity_at_k(lists: &[RankedList], pop: &PopularityModel, k: usize) -> f64 {
    let total: f64 = lists
        .iter()
        .map(|l| {
            let mean: f64 =
                l.items.iter().take(k).map(|&it| pop.scaled(it)).sum::<f64>() / k as f64;
            mean * 100.0
        })
        .sum();
    total / lists.len() as f64
}

/// Monte-Carlo exposure-matching rates: the fraction of policy samples that
/// reproduce the logged exposure, separately over positive-response and
/// no-response examples. A stratum with no examples reports NaN.
pub fn matching_rates<R: Rng>(
    policy: &PolicyParams,
    log: &BanditLog,
    samples_per_example: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for ex in &log.examples {
        let dist = policy.item_distribution(&ex.context, &ex.candidates)?;
        let stratum = usize::from(ex.y);
        for _ in 0..samples_per_example {
            let (item, _) = dist.sample(rng);
            hits[stratum] += usize::from(item == ex.a_log);
            totals[stratum] += 1;
        }
    }
    let rate = |s: usize| hits[s] as f64 / totals[s] as f64;
    Ok((rate(1), rate(0)))
}
