//! Parametric softmax item policies over explicit candidate sets.
//!
//! A policy scores item `a` in context `x` with the log-linear form
//! `weights[a] . feature(x)` and exposes a temperature-scaled softmax over a
//! candidate set. Log-probabilities, analytic score gradients, categorical
//! sampling with exact propensities, and the self-certainty confidence signal
//! are all derived from that distribution.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Exponential decay applied to the recency half of the context feature.
pub const RECENCY_DECAY: f64 = 0.8;

/// Index into the global item catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemId(pub u32);

impl ItemId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for ItemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Feature dimension induced by a catalog of `catalog_size` items: a
/// normalized bag-of-items block followed by a recency-decay block.
pub fn feature_dim(catalog_size: usize) -> usize {
    2 * catalog_size
}

/// A user context: the interaction prefix plus its derived feature vector.
///
/// The feature is a pure function of the history: counts normalized by the
/// history length in the first `V` entries, and per-item recency weights
/// `RECENCY_DECAY^age` (age 0 = most recent) in the second `V` entries.
/// `support` caches the sorted indices of the nonzero entries; scores and
/// gradients only touch those coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub user_id: u64,
    pub history: Vec<ItemId>,
    pub feature: Vec<f64>,
    support: Vec<usize>,
}

impl Context {
    pub fn from_history(user_id: u64, history: Vec<ItemId>, catalog_size: usize) -> Result<Self> {
        if history.is_empty() {
            return Err(Error::Config("context history must be non-empty".into()));
        }
        if let Some(bad) = history.iter().find(|it| it.index() >= catalog_size) {
            return Err(Error::Config(format!(
                "history item {bad} outside catalog of size {catalog_size}"
            )));
        }
        let mut feature = vec![0.0; feature_dim(catalog_size)];
        let inv_len = 1.0 / history.len() as f64;
        for item in &history {
            feature[item.index()] += inv_len;
        }
        let mut decay = 1.0;
        for item in history.iter().rev() {
            feature[catalog_size + item.index()] += decay;
            decay *= RECENCY_DECAY;
        }
        Ok(Self::from_raw_feature(user_id, history, feature))
    }

    /// Wrap an explicit feature vector (used by tests and fixtures).
    pub fn from_raw_feature(user_id: u64, history: Vec<ItemId>, feature: Vec<f64>) -> Self {
        let support = feature
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        Self {
            user_id,
            history,
            feature,
            support,
        }
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }
}

/// An ordered candidate set, optionally tagged with the position of the
/// latent positive item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub items: Vec<ItemId>,
    pub positive_index: Option<usize>,
}

impl CandidateSet {
    pub fn new(items: Vec<ItemId>, positive_index: Option<usize>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Config("candidate set must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::with_capacity(items.len());
        for item in &items {
            if !seen.insert(item) {
                return Err(Error::Config(format!(
                    "duplicate item {item} in candidate set"
                )));
            }
        }
        if let Some(idx) = positive_index {
            if idx >= items.len() {
                return Err(Error::Config(format!(
                    "positive index {idx} out of range for {} candidates",
                    items.len()
                )));
            }
        }
        Ok(Self {
            items,
            positive_index,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Position of `item` within the candidate list.
    pub fn position_of(&self, item: ItemId) -> Option<usize> {
        self.items.iter().position(|&it| it == item)
    }

    /// The latent positive item, when tagged.
    pub fn positive_item(&self) -> Option<ItemId> {
        self.positive_index.map(|i| self.items[i])
    }
}

/// Weights of a log-linear item scorer plus a softmax temperature.
///
/// Row `a` of `weights` is item `a`'s scoring vector; the score of item `a`
/// in context `x` is `weights.row(a) . x.feature`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub weights: Array2<f64>,
    pub temperature: f64,
}

impl PolicyParams {
    pub fn new(weights: Array2<f64>, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("policy weights must be finite".into()));
        }
        Ok(Self {
            weights,
            temperature,
        })
    }

    /// Zero-initialized policy: uniform over every candidate set.
    pub fn zeros(catalog_size: usize, temperature: f64) -> Result<Self> {
        Self::new(
            Array2::zeros((catalog_size, feature_dim(catalog_size))),
            temperature,
        )
    }

    pub fn catalog_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn check_context(&self, ctx: &Context) -> Result<()> {
        if ctx.feature.len() != self.feature_dim() {
            return Err(Error::Config(format!(
                "feature dimension {} does not match policy dimension {}",
                ctx.feature.len(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    /// Raw item score `weights[item] . feature`.
    pub fn score(&self, ctx: &Context, item: ItemId) -> Result<f64> {
        self.check_context(ctx)?;
        if item.index() >= self.catalog_size() {
            return Err(Error::Config(format!(
                "item {item} outside catalog of size {}",
                self.catalog_size()
            )));
        }
        let row = self.weights.row(item.index());
        Ok(ctx
            .support()
            .iter()
            .map(|&i| row[i] * ctx.feature[i])
            .sum())
    }

    fn candidate_scores(&self, ctx: &Context, cands: &CandidateSet) -> Result<Vec<f64>> {
        cands
            .items
            .iter()
            .map(|&item| self.score(ctx, item))
            .collect()
    }

    /// Softmax distribution over `cands` at this policy's temperature.
    pub fn item_distribution(&self, ctx: &Context, cands: &CandidateSet) -> Result<ItemDistribution> {
        self.item_distribution_at(ctx, cands, self.temperature)
    }

    /// Softmax distribution over `cands` at an explicit temperature.
    ///
    /// Computed with max-score subtraction so extreme scores stay stable.
    pub fn item_distribution_at(
        &self,
        ctx: &Context,
        cands: &CandidateSet,
        temperature: f64,
    ) -> Result<ItemDistribution> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let scores = self.candidate_scores(ctx, cands)?;
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = scores
            .iter()
            .map(|s| ((s - max) / temperature).exp())
            .collect();
        let norm: f64 = probs.iter().sum();
        for p in &mut probs {
            // the floor keeps entries strictly positive when exp underflows;
            // it perturbs the sum by at most M subnormals
            *p = (*p / norm).max(f64::MIN_POSITIVE);
        }
        Ok(ItemDistribution {
            candidates: cands.clone(),
            probs,
        })
    }

    /// Natural log of the candidate-conditional probability of `item`.
    ///
    /// Evaluated through log-sum-exp on the scores, never through the log of
    /// a stored probability.
    pub fn log_prob(&self, ctx: &Context, cands: &CandidateSet, item: ItemId) -> Result<f64> {
        let pos = cands
            .position_of(item)
            .ok_or(Error::InvalidAction { item: item.0 })?;
        Ok(self.log_probs(ctx, cands)?[pos])
    }

    /// Log-probabilities for every candidate, via log-sum-exp.
    pub fn log_probs(&self, ctx: &Context, cands: &CandidateSet) -> Result<Vec<f64>> {
        let scores = self.candidate_scores(ctx, cands)?;
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm: f64 = scores
            .iter()
            .map(|s| ((s - max) / self.temperature).exp())
            .sum::<f64>()
            .ln();
        Ok(scores
            .iter()
            .map(|s| (s - max) / self.temperature - log_norm)
            .collect())
    }

    /// Gradient of `log_prob(item)` with respect to the weight matrix.
    ///
    /// Row `c` of the gradient is `(1/tau) * ([c == item] - p_c) * feature`
    /// for candidates `c`; rows outside the candidate set are zero. The
    /// rank-one structure is kept explicit: per-row coefficients plus the
    /// shared feature vector.
    pub fn log_prob_gradient(
        &self,
        ctx: &Context,
        cands: &CandidateSet,
        item: ItemId,
    ) -> Result<LogProbGradient> {
        if cands.position_of(item).is_none() {
            return Err(Error::InvalidAction { item: item.0 });
        }
        let dist = self.item_distribution(ctx, cands)?;
        let inv_tau = 1.0 / self.temperature;
        let row_coeffs = cands
            .items
            .iter()
            .zip(&dist.probs)
            .map(|(&cand, &p)| {
                let indicator = if cand == item { 1.0 } else { 0.0 };
                (cand, inv_tau * (indicator - p))
            })
            .collect();
        Ok(LogProbGradient {
            row_coeffs,
            feature: ctx.feature.clone(),
            support: ctx.support().to_vec(),
        })
    }

    /// FNV-1a hash over dimensions, temperature, and weight bits.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.catalog_size() as u64);
        eat(self.feature_dim() as u64);
        eat(self.temperature.to_bits());
        for w in self.weights.iter() {
            eat(w.to_bits());
        }
        format!("{h:016x}")
    }
}


/// A normalized exposure distribution over a candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemDistribution {
    pub candidates: CandidateSet,
    pub probs: Vec<f64>,
}

impl ItemDistribution {
    /// Draw one item; the returned propensity is the stored probability at
    /// the drawn index, bit-exact.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (ItemId, f64) {
        let idx = self.sample_index(rng);
        (self.candidates.items[idx], self.probs[idx])
    }

    /// Draw a candidate index by inverse-CDF scan.
    pub fn sample_index<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return i;
            }
        }
        self.probs.len() - 1
    }

    /// Probability assigned to `item`, if it is a candidate.
    pub fn prob_of(&self, item: ItemId) -> Option<f64> {
        self.candidates.position_of(item).map(|i| self.probs[i])
    }

    /// KL(U || probs) over the candidate set: the single-step self-certainty
    /// signal. Zero for the uniform distribution, larger as mass concentrates.
    pub fn self_certainty(&self) -> f64 {
        let m = self.probs.len() as f64;
        -m.ln() - self.probs.iter().map(|p| p.ln()).sum::<f64>() / m
    }
}

/// Sparse gradient of a candidate log-probability: per-row coefficients times
/// a shared feature vector, touching only the feature's support.
#[derive(Debug, Clone)]
pub struct LogProbGradient {
    pub row_coeffs: Vec<(ItemId, f64)>,
    pub feature: Vec<f64>,
    support: Vec<usize>,
}

impl LogProbGradient {
    /// Materialize the full `catalog_size x feature_dim` gradient.
    pub fn to_dense(&self, catalog_size: usize, dim: usize) -> Array2<f64> {
        let mut dense = Array2::zeros((catalog_size, dim));
        self.axpy_into(1.0, &mut dense);
        dense
    }

    /// Accumulate `scale * gradient` into `acc`.
    pub fn axpy_into(&self, scale: f64, acc: &mut Array2<f64>) {
        for &(item, coeff) in &self.row_coeffs {
            let mut row = acc.row_mut(item.index());
            for &i in &self.support {
                row[i] += scale * coeff * self.feature[i];
            }
        }
    }

    /// True when every coefficient and feature entry is finite.
    pub fn is_finite(&self) -> bool {
        self.row_coeffs.iter().all(|(_, c)| c.is_finite())
            && self.feature.iter().all(|f| f.is_finite())
    }
}
