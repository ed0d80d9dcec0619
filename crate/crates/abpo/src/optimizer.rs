//! The anchored update rule over logged bandit feedback.
//!
//! For each logged example, a rollout group of size `G` is formed by fixing
//! the exposed recommendation as rollout 0 (the anchor) and sampling the
//! remaining `G - 1` rollouts from the frozen previous-step policy. Rewards
//! are asymmetric in the feedback: positive-response groups score item
//! matching plus format compliance, no-response groups score a matching
//! penalty plus format compliance plus a self-certainty bonus. The anchor
//! contributes to the group baseline with a stratified, self-normalized
//! propensity-ratio weight, never receives its own surrogate term, and the
//! policy ascends the clipped likelihood-ratio surrogate of the non-anchor
//! rollouts only. A vanilla group-relative mode (no anchor, no reweighting,
//! plus/minus matching reward) is kept for comparison.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::logging::{BanditLog, LoggedExample};
use crate::policy::{ItemId, PolicyParams};

/// Which surrogate the epoch driver optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    Abpo,
    VanillaGrpo,
}

/// Reward-channel weights shared by both feedback cases.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    /// Weight of the self-certainty bonus in the no-response case.
    pub lambda_sc: f64,
    /// Probability that a sampled rollout is malformed (fails the schema).
    pub malformation_prob: f64,
    /// Whether the format-compliance reward channel is active.
    pub format_reward_on: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_sc: 0.1,
            malformation_prob: 0.05,
            format_reward_on: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sc >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_sc must be >= 0, got {}",
                self.lambda_sc
            )));
        }
        if !(0.0..1.0).contains(&self.malformation_prob) {
            return Err(Error::Config(format!(
                "malformation_prob must lie in [0, 1), got {}",
                self.malformation_prob
            )));
        }
        Ok(())
    }
}

/// Hyperparameters of one update epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateConfig {
    /// Rollout group size `G` (anchor included in anchored mode).
    pub group_size: usize,
    /// Clipping threshold `epsilon` of the surrogate.
    pub clip: f64,
    /// Stabilizer `delta` added to stratum-mean weights in self-normalization.
    pub snips_delta: f64,
    /// Variance floor `epsilon_std` inside the group standard deviation.
    pub std_floor: f64,
    pub learning_rate: f64,
    pub mode: UpdateMode,
    pub batch_size: usize,
    /// Force every mini-batch to contain both feedback types when available.
    pub stratified: bool,
    pub reward: RewardConfig,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip: 0.2,
            snips_delta: 1e-6,
            std_floor: 1e-8,
            learning_rate: 0.05,
            mode: UpdateMode::Abpo,
            batch_size: 32,
            stratified: true,
            reward: RewardConfig::default(),
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group size G must be >= 2, got {}",
                self.group_size
            )));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config(format!(
                "clip threshold must lie in (0, 1), got {}",
                self.clip
            )));
        }
        if !(self.snips_delta > 0.0) {
            return Err(Error::Config(format!(
                "snips delta must be > 0, got {}",
                self.snips_delta
            )));
        }
        if !(self.std_floor > 0.0) {
            return Err(Error::Config(format!(
                "std floor must be > 0, got {}",
                self.std_floor
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.reward.validate()
    }
}

/// One member of a rollout group.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub item: ItemId,
    pub is_anchor: bool,
    pub well_formed: bool,
    /// Log-probability of `item` under the frozen rollout policy.
    pub log_prob_old: f64,
    /// Self-certainty of the rollout policy's distribution for this context.
    pub self_certainty: f64,
}

/// An anchor-augmented (or, in vanilla mode, purely sampled) rollout group
/// with per-rollout rewards and the anchor's self-normalized weight.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub example: LoggedExample,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<f64>,
    /// SNIPS-normalized anchor weight; a differentiation constant. Neutral
    /// (1.0) until `snips_normalize` assigns the batch value.
    pub anchor_weight: f64,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.rollouts.len()
    }

    fn has_anchor(&self) -> bool {
        self.rollouts.first().is_some_and(|r| r.is_anchor)
    }
}

/// Baseline, spread, and per-rollout normalized advantages for the non-anchor
/// rollouts of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub baseline: f64,
    pub sigma: f64,
    pub advantages: Vec<f64>,
}

/// Build an anchor-augmented group for `ex` under the frozen rollout policy:
/// rollout 0 is the exposure, rollouts `1..G-1` are i.i.d. draws from the
/// policy's candidate distribution (anchor duplicates permitted and scored
/// independently). Sampled rollouts fail the format schema with probability
/// `reward.malformation_prob`; the anchor, having been served, is always
/// well-formed. Rewards are filled according to the example's feedback.
pub fn build_anchored_group<R: Rng>(
    policy_old: &PolicyParams,
    ex: &LoggedExample,
    group_size: usize,
    reward: &RewardConfig,
    rng: &mut R,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(Error::Config(format!(
            "group size G must be >= 2, got {group_size}"
        )));
    }
    let dist = policy_old.item_distribution(&ex.context, &ex.candidates)?;
    let log_probs = policy_old.log_probs(&ex.context, &ex.candidates)?;
    let self_certainty = dist.self_certainty();

    let anchor_pos = ex
        .candidates
        .position_of(ex.a_log)
        .ok_or(Error::InvalidAction { item: ex.a_log.0 })?;
    let mut rollouts = Vec::with_capacity(group_size);
    rollouts.push(Rollout {
        item: ex.a_log,
        is_anchor: true,
        well_formed: true,
        log_prob_old: log_probs[anchor_pos],
        self_certainty,
    });
    for _ in 1..group_size {
        let idx = dist.sample_index(rng);
        let well_formed = rng.gen::<f64>() >= reward.malformation_prob;
        rollouts.push(Rollout {
            item: ex.candidates.items[idx],
            is_anchor: false,
            well_formed,
            log_prob_old: log_probs[idx],
            self_certainty,
        });
    }
    let rewards = rollouts
        .iter()
        .map(|r| {
            if ex.y {
                reward_positive(r, ex.a_log, reward)
            } else {
                reward_no_response(r, ex.a_log, reward)
            }
        })
        .collect();
    Ok(RolloutGroup {
        example: ex.clone(),
        rollouts,
        rewards,
        anchor_weight: 1.0,
    })
}

/// Sampled-only group for the vanilla mode: `G` i.i.d. rollouts, no anchor,
/// and the plus/minus item-matching reward.
pub fn build_sampled_group<R: Rng>(
    policy_old: &PolicyParams,
    ex: &LoggedExample,
    group_size: usize,
    rng: &mut R,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(Error::Config(format!(
            "group size G must be >= 2, got {group_size}"
        )));
    }
    let dist = policy_old.item_distribution(&ex.context, &ex.candidates)?;
    let log_probs = policy_old.log_probs(&ex.context, &ex.candidates)?;
    let self_certainty = dist.self_certainty();
    let mut rollouts = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let idx = dist.sample_index(rng);
        rollouts.push(Rollout {
            item: ex.candidates.items[idx],
            is_anchor: false,
            well_formed: true,
            log_prob_old: log_probs[idx],
            self_certainty,
        });
    }
    let rewards = rollouts
        .iter()
        .map(|r| vanilla_match_reward(r.item, ex))
        .collect();
    Ok(RolloutGroup {
        example: ex.clone(),
        rollouts,
        rewards,
        anchor_weight: 0.0,
    })
}

/// The plus/minus item-matching reward: +1 for reproducing a positive
/// exposure, -1 for reproducing a no-response exposure, 0 otherwise.
pub fn vanilla_match_reward(item: ItemId, ex: &LoggedExample) -> f64 {
    if item != ex.a_log {
        0.0
    } else if ex.y {
        1.0
    } else {
        -1.0
    }
}

/// Positive-response reward: item matching plus format compliance.
pub fn reward_positive(rollout: &Rollout, a_log: ItemId, cfg: &RewardConfig) -> f64 {
    let r_match = if rollout.item == a_log { 1.0 } else { 0.0 };
    r_match + format_reward(rollout, cfg)
}

/// No-response reward: matching penalty, format compliance, and the
/// self-certainty bonus weighted by `lambda_sc`.
pub fn reward_no_response(rollout: &Rollout, a_log: ItemId, cfg: &RewardConfig) -> f64 {
    let r_match = if rollout.item == a_log { -1.0 } else { 0.0 };
    r_match + format_reward(rollout, cfg) + cfg.lambda_sc * rollout.self_certainty
}

fn format_reward(rollout: &Rollout, cfg: &RewardConfig) -> f64 {
    if cfg.format_reward_on && rollout.well_formed {
        1.0
    } else {
        0.0
    }
}

/// Item-level propensity ratio `e_old / e0`. A differentiation constant: it
/// carries no gradient into the policy update.
pub fn ips_weight(e_old: f64, e0: f64) -> Result<f64> {
    if !(e0 > 0.0) {
        return Err(Error::Validation(format!(
            "logging propensity must be positive, got {e0}"
        )));
    }
    Ok(e_old / e0)
}

/// Self-normalize raw anchor weights separately per feedback stratum:
/// `w_hat = w / (stratum mean + delta)`.
pub fn snips_normalize(batch: &[(usize, bool, f64)], delta: f64) -> BTreeMap<usize, f64> {
    let mut normalized = BTreeMap::new();
    for stratum in [true, false] {
        let members: Vec<&(usize, bool, f64)> =
            batch.iter().filter(|(_, y, _)| *y == stratum).collect();
        if members.is_empty() {
            continue;
        }
        let mean = members.iter().map(|(_, _, w)| w).sum::<f64>() / members.len() as f64;
        for (idx, _, w) in members {
            normalized.insert(*idx, w / (mean + delta));
        }
    }
    normalized
}

/// SNIPS-weighted group mean: `(w * r_log + sum(rewards)) / (w + G - 1)`.
pub fn weighted_baseline(anchor_weight: f64, r_log: f64, roll_rewards: &[f64]) -> f64 {
    let total: f64 = roll_rewards.iter().sum();
    (anchor_weight * r_log + total) / (anchor_weight + roll_rewards.len() as f64)
}

/// Weighted standard deviation of the anchor-augmented reward group, floored
/// by `std_floor` inside the square root.
pub fn weighted_std(
    anchor_weight: f64,
    r_log: f64,
    roll_rewards: &[f64],
    baseline: f64,
    std_floor: f64,
) -> f64 {
    let spread: f64 = anchor_weight * (r_log - baseline).powi(2)
        + roll_rewards
            .iter()
            .map(|r| (r - baseline).powi(2))
            .sum::<f64>();
    (spread / (anchor_weight + roll_rewards.len() as f64) + std_floor).sqrt()
}

/// Normalized advantages for the non-anchor rollouts of an anchored group.
/// The anchor receives none: it enters only through the baseline and spread.
pub fn advantages_bandit(group: &RolloutGroup, cfg: &UpdateConfig) -> AdvantageSet {
    let r_log = group.rewards[0];
    let roll_rewards = &group.rewards[1..];
    let baseline = weighted_baseline(group.anchor_weight, r_log, roll_rewards);
    let sigma = weighted_std(
        group.anchor_weight,
        r_log,
        roll_rewards,
        baseline,
        cfg.std_floor,
    );
    let advantages = roll_rewards.iter().map(|r| (r - baseline) / sigma).collect();
    AdvantageSet {
        baseline,
        sigma,
        advantages,
    }
}

/// Group-relative advantages over a full rollout group: center by the mean,
/// scale by the population standard deviation (floored).
pub fn vanilla_grpo_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = (var + std_floor).sqrt();
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// The clipped surrogate term `min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    (ratio * advantage).min(clipped * advantage)
}

/// Per-step optimization statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub objective: f64,
    pub mean_reward: f64,
    pub clip_fraction: f64,
    pub mean_abs_advantage: f64,
}

struct TermEval {
    /// Candidate position of the rollout's item.
    pos: usize,
    /// Surrogate value of this rollout.
    term: f64,
    /// d(term)/d(log pi_theta) — zero when the clip binds.
    coeff: f64,
    clipped: bool,
    advantage: f64,
}

/// Advantages for the surrogate-active rollouts of a group, plus the index of
/// the first active rollout (1 skips the anchor).
fn active_advantages(group: &RolloutGroup, cfg: &UpdateConfig) -> (Vec<f64>, usize) {
    match cfg.mode {
        UpdateMode::Abpo => (advantages_bandit(group, cfg).advantages, 1),
        UpdateMode::VanillaGrpo => (vanilla_grpo_advantages(&group.rewards, cfg.std_floor), 0),
    }
}

fn eval_group_terms(
    policy: &PolicyParams,
    group: &RolloutGroup,
    cfg: &UpdateConfig,
) -> Result<(Vec<TermEval>, Vec<f64>)> {
    let ex = &group.example;
    let probs_new = policy.item_distribution(&ex.context, &ex.candidates)?.probs;
    let log_probs_new = policy.log_probs(&ex.context, &ex.candidates)?;
    let (advantages, first_active) = active_advantages(group, cfg);
    let mut terms = Vec::with_capacity(advantages.len());
    for (advantage, rollout) in advantages.iter().zip(&group.rollouts[first_active..]) {
        let pos = ex
            .candidates
            .position_of(rollout.item)
            .ok_or(Error::InvalidAction {
                item: rollout.item.0,
            })?;
        let ratio = (log_probs_new[pos] - rollout.log_prob_old).exp();
        let unclipped = ratio * advantage;
        let clipped_value = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * advantage;
        let clipped = clipped_value < unclipped;
        let (term, coeff) = if clipped {
            (clipped_value, 0.0)
        } else {
            // d(ratio * A)/d(log pi) = ratio * A; constant-A contract.
            (unclipped, unclipped)
        };
        terms.push(TermEval {
            pos,
            term,
            coeff,
            clipped,
            advantage: *advantage,
        });
    }
    Ok((terms, probs_new))
}

/// Value of the clipped surrogate objective for a batch of groups: the mean
/// over groups of the per-group mean surrogate term. Used directly by the
/// finite-difference oracle.
pub fn surrogate_objective(
    policy: &PolicyParams,
    batch: &[RolloutGroup],
    cfg: &UpdateConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for group in batch {
        let (terms, _) = eval_group_terms(policy, group, cfg)?;
        let count = terms.len() as f64;
        total += terms.iter().map(|t| t.term).sum::<f64>() / count;
    }
    Ok(total / batch.len() as f64)
}

/// One ascent step on the clipped surrogate. Gradients flow only through the
/// current policy's log-probabilities: advantages, old log-probabilities, and
/// anchor weights are constants. Returns the updated parameters and stats.
pub fn update_step(
    policy: &PolicyParams,
    policy_old: &PolicyParams,
    batch: &[RolloutGroup],
    cfg: &UpdateConfig,
) -> Result<(PolicyParams, StepStats)> {
    if batch.is_empty() {
        return Err(Error::Config("update step requires a non-empty batch".into()));
    }
    debug_assert!(batch
        .iter()
        .all(|g| g.group_size() == cfg.group_size
            && (cfg.mode == UpdateMode::VanillaGrpo || g.has_anchor())));
    // policy_old generated the groups; it enters the step only through the
    // stored log_prob_old values, so it is accepted for interface clarity.
    let _ = policy_old;

    let mut grad: Array2<f64> = Array2::zeros(policy.weights.dim());
    let mut objective = 0.0;
    let mut clipped_terms = 0usize;
    let mut total_terms = 0usize;
    let mut abs_advantage = 0.0;
    let mut reward_sum = 0.0;
    let mut reward_count = 0usize;

    let batch_scale = 1.0 / batch.len() as f64;
    for (group_idx, group) in batch.iter().enumerate() {
        let (terms, probs_new) = eval_group_terms(policy, group, cfg)?;
        let group_scale = batch_scale / terms.len() as f64;
        let inv_tau = 1.0 / policy.temperature;

        let m = group.example.candidates.len();
        let mut cand_coeff = vec![0.0; m];
        let mut coeff_total = 0.0;
        for t in &terms {
            objective += t.term * group_scale;
            cand_coeff[t.pos] += t.coeff;
            coeff_total += t.coeff;
            clipped_terms += usize::from(t.clipped);
            total_terms += 1;
            abs_advantage += t.advantage.abs();
        }
        if !coeff_total.is_finite() || !objective.is_finite() {
            return Err(Error::NonFiniteGradient {
                group: group_idx,
                user_id: group.example.context.user_id,
                t_prime: group.example.context.history.len(),
            });
        }
        // d J / d w_c = sum_j coeff_j * (1{c = a_j} - p_c) * feature / tau
        let feature = &group.example.context.feature;
        let support = group.example.context.support();
        for (pos, &item_coeff) in cand_coeff.iter().enumerate() {
            let row_coeff = (item_coeff - probs_new[pos] * coeff_total) * inv_tau * group_scale;
            if row_coeff != 0.0 {
                let mut row = grad.row_mut(group.example.candidates.items[pos].index());
                for &i in support {
                    row[i] += row_coeff * feature[i];
                }
            }
        }
        reward_sum += group.rewards.iter().sum::<f64>();
        reward_count += group.rewards.len();
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            group: 0,
            user_id: batch[0].example.context.user_id,
            t_prime: batch[0].example.context.history.len(),
        });
    }

    let mut weights = policy.weights.clone();
    weights.scaled_add(cfg.learning_rate, &grad);
    let updated = PolicyParams::new(weights, policy.temperature)?;
    let stats = StepStats {
        objective,
        mean_reward: reward_sum / reward_count as f64,
        clip_fraction: clipped_terms as f64 / total_terms as f64,
        mean_abs_advantage: abs_advantage / total_terms as f64,
    };
    Ok((updated, stats))
}

/// Aggregated statistics of one epoch over a bandit log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Mean sampled-rollout reward over positive-response groups.
    pub mean_reward_pos: f64,
    /// Mean sampled-rollout reward over no-response groups.
    pub mean_reward_neg: f64,
    pub clip_fraction: f64,
    /// Mean self-normalized anchor weight per stratum (zero in vanilla mode).
    pub mean_weight_pos: f64,
    pub mean_weight_neg: f64,
    /// Fraction of sampled rollouts reproducing the exposure, per stratum.
    pub match_rate_pos: f64,
    pub match_rate_neg: f64,
    pub mean_objective: f64,
}

impl EpochStats {
    pub fn csv_header() -> &'static str {
        "round,epoch,mean_reward_pos,mean_reward_neg,clip_fraction,mean_weight_pos,mean_weight_neg,match_rate_pos,match_rate_neg,mean_objective"
    }

    pub fn csv_row(&self, round: usize, epoch: usize) -> String {
        format!(
            "{round},{epoch},{},{},{},{},{},{},{},{}",
            self.mean_reward_pos,
            self.mean_reward_neg,
            self.clip_fraction,
            self.mean_weight_pos,
            self.mean_weight_neg,
            self.match_rate_pos,
            self.match_rate_neg,
            self.mean_objective
        )
    }
}

#[derive(Default)]
struct StratumTally {
    reward_sum: f64,
    reward_count: usize,
    weight_sum: f64,
    weight_count: usize,
    match_count: usize,
    sample_count: usize,
}

impl StratumTally {
    fn absorb_group(&mut self, group: &RolloutGroup, sampled_from: usize) {
        for (rollout, reward) in group.rollouts[sampled_from..]
            .iter()
            .zip(&group.rewards[sampled_from..])
        {
            self.reward_sum += reward;
            self.reward_count += 1;
            self.sample_count += 1;
            self.match_count += usize::from(rollout.item == group.example.a_log);
        }
    }

    fn mean_reward(&self) -> f64 {
        self.reward_sum / self.reward_count as f64
    }

    fn mean_weight(&self) -> f64 {
        if self.weight_count == 0 {
            0.0
        } else {
            self.weight_sum / self.weight_count as f64
        }
    }

    fn match_rate(&self) -> f64 {
        self.match_count as f64 / self.sample_count as f64
    }
}

/// Split example indices into mini-batches. With stratification and both
/// feedback types present, the batch count shrinks (if needed) so that every
/// batch receives at least one example of each type.
pub(crate) fn stratified_batches<R: Rng>(
    ys: &[bool],
    batch_size: usize,
    stratified: bool,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let n = ys.len();
    let mut pos: Vec<usize> = (0..n).filter(|&i| ys[i]).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| !ys[i]).collect();
    let target_batches = n.div_ceil(batch_size).max(1);
    if stratified && !pos.is_empty() && !neg.is_empty() {
        pos.shuffle(rng);
        neg.shuffle(rng);
        let num_batches = target_batches.min(pos.len()).min(neg.len());
        let mut batches = vec![Vec::new(); num_batches];
        for (i, idx) in pos.into_iter().enumerate() {
            batches[i % num_batches].push(idx);
        }
        for (i, idx) in neg.into_iter().enumerate() {
            batches[i % num_batches].push(idx);
        }
        batches
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        all.chunks(batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Run one epoch: freeze the rollout policy, form stratified mini-batches,
/// build groups, weight anchors by stratified SNIPS over each batch, and take
/// one surrogate ascent step per batch. In vanilla mode the groups are
/// sampled-only with the plus/minus matching reward and group-relative
/// advantages.
pub fn run_epoch<R: Rng>(
    policy: &PolicyParams,
    log: &BanditLog,
    cfg: &UpdateConfig,
    rng: &mut R,
) -> Result<(PolicyParams, EpochStats)> {
    cfg.validate()?;
    if log.examples.is_empty() {
        return Err(Error::Config("cannot run an epoch on an empty log".into()));
    }
    let policy_old = policy.clone();
    let mut current = policy.clone();

    let ys: Vec<bool> = log.examples.iter().map(|ex| ex.y).collect();
    let batches = stratified_batches(&ys, cfg.batch_size, cfg.stratified, rng);

    let mut pos_tally = StratumTally::default();
    let mut neg_tally = StratumTally::default();
    let mut clip_sum = 0.0;
    let mut objective_sum = 0.0;
    let mut steps = 0usize;

    for batch_indices in &batches {
        let mut groups = Vec::with_capacity(batch_indices.len());
        match cfg.mode {
            UpdateMode::Abpo => {
                for &idx in batch_indices {
                    groups.push(build_anchored_group(
                        &policy_old,
                        &log.examples[idx],
                        cfg.group_size,
                        &cfg.reward,
                        rng,
                    )?);
                }
                let raw: Vec<(usize, bool, f64)> = groups
                    .iter()
                    .enumerate()
                    .map(|(i, g)| {
                        let e_old = g.rollouts[0].log_prob_old.exp();
                        ips_weight(e_old, g.example.e0).map(|w| (i, g.example.y, w))
                    })
                    .collect::<Result<_>>()?;
                let weights = snips_normalize(&raw, cfg.snips_delta);
                for (i, group) in groups.iter_mut().enumerate() {
                    group.anchor_weight = weights[&i];
                }
            }
            UpdateMode::VanillaGrpo => {
                for &idx in batch_indices {
                    groups.push(build_sampled_group(
                        &policy_old,
                        &log.examples[idx],
                        cfg.group_size,
                        rng,
                    )?);
                }
            }
        }

        let sampled_from = usize::from(cfg.mode == UpdateMode::Abpo);
        for group in &groups {
            let tally = if group.example.y {
                &mut pos_tally
            } else {
                &mut neg_tally
            };
            tally.absorb_group(group, sampled_from);
            if cfg.mode == UpdateMode::Abpo {
                tally.weight_sum += group.anchor_weight;
                tally.weight_count += 1;
            }
        }

        let (next, stats) = update_step(&current, &policy_old, &groups, cfg)?;
        current = next;
        clip_sum += stats.clip_fraction;
        objective_sum += stats.objective;
        steps += 1;
    }

    let stats = EpochStats {
        mean_reward_pos: pos_tally.mean_reward(),
        mean_reward_neg: neg_tally.mean_reward(),
        clip_fraction: clip_sum / steps as f64,
        mean_weight_pos: pos_tally.mean_weight(),
        mean_weight_neg: neg_tally.mean_weight(),
        match_rate_pos: pos_tally.match_rate(),
        match_rate_neg: neg_tally.match_rate(),
        mean_objective: objective_sum / steps as f64,
    };
    Ok((current, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logging::make_bandit_log;
    use crate::policy::{CandidateSet, Context};
    use crate::rng;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_policy(seed: u64, v: usize) -> PolicyParams {
        let mut stream = rng::stream(seed);
        let weights = Array2::from_shape_fn((v, 2 * v), |_| stream.gen_range(-0.8..0.8));
        PolicyParams::new(weights, 1.0).unwrap()
    }

    /// A logged example over candidates `2..2+m` with the positive at slot 0.
    fn test_example(policy: &PolicyParams, v: usize, m: usize, y: bool) -> LoggedExample {
        let context = Context::from_history(7, vec![ItemId(0), ItemId(1)], v).unwrap();
        let items: Vec<ItemId> = (2..2 + m as u32).map(ItemId).collect();
        let candidates = CandidateSet::new(items, Some(0)).unwrap();
        let a_log = if y {
            candidates.items[0]
        } else {
            candidates.items[1]
        };
        let e0 = policy
            .item_distribution(&context, &candidates)
            .unwrap()
            .prob_of(a_log)
            .unwrap();
        LoggedExample {
            context,
            candidates,
            a_log,
            y,
            e0,
            round: 0,
        }
    }

    fn rollout(item: u32, well_formed: bool, sc: f64) -> Rollout {
        Rollout {
            item: ItemId(item),
            is_anchor: false,
            well_formed,
            log_prob_old: -1.0,
            self_certainty: sc,
        }
    }

    #[test]
    fn anchored_group_g2_has_one_sample() {
        let policy = random_policy(1, 12);
        let ex = test_example(&policy, 12, 5, true);
        let mut stream = rng::stream(2);
        let group =
            build_anchored_group(&policy, &ex, 2, &RewardConfig::default(), &mut stream).unwrap();
        assert_eq!(group.group_size(), 2);
        assert!(group.rollouts[0].is_anchor);
        assert!(!group.rollouts[1].is_anchor);
        assert_eq!(group.rollouts[0].item, ex.a_log);
        assert!(group.rollouts[0].well_formed);
    }

    #[test]
    fn anchored_group_rejects_g1() {
        let policy = random_policy(1, 12);
        let ex = test_example(&policy, 12, 5, true);
        let mut stream = rng::stream(2);
        assert!(matches!(
            build_anchored_group(&policy, &ex, 1, &RewardConfig::default(), &mut stream),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn anchored_group_sampling_marginal_matches_policy() {
        let policy = random_policy(3, 10);
        let ex = test_example(&policy, 10, 4, true);
        let dist = policy.item_distribution(&ex.context, &ex.candidates).unwrap();
        let mut stream = rng::stream(4);
        let cfg = RewardConfig::default();
        let draws = 10_000usize;
        let mut counts = vec![0usize; 4];
        for _ in 0..draws {
            let group = build_anchored_group(&policy, &ex, 2, &cfg, &mut stream).unwrap();
            let pos = ex.candidates.position_of(group.rollouts[1].item).unwrap();
            counts[pos] += 1;
        }
        let n = draws as f64;
        for (pos, &c) in counts.iter().enumerate() {
            let p = dist.probs[pos];
            let half_width = 4.0 * (p * (1.0 - p) / n).sqrt();
            let freq = c as f64 / n;
            assert!(
                (freq - p).abs() <= half_width.max(1e-3),
                "candidate {pos}: freq {freq} vs prob {p}"
            );
        }
    }

    #[test]
    fn positive_rewards_by_component() {
        let cfg = RewardConfig::default();
        let a_log = ItemId(9);
        assert_eq!(reward_positive(&rollout(9, true, 0.0), a_log, &cfg), 2.0);
        assert_eq!(reward_positive(&rollout(4, true, 0.0), a_log, &cfg), 1.0);
        assert_eq!(reward_positive(&rollout(4, false, 0.0), a_log, &cfg), 0.0);
    }

    #[test]
    fn no_response_rewards_by_component() {
        let cfg = RewardConfig {
            lambda_sc: 0.1,
            ..RewardConfig::default()
        };
        let a_log = ItemId(9);
        assert_eq!(reward_no_response(&rollout(9, true, 0.0), a_log, &cfg), 0.0);
        let r = reward_no_response(&rollout(4, true, 0.5108), a_log, &cfg);
        assert!((r - 1.05108).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_reduces_to_match_and_format() {
        let cfg = RewardConfig {
            lambda_sc: 0.0,
            ..RewardConfig::default()
        };
        let a_log = ItemId(9);
        for (item, well_formed) in [(9, true), (9, false), (4, true), (4, false)] {
            let r = rollout(item, well_formed, 3.7);
            let expected = (if item == 9 { -1.0 } else { 0.0 })
                + (if well_formed { 1.0 } else { 0.0 });
            assert_eq!(reward_no_response(&r, a_log, &cfg), expected);
        }
    }

    #[test]
    fn format_off_and_zero_lambda_reduce_to_pure_match() {
        let cfg = RewardConfig {
            lambda_sc: 0.0,
            format_reward_on: false,
            ..RewardConfig::default()
        };
        let a_log = ItemId(9);
        assert_eq!(reward_positive(&rollout(9, false, 2.0), a_log, &cfg), 1.0);
        assert_eq!(reward_positive(&rollout(4, true, 2.0), a_log, &cfg), 0.0);
        assert_eq!(reward_no_response(&rollout(9, true, 2.0), a_log, &cfg), -1.0);
        assert_eq!(reward_no_response(&rollout(4, true, 2.0), a_log, &cfg), 0.0);
    }

    #[test]
    fn ips_weight_ratios() {
        assert_eq!(ips_weight(0.2, 0.2).unwrap(), 1.0);
        assert!((ips_weight(0.3, 0.1).unwrap() - 3.0).abs() < 1e-15);
        assert!((ips_weight(0.05, 0.25).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(ips_weight(0.5, 0.0), Err(Error::Validation(_))));
        assert!(matches!(ips_weight(0.5, -0.1), Err(Error::Validation(_))));
    }

    #[test]
    fn snips_constant_stratum_normalizes_to_one() {
        let batch = vec![(0, true, 2.0), (1, true, 2.0), (2, true, 2.0)];
        let w = snips_normalize(&batch, 1e-6);
        for i in 0..3 {
            assert!((w[&i] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn snips_mean_division() {
        let batch = vec![(0, true, 1.0), (1, true, 3.0)];
        let w = snips_normalize(&batch, 0.0);
        assert_eq!(w[&0], 0.5);
        assert_eq!(w[&1], 1.5);
    }

    #[test]
    fn snips_strata_are_independent() {
        let batch = vec![(0, true, 2.0), (1, true, 2.0), (2, false, 4.0)];
        let w = snips_normalize(&batch, 1e-9);
        assert!((w[&0] - 1.0).abs() < 1e-8);
        assert!((w[&1] - 1.0).abs() < 1e-8);
        assert!((w[&2] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn snips_singleton_stratum() {
        let batch = vec![(0, false, 4.0)];
        let w = snips_normalize(&batch, 1.0);
        assert_eq!(w[&0], 4.0 / 5.0);
    }

    #[test]
    fn weighted_baseline_examples() {
        assert_eq!(weighted_baseline(1.0, 1.0, &[0.0, 0.0, 0.0]), 0.25);
        assert!((weighted_baseline(2.0, 1.0, &[0.0, 0.0, 0.0]) - 0.4).abs() < 1e-15);
        let rewards = [2.0, -1.0, 0.5];
        let plain = rewards.iter().sum::<f64>() / 3.0;
        assert!((weighted_baseline(0.0, 9.0, &rewards) - plain).abs() < 1e-15);
    }

    #[test]
    fn weighted_std_examples() {
        let floor_only = weighted_std(1.0, 1.0, &[1.0, 1.0], 1.0, 1e-8);
        assert!((floor_only - 1e-4).abs() < 1e-18);
        let sigma = weighted_std(1.0, 1.0, &[0.0, 0.0, 0.0], 0.25, 0.0);
        assert!((sigma - 0.1875f64.sqrt()).abs() < 1e-15);
        assert!((sigma - 0.43301).abs() < 1e-5);
    }

    #[test]
    fn bandit_advantages_closed_form() {
        let policy = random_policy(5, 10);
        let ex = test_example(&policy, 10, 4, true);
        let group = RolloutGroup {
            example: ex,
            rollouts: vec![
                Rollout {
                    item: ItemId(2),
                    is_anchor: true,
                    well_formed: true,
                    log_prob_old: -1.0,
                    self_certainty: 0.0,
                },
                rollout(3, true, 0.0),
                rollout(4, true, 0.0),
                rollout(5, true, 0.0),
            ],
            rewards: vec![1.0, 0.0, 0.0, 0.0],
            anchor_weight: 1.0,
        };
        let cfg = UpdateConfig {
            std_floor: f64::MIN_POSITIVE,
            ..UpdateConfig::default()
        };
        let adv = advantages_bandit(&group, &cfg);
        assert_eq!(adv.advantages.len(), 3);
        for a in &adv.advantages {
            assert!((a - (-0.25 / 0.1875f64.sqrt())).abs() < 1e-9);
            assert!((a + 0.57735).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_anchor_weight_reduces_to_sample_statistics() {
        let policy = random_policy(6, 10);
        let ex = test_example(&policy, 10, 4, false);
        let group = RolloutGroup {
            example: ex,
            rollouts: vec![
                Rollout {
                    item: ItemId(3),
                    is_anchor: true,
                    well_formed: true,
                    log_prob_old: -1.0,
                    self_certainty: 0.0,
                },
                rollout(2, true, 0.0),
                rollout(4, true, 0.0),
            ],
            rewards: vec![-5.0, 2.0, 0.0],
            anchor_weight: 0.0,
        };
        let cfg = UpdateConfig {
            std_floor: 1e-300,
            ..UpdateConfig::default()
        };
        let adv = advantages_bandit(&group, &cfg);
        let plain = vanilla_grpo_advantages(&[2.0, 0.0], 1e-300);
        for (a, b) in adv.advantages.iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn vanilla_advantages_closed_form() {
        let adv = vanilla_grpo_advantages(&[2.0, 1.0, 1.0, 0.0], 0.0);
        assert!((adv[0] - 1.41421).abs() < 1e-5);
        assert_eq!(adv[1], 0.0);
        assert_eq!(adv[2], 0.0);
        assert!((adv[3] + 1.41421).abs() < 1e-5);
    }

    #[test]
    fn vanilla_advantages_constant_rewards_are_zero() {
        let adv = vanilla_grpo_advantages(&[0.7, 0.7, 0.7], 1e-8);
        assert!(adv.iter().all(|a| a.abs() < 1e-9), "{adv:?}");
    }

    #[test]
    fn vanilla_advantages_permutation_equivariant() {
        let rewards = [3.0, -1.0, 0.5, 2.0];
        let adv = vanilla_grpo_advantages(&rewards, 1e-8);
        let permuted = [rewards[2], rewards[0], rewards[3], rewards[1]];
        let adv_p = vanilla_grpo_advantages(&permuted, 1e-8);
        assert_eq!(adv_p[0], adv[2]);
        assert_eq!(adv_p[1], adv[0]);
        assert_eq!(adv_p[2], adv[3]);
        assert_eq!(adv_p[3], adv[1]);
    }

    #[test]
    fn clipped_surrogate_values() {
        assert_eq!(clipped_surrogate(1.0, 0.37, 0.2), 0.37);
        assert!((clipped_surrogate(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        // min(0.5 * -1, clip(0.5 -> 0.8) * -1) = min(-0.5, -0.8) = -0.8
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn clip_fraction_bounds_and_surrogate_pessimism(
            ratio in 0.01..3.0f64,
            advantage in -2.0..2.0f64,
            clip in 0.05..0.5f64,
        ) {
            let value = clipped_surrogate(ratio, advantage, clip);
            prop_assert!(value <= ratio * advantage + 1e-15);
        }

        #[test]
        fn proposition1_identity_per_group(
            rewards in proptest::collection::vec(-2.0..2.0f64, 2..9),
            r_log in -2.0..2.0f64,
            omega in 0.0..5.0f64,
        ) {
            let baseline_anc = weighted_baseline(omega, r_log, &rewards);
            let baseline_roll = rewards.iter().sum::<f64>() / rewards.len() as f64;
            let g_minus_1 = rewards.len() as f64;
            let shift = omega / (omega + g_minus_1) * (baseline_roll - r_log);
            for r in &rewards {
                let lhs = (r - baseline_anc) - (r - baseline_roll);
                prop_assert!((lhs - shift).abs() <= 1e-12);
            }
        }

        #[test]
        fn weighted_std_homogeneous(
            rewards in proptest::collection::vec(-2.0..2.0f64, 2..6),
            r_log in -2.0..2.0f64,
            omega in 0.0..4.0f64,
            scale in 0.1..5.0f64,
        ) {
            let baseline = weighted_baseline(omega, r_log, &rewards);
            let sigma = weighted_std(omega, r_log, &rewards, baseline, 0.0);
            let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
            let baseline_s = weighted_baseline(omega, r_log * scale, &scaled);
            let sigma_s = weighted_std(omega, r_log * scale, &scaled, baseline_s, 0.0);
            prop_assert!((sigma_s - scale * sigma).abs() <= 1e-9 * (1.0 + sigma_s.abs()));
        }
    }

    #[test]
    fn sign_asymmetry_of_anchoring() {
        // format and self-certainty off: reward variation from matching only
        let rewards_pos = [0.0, 1.0, 0.0]; // samples, mean 1/3
        let r_log_high = 1.0; // y=1 anchor above the sample mean
        let base_roll = rewards_pos.iter().sum::<f64>() / 3.0;
        let base_anc = weighted_baseline(1.3, r_log_high, &rewards_pos);
        for r in &rewards_pos {
            assert!((r - base_anc) < (r - base_roll));
        }
        let r_log_low = -1.0; // y=0 anchor below the sample mean
        let rewards_neg = [0.0, -1.0, 0.0];
        let base_roll = rewards_neg.iter().sum::<f64>() / 3.0;
        let base_anc = weighted_baseline(1.3, r_log_low, &rewards_neg);
        for r in &rewards_neg {
            assert!((r - base_anc) > (r - base_roll));
        }
    }

    /// Two-candidate group with hand-set rewards and ratio-1 starting point.
    fn handmade_group(policy: &PolicyParams, v: usize, rewards: Vec<f64>) -> RolloutGroup {
        let ex = test_example(policy, v, 2, false);
        let lps = policy.log_probs(&ex.context, &ex.candidates).unwrap();
        let rollouts = vec![
            Rollout {
                item: ex.candidates.items[1], // = a_log for y = 0
                is_anchor: true,
                well_formed: true,
                log_prob_old: lps[1],
                self_certainty: 0.0,
            },
            Rollout {
                item: ex.candidates.items[0],
                is_anchor: false,
                well_formed: true,
                log_prob_old: lps[0],
                self_certainty: 0.0,
            },
        ];
        RolloutGroup {
            example: ex,
            rollouts,
            rewards,
            anchor_weight: 1.0,
        }
    }

    #[test]
    fn zero_advantages_leave_parameters_unchanged() {
        let policy = random_policy(8, 9);
        // equal rewards across anchor and sample: zero advantage
        let group = handmade_group(&policy, 9, vec![1.0, 1.0]);
        let cfg = UpdateConfig {
            group_size: 2,
            ..UpdateConfig::default()
        };
        let (updated, stats) = update_step(&policy, &policy, &[group], &cfg).unwrap();
        assert_eq!(updated.weights, policy.weights);
        assert_eq!(stats.mean_abs_advantage, 0.0);
    }

    #[test]
    fn positive_advantage_increases_sampled_item_probability() {
        let policy = random_policy(9, 9);
        let group = handmade_group(&policy, 9, vec![-1.0, 1.0]);
        let ex = group.example.clone();
        let sampled = group.rollouts[1].item;
        let before = policy
            .item_distribution(&ex.context, &ex.candidates)
            .unwrap()
            .prob_of(sampled)
            .unwrap();
        let cfg = UpdateConfig {
            group_size: 2,
            learning_rate: 0.01,
            ..UpdateConfig::default()
        };
        let (updated, _) = update_step(&policy, &policy, &[group], &cfg).unwrap();
        let after = updated
            .item_distribution(&ex.context, &ex.candidates)
            .unwrap()
            .prob_of(sampled)
            .unwrap();
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn update_gradient_matches_central_differences() {
        let v = 8;
        let policy_old = random_policy(10, v);
        let mut stream = rng::stream(11);
        let cfg = UpdateConfig {
            group_size: 4,
            learning_rate: 1.0,
            ..UpdateConfig::default()
        };
        let mut groups = Vec::new();
        for k in 0..3 {
            let ex = test_example(&policy_old, v, 5, k % 2 == 0);
            groups.push(
                build_anchored_group(&policy_old, &ex, 4, &cfg.reward, &mut stream).unwrap(),
            );
        }
        let raw: Vec<(usize, bool, f64)> = groups
            .iter()
            .enumerate()
            .map(|(i, g)| {
                (
                    i,
                    g.example.y,
                    ips_weight(g.rollouts[0].log_prob_old.exp(), g.example.e0).unwrap(),
                )
            })
            .collect();
        let weights = snips_normalize(&raw, cfg.snips_delta);
        for (i, g) in groups.iter_mut().enumerate() {
            g.anchor_weight = weights[&i];
        }

        // perturb away from the rollout policy, staying far from clip kinks
        let mut policy = policy_old.clone();
        for w in policy.weights.iter_mut() {
            *w += stream.gen_range(-0.005..0.005);
        }
        let (updated, _) = update_step(&policy, &policy_old, &groups, &cfg).unwrap();
        let grad = &updated.weights - &policy.weights; // lr = 1

        let h = 1e-5;
        for _ in 0..30 {
            let row = stream.gen_range(0..v);
            let col = stream.gen_range(0..2 * v);
            let mut plus = policy.clone();
            plus.weights[[row, col]] += h;
            let mut minus = policy.clone();
            minus.weights[[row, col]] -= h;
            let fd = (surrogate_objective(&plus, &groups, &cfg).unwrap()
                - surrogate_objective(&minus, &groups, &cfg).unwrap())
                / (2.0 * h);
            let analytic = grad[[row, col]];
            let scale = analytic.abs().max(fd.abs()).max(1e-4);
            assert!(
                (analytic - fd).abs() / scale < 1e-6,
                "grad[{row},{col}] analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn non_finite_gradient_names_offending_group() {
        let policy = random_policy(12, 9);
        // negative advantage on the sample: the min keeps the unclipped
        // branch, so the overflowing ratio reaches the gradient
        let mut group = handmade_group(&policy, 9, vec![1.0, -1.0]);
        group.rollouts[1].log_prob_old = -1.0e4; // ratio overflows to infinity
        let cfg = UpdateConfig {
            group_size: 2,
            ..UpdateConfig::default()
        };
        match update_step(&policy, &policy, &[group], &cfg) {
            Err(Error::NonFiniteGradient { group: 0, user_id: 7, .. }) => {}
            other => panic!("expected non-finite gradient error, got {other:?}"),
        }
    }

    #[test]
    fn anchor_weight_is_a_literal_constant_in_the_gradient() {
        let v = 8;
        let policy_old = random_policy(13, v);
        let mut stream = rng::stream(14);
        let cfg = UpdateConfig {
            group_size: 4,
            ..UpdateConfig::default()
        };
        let ex = test_example(&policy_old, v, 5, false);
        let mut group =
            build_anchored_group(&policy_old, &ex, 4, &cfg.reward, &mut stream).unwrap();
        // stage 1: weight produced by the SNIPS pipeline over a perturbed e0
        let mut perturbed = group.example.clone();
        perturbed.e0 *= 0.5;
        let w_raw = ips_weight(group.rollouts[0].log_prob_old.exp(), perturbed.e0).unwrap();
        let normalized = snips_normalize(&[(0, perturbed.y, w_raw)], cfg.snips_delta)[&0];
        group.example = perturbed;
        group.anchor_weight = normalized;
        let (updated_pipeline, _) = update_step(&policy_old, &policy_old, &[group.clone()], &cfg).unwrap();
        // stage 2: the same weight injected as an opaque literal
        let mut literal = group.clone();
        literal.anchor_weight = normalized;
        let (updated_literal, _) = update_step(&policy_old, &policy_old, &[literal], &cfg).unwrap();
        assert_eq!(updated_pipeline.weights, updated_literal.weights);
    }

    #[test]
    fn surrogate_invariant_to_common_score_shift() {
        let v = 8;
        let policy_old = random_policy(15, v);
        let mut stream = rng::stream(16);
        let cfg = UpdateConfig {
            group_size: 3,
            ..UpdateConfig::default()
        };
        let ex = test_example(&policy_old, v, 4, true);
        let group = build_anchored_group(&policy_old, &ex, 3, &cfg.reward, &mut stream).unwrap();
        let base = surrogate_objective(&policy_old, &[group.clone()], &cfg).unwrap();

        // add one shared vector to every scoring row: all candidate scores
        // shift by the same constant and the distribution is unchanged
        let shift: Vec<f64> = (0..2 * v).map(|_| stream.gen_range(-1.0..1.0)).collect();
        let mut shifted = policy_old.clone();
        for mut row in shifted.weights.rows_mut() {
            for (w, s) in row.iter_mut().zip(&shift) {
                *w += s;
            }
        }
        let shifted_value = surrogate_objective(&shifted, &[group], &cfg).unwrap();
        assert!((base - shifted_value).abs() < 1e-12);
    }

    #[test]
    fn surrogate_ignores_anchor_log_prob() {
        let v = 8;
        let policy_old = random_policy(17, v);
        let mut stream = rng::stream(18);
        let cfg = UpdateConfig {
            group_size: 3,
            ..UpdateConfig::default()
        };
        let ex = test_example(&policy_old, v, 4, true);
        let mut group = build_anchored_group(&policy_old, &ex, 3, &cfg.reward, &mut stream).unwrap();
        let base = surrogate_objective(&policy_old, &[group.clone()], &cfg).unwrap();
        group.rollouts[0].log_prob_old = -42.0;
        let perturbed = surrogate_objective(&policy_old, &[group], &cfg).unwrap();
        assert_eq!(base.to_bits(), perturbed.to_bits());
    }

    #[test]
    fn ratio_one_surrogate_equals_advantage_mean() {
        let v = 8;
        let policy_old = random_policy(19, v);
        let mut stream = rng::stream(20);
        let cfg = UpdateConfig {
            group_size: 4,
            ..UpdateConfig::default()
        };
        let ex = test_example(&policy_old, v, 5, false);
        let group = build_anchored_group(&policy_old, &ex, 4, &cfg.reward, &mut stream).unwrap();
        let adv = advantages_bandit(&group, &cfg);
        let expected = adv.advantages.iter().sum::<f64>() / adv.advantages.len() as f64;
        let value = surrogate_objective(&policy_old, &[group], &cfg).unwrap();
        assert!((value - expected).abs() < 1e-12);
    }

    #[test]
    fn stratified_batches_contain_both_feedback_types() {
        let mut stream = rng::stream(21);
        let ys: Vec<bool> = (0..40).map(|i| i % 5 == 0).collect(); // 8 positive
        let batches = stratified_batches(&ys, 4, true, &mut stream);
        assert!(batches.len() <= 8);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        for batch in &batches {
            assert!(batch.iter().any(|&i| ys[i]), "batch without positives");
            assert!(batch.iter().any(|&i| !ys[i]), "batch without negatives");
        }
    }

    fn synthetic_log(seed: u64, v: usize, users: usize, m: usize) -> (PolicyParams, BanditLog) {
        let cfg = crate::synth::SynthConfig {
            catalog_size: v,
            num_users: users,
            prefix_len: 3,
            horizon: 3,
            ..crate::synth::SynthConfig::default()
        };
        let seqs = crate::synth::generate_sequences(&cfg, seed).unwrap();
        let policy = PolicyParams::zeros(v, 1.0).unwrap();
        let log = make_bandit_log(&policy, &seqs, m, 1.0, 0, seed).unwrap();
        (policy, log)
    }

    #[test]
    fn epoch_accepts_single_stratum_logs() {
        let (policy, mut log) = synthetic_log(22, 60, 20, 4);
        log.examples.retain(|ex| !ex.y);
        assert!(!log.examples.is_empty());
        let cfg = UpdateConfig {
            group_size: 3,
            batch_size: 8,
            ..UpdateConfig::default()
        };
        let mut stream = rng::stream(23);
        let (updated, stats) = run_epoch(&policy, &log, &cfg, &mut stream).unwrap();
        assert!(updated.weights.iter().all(|w| w.is_finite()));
        assert!(stats.mean_reward_pos.is_nan());
        assert!(stats.mean_reward_neg.is_finite());
    }

    #[test]
    fn epoch_is_deterministic() {
        let (policy, log) = synthetic_log(24, 60, 15, 4);
        let cfg = UpdateConfig {
            group_size: 4,
            batch_size: 8,
            ..UpdateConfig::default()
        };
        let (a, _) = run_epoch(&policy, &log, &cfg, &mut rng::stream(25)).unwrap();
        let (b, _) = run_epoch(&policy, &log, &cfg, &mut rng::stream(25)).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn vanilla_epochs_raise_positive_exposure_probability() {
        let (policy, log) = synthetic_log(26, 80, 40, 5);
        let positives: Vec<&LoggedExample> =
            log.examples.iter().filter(|ex| ex.y).collect();
        assert!(!positives.is_empty());
        let mean_match_prob = |p: &PolicyParams| {
            positives
                .iter()
                .map(|ex| {
                    p.item_distribution(&ex.context, &ex.candidates)
                        .unwrap()
                        .prob_of(ex.a_log)
                        .unwrap()
                })
                .sum::<f64>()
                / positives.len() as f64
        };
        let cfg = UpdateConfig {
            group_size: 6,
            batch_size: 16,
            mode: UpdateMode::VanillaGrpo,
            learning_rate: 0.1,
            ..UpdateConfig::default()
        };
        let before = mean_match_prob(&policy);
        let mut stream = rng::stream(27);
        let mut current = policy;
        let mut trace = vec![before];
        for _ in 0..4 {
            let (next, _) = run_epoch(&current, &log, &cfg, &mut stream).unwrap();
            current = next;
            trace.push(mean_match_prob(&current));
        }
        assert!(
            trace.last().unwrap() > trace.first().unwrap(),
            "no reinforcement trend: {trace:?}"
        );
    }
}
