//! Closed-loop experiment driver: supervised initialization, per-round
//! log-update-evaluate cycles, theory verification, and report emission.
//!
//! Each round regenerates the bandit log under the currently deployed policy
//! (its softmax becomes the round's logging propensities), updates per the
//! configured mode, and evaluates on fixed held-out candidate sets built once
//! per run. Output is one directory per seed: metric rows, per-epoch stats,
//! the per-round logs, and checkpoint fingerprints.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::Path;

use rand::Rng;

use crate::config::{ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::logging::{self, candidate_set_at, make_bandit_log, UserSequence};
use crate::metrics::{self, PopularityModel, RankedList};
use crate::optimizer::{run_epoch, EpochStats};
use crate::policy::{CandidateSet, Context, ItemId, PolicyParams};
use crate::rng::{self, tag};
use crate::synth;
use crate::theory;

pub const POLICY_FORMAT_VERSION: u32 = 1;

/// Per-round evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub hr1: f64,
    pub hr5: f64,
    pub ndcg5: f64,
    pub div1: f64,
    pub div5: f64,
    /// Matching rates on the round's log; NaN for round 0 and no-update runs.
    pub match_pos: f64,
    pub match_neg: f64,
    pub epoch_stats: Vec<EpochStats>,
    pub fingerprint: String,
}

impl RoundReport {
    /// Metric rows keyed by (round, metric, k, value).
    pub fn metric_rows(&self) -> Vec<String> {
        let r = self.round;
        vec![
            format!("{r},hr,1,{}", self.hr1),
            format!("{r},hr,5,{}", self.hr5),
            format!("{r},ndcg,5,{}", self.ndcg5),
            format!("{r},div,1,{}", self.div1),
            format!("{r},div,5,{}", self.div5),
            format!("{r},match_pos,0,{}", self.match_pos),
            format!("{r},match_neg,0,{}", self.match_neg),
        ]
    }
}

/// One fixed held-out evaluation instance.
#[derive(Debug, Clone)]
pub struct EvalInstance {
    pub context: Context,
    pub candidates: CandidateSet,
}

/// Build the evaluation candidate set for a sequence: the held-out target
/// plus `m - 1` uniform distractors from outside the sequence, shuffled.
pub fn eval_candidate_set<R: Rng>(
    seq: &UserSequence,
    m: usize,
    catalog_size: usize,
    rng: &mut R,
) -> Result<CandidateSet> {
    use rand::seq::SliceRandom;
    let target = seq.held_out();
    let forbidden: HashSet<ItemId> = seq.items.iter().copied().collect();
    let pool = catalog_size - forbidden.len();
    if m - 1 > pool {
        return Err(Error::Config(format!(
            "need {} evaluation distractors but only {pool} items lie outside the sequence",
            m - 1
        )));
    }
    let mut items = vec![target];
    while items.len() < m {
        let cand = ItemId(rng.gen_range(0..catalog_size as u32));
        if !forbidden.contains(&cand) && !items.contains(&cand) {
            items.push(cand);
        }
    }
    items.shuffle(rng);
    let positive_index = items.iter().position(|&it| it == target);
    CandidateSet::new(items, positive_index)
}

/// Fixed evaluation instances, one per sequence, built once per run so that
/// rounds are comparable and a no-update run scores identically every round.
pub fn build_eval_instances(
    seqs: &[UserSequence],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<EvalInstance>> {
    seqs.iter()
        .map(|seq| {
            let mut stream = rng::substream(seed, tag::EVAL, seq.user_id);
            let candidates =
                eval_candidate_set(seq, cfg.candidate_size, cfg.catalog_size, &mut stream)?;
            let context = Context::from_history(
                seq.user_id,
                seq.eval_history().to_vec(),
                cfg.catalog_size,
            )?;
            Ok(EvalInstance {
                context,
                candidates,
            })
        })
        .collect()
}

/// Next-item maximum-likelihood initialization over the supervised prefix:
/// full-batch gradient ascent on the mean candidate-conditional
/// log-likelihood, with candidate sets built once the same way as
/// training-time logs. Returns the fitted policy and the per-epoch mean
/// log-likelihood trace (one entry per epoch, evaluated before each step).
pub fn supervised_init(
    seqs: &[UserSequence],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(PolicyParams, Vec<f64>)> {
    let mut policy = PolicyParams::zeros(cfg.catalog_size, cfg.temperature)?;
    // supervised pairs: history x_{1:t} -> positive x_{t+1}, for t < T
    let mut instances = Vec::new();
    for seq in seqs {
        let mut stream = rng::substream(seed, tag::INIT, seq.user_id);
        for t in 1..seq.prefix_len {
            let candidates =
                candidate_set_at(seq, t, cfg.candidate_size, cfg.catalog_size, &mut stream)?;
            let context =
                Context::from_history(seq.user_id, seq.items[..t].to_vec(), cfg.catalog_size)?;
            instances.push((context, candidates, seq.items[t]));
        }
    }
    let mut trace = Vec::with_capacity(cfg.init_epochs);
    if instances.is_empty() {
        return Ok((policy, trace));
    }
    let scale = 1.0 / instances.len() as f64;
    for _ in 0..cfg.init_epochs {
        let mut grad = ndarray::Array2::zeros(policy.weights.dim());
        let mut log_likelihood = 0.0;
        for (context, candidates, target) in &instances {
            log_likelihood += policy.log_prob(context, candidates, *target)?;
            policy
                .log_prob_gradient(context, candidates, *target)?
                .axpy_into(scale, &mut grad);
        }
        if !log_likelihood.is_finite() {
            return Err(Error::Config(
                "non-finite supervised loss; lower init_learning_rate".into(),
            ));
        }
        trace.push(log_likelihood * scale);
        let mut weights = policy.weights;
        weights.scaled_add(cfg.init_learning_rate, &grad);
        policy = PolicyParams::new(weights, cfg.temperature)?;
    }
    Ok((policy, trace))
}

/// Rank every evaluation instance and compute the round's metric values.
pub fn evaluate_policy(
    policy: &PolicyParams,
    instances: &[EvalInstance],
    pop: &PopularityModel,
) -> Result<(f64, f64, f64, f64, f64)> {
    let lists: Vec<RankedList> = instances
        .iter()
        .map(|inst| metrics::rank_candidates(policy, &inst.context, &inst.candidates, 5))
        .collect::<Result<_>>()?;
    Ok((
        metrics::hit_rate_at_k(&lists, 1),
        metrics::hit_rate_at_k(&lists, 5),
        metrics::ndcg_at_k(&lists, 5),
        metrics::diversity_at_k(&lists, pop, 1),
        metrics::diversity_at_k(&lists, pop, 5),
    ))
}

/// Run the full closed loop for one seed, writing artifacts incrementally so
/// a failed round leaves the previous rounds and checkpoint on disk.
///
/// Layout under `out_dir`: `metrics.csv`, `epoch_stats.csv`,
/// `fingerprints.txt`, `policy.txt` (latest checkpoint), `logs/round_<r>.log`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<Vec<RoundReport>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir.join("logs"))?;
    let seqs = synth::generate_sequences(&cfg.synth_config(), seed)?;
    let instances = build_eval_instances(&seqs, cfg, seed)?;
    let pop = metrics::popularity_estimate(&seqs, cfg.catalog_size);

    let mut metrics_file = BufWriter::new(std::fs::File::create(out_dir.join("metrics.csv"))?);
    writeln!(metrics_file, "round,metric,k,value")?;
    let mut stats_file = BufWriter::new(std::fs::File::create(out_dir.join("epoch_stats.csv"))?);
    writeln!(stats_file, "{}", EpochStats::csv_header())?;
    let mut fp_file = BufWriter::new(std::fs::File::create(out_dir.join("fingerprints.txt"))?);

    let (init_policy, _) = supervised_init(&seqs, cfg, seed)?;
    let mut policy = init_policy.clone();
    let update_cfg = cfg.update_config();

    let mut reports = Vec::with_capacity(cfg.rounds + 1);
    let emit = |report: &RoundReport,
                    metrics_file: &mut BufWriter<std::fs::File>,
                    stats_file: &mut BufWriter<std::fs::File>,
                    fp_file: &mut BufWriter<std::fs::File>|
     -> Result<()> {
        for row in report.metric_rows() {
            writeln!(metrics_file, "{row}")?;
        }
        for (epoch, stats) in report.epoch_stats.iter().enumerate() {
            writeln!(stats_file, "{}", stats.csv_row(report.round, epoch))?;
        }
        writeln!(fp_file, "{},{}", report.round, report.fingerprint)?;
        metrics_file.flush()?;
        stats_file.flush()?;
        fp_file.flush()?;
        Ok(())
    };

    let (hr1, hr5, ndcg5, div1, div5) = evaluate_policy(&policy, &instances, &pop)?;
    let round0 = RoundReport {
        round: 0,
        hr1,
        hr5,
        ndcg5,
        div1,
        div5,
        match_pos: f64::NAN,
        match_neg: f64::NAN,
        epoch_stats: vec![],
        fingerprint: policy.fingerprint(),
    };
    emit(&round0, &mut metrics_file, &mut stats_file, &mut fp_file)?;
    save_policy(&policy, &out_dir.join("policy.txt"))?;
    reports.push(round0);

    for round in 1..=cfg.rounds {
        let report = if cfg.mode == Mode::NoUpdate {
            let (hr1, hr5, ndcg5, div1, div5) = evaluate_policy(&policy, &instances, &pop)?;
            RoundReport {
                round,
                hr1,
                hr5,
                ndcg5,
                div1,
                div5,
                match_pos: f64::NAN,
                match_neg: f64::NAN,
                epoch_stats: vec![],
                fingerprint: policy.fingerprint(),
            }
        } else {
            let logging_policy = if cfg.relog_each_round {
                &policy
            } else {
                &init_policy
            };
            let log = make_bandit_log(
                logging_policy,
                &seqs,
                cfg.candidate_size,
                cfg.temperature,
                round,
                rng::mix(seed, round as u64),
            )?;
            logging::write_log(&log, &out_dir.join(format!("logs/round_{round}.log")))?;

            let mut epoch_stats = Vec::with_capacity(cfg.epochs_per_round);
            for epoch in 0..cfg.epochs_per_round {
                let mut stream = rng::substream(
                    seed,
                    tag::GROUPS,
                    (round * 10_000 + epoch) as u64,
                );
                let (next, stats) = run_epoch(&policy, &log, &update_cfg, &mut stream)?;
                policy = next;
                epoch_stats.push(stats);
            }

            let mut match_stream = rng::substream(seed, tag::EVAL, (round * 7 + 3) as u64);
            let (match_pos, match_neg) =
                metrics::matching_rates(&policy, &log, cfg.match_samples, &mut match_stream)?;
            let (hr1, hr5, ndcg5, div1, div5) = evaluate_policy(&policy, &instances, &pop)?;
            RoundReport {
                round,
                hr1,
                hr5,
                ndcg5,
                div1,
                div5,
                match_pos,
                match_neg,
                epoch_stats,
                fingerprint: policy.fingerprint(),
            }
        };
        emit(&report, &mut metrics_file, &mut stats_file, &mut fp_file)?;
        save_policy(&policy, &out_dir.join("policy.txt"))?;
        reports.push(report);
    }
    Ok(reports)
}

/// Run every configured seed into `out_dir/seed_<s>/`, echoing the resolved
/// configuration once at the top level.
pub fn run_closed_loop(cfg: &ExperimentConfig) -> Result<Vec<(u64, Vec<RoundReport>)>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.echo())?;
    let mut all = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let seed_dir = cfg.out_dir.join(format!("seed_{seed}"));
        let reports = run_seed(cfg, seed, &seed_dir)?;
        all.push((seed, reports));
    }
    Ok(all)
}

/// Run the full verification grid, write one CSV row per statement, and
/// report whether everything passed.
pub fn verify_theory(num_draws: usize, seed: u64, out_path: Option<&Path>) -> Result<bool> {
    let reports = theory::default_suite(num_draws, seed)?;
    let mut text = String::from(theory::CheckReport::csv_header());
    text.push('\n');
    for report in &reports {
        text.push_str(&report.csv_row());
        text.push('\n');
    }
    if let Some(path) = out_path {
        std::fs::write(path, &text)?;
    }
    print!("{text}");
    Ok(reports.iter().all(|r| r.pass))
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Persist a policy as a text checkpoint (17-significant-digit weights).
pub fn save_policy(policy: &PolicyParams, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "abpo-policy version={} v={} d={} tau={}",
        POLICY_FORMAT_VERSION,
        policy.catalog_size(),
        policy.feature_dim(),
        fmt_f64(policy.temperature)
    )?;
    for row in policy.weights.rows() {
        let mut line = String::with_capacity(row.len() * 24);
        for (i, value) in row.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&fmt_f64(*value));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`save_policy`].
pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty policy file".into(),
    })??;
    let body = header.strip_prefix("abpo-policy ").ok_or(Error::Parse {
        line: 1,
        msg: "not an abpo policy file".into(),
    })?;
    let mut version = None;
    let mut v = None;
    let mut d = None;
    let mut tau = None;
    for token in body.split_whitespace() {
        let (key, value) = token.split_once('=').ok_or(Error::Parse {
            line: 1,
            msg: format!("bad header token '{token}'"),
        })?;
        match key {
            "version" => version = value.parse::<u32>().ok(),
            "v" => v = value.parse::<usize>().ok(),
            "d" => d = value.parse::<usize>().ok(),
            "tau" => tau = value.parse::<f64>().ok(),
            _ => {}
        }
    }
    let (Some(version), Some(v), Some(d), Some(tau)) = (version, v, d, tau) else {
        return Err(Error::Parse {
            line: 1,
            msg: "policy header missing version/v/d/tau".into(),
        });
    };
    if version != POLICY_FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported policy version {version}"),
        });
    }
    let mut weights = ndarray::Array2::zeros((v, d));
    let mut rows = 0usize;
    for (offset, line) in lines.enumerate() {
        let line_no = offset + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        if rows >= v {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("more than {v} weight rows"),
            });
        }
        let mut cols = 0usize;
        for token in text.split_whitespace() {
            if cols >= d {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("more than {d} columns"),
                });
            }
            weights[[rows, cols]] = token.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad weight '{token}'"),
            })?;
            cols += 1;
        }
        if cols != d {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {d} columns, got {cols}"),
            });
        }
        rows += 1;
    }
    if rows != v {
        return Err(Error::Parse {
            line: rows + 1,
            msg: format!("expected {v} weight rows, got {rows}"),
        });
    }
    PolicyParams::new(weights, tau)
}
