//! Synthetic one-step contextual-bandit logs built from next-item sequences.
//!
//! Each user sequence of length `T + N` contributes one logged example per
//! update step `t' in {T, ..., T+N-2}`: the prefix is the context, the next
//! observed item is the latent positive of an `M`-item candidate set, the
//! logging policy's softmax exposes one candidate, and the binary feedback
//! marks whether the exposure hit the positive. The final item `x_{T+N}` is
//! reserved for held-out evaluation and never enters a candidate set.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::{CandidateSet, Context, ItemId, PolicyParams};
use crate::rng::{self, tag};

pub const LOG_FORMAT_VERSION: u32 = 1;

/// A chronological interaction sequence split into a supervised prefix of
/// length `prefix_len` (T) and a feedback horizon of length `horizon` (N).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: u64,
    pub items: Vec<ItemId>,
    pub prefix_len: usize,
    pub horizon: usize,
}

impl UserSequence {
    pub fn new(user_id: u64, items: Vec<ItemId>, prefix_len: usize, horizon: usize) -> Result<Self> {
        if prefix_len < 1 {
            return Err(Error::Config("prefix length T must be >= 1".into()));
        }
        if horizon < 2 {
            return Err(Error::Config("feedback horizon N must be >= 2".into()));
        }
        if items.len() != prefix_len + horizon {
            return Err(Error::Config(format!(
                "sequence length {} does not equal T + N = {}",
                items.len(),
                prefix_len + horizon
            )));
        }
        Ok(Self {
            user_id,
            items,
            prefix_len,
            horizon,
        })
    }

    /// The held-out evaluation target `x_{T+N}`.
    pub fn held_out(&self) -> ItemId {
        self.items[self.prefix_len + self.horizon - 1]
    }

    /// Update steps `t'` (as prefix lengths) that produce logged examples:
    /// `T ..= T+N-2`. The positive of step `t'` is `items[t']`.
    pub fn update_steps(&self) -> std::ops::RangeInclusive<usize> {
        self.prefix_len..=self.prefix_len + self.horizon - 2
    }

    /// Evaluation context `x_{1:T+N-1}` paired with the held-out target.
    pub fn eval_history(&self) -> &[ItemId] {
        &self.items[..self.prefix_len + self.horizon - 1]
    }
}

/// One bandit-feedback record: context, candidates, exposed item, binary
/// feedback, and the exact logging propensity of the exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedExample {
    pub context: Context,
    pub candidates: CandidateSet,
    pub a_log: ItemId,
    pub y: bool,
    pub e0: f64,
    pub round: usize,
}

/// Generator metadata recorded in the log header.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMeta {
    pub seed: u64,
    pub m: usize,
    pub tau: f64,
    pub policy_fingerprint: String,
}

/// A full bandit log plus the metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditLog {
    pub examples: Vec<LoggedExample>,
    pub catalog_size: usize,
    pub meta: LogMeta,
}

/// Build the candidate set for update step `t_prime` of `seq`: the latent
/// positive `items[t_prime]` plus `m - 1` distractors drawn uniformly without
/// replacement from catalog items outside the sequence. The held-out target
/// can never appear: it belongs to the sequence, and the positive is rejected
/// if it collides with the held-out item. Candidate order is shuffled.
pub fn build_candidate_set<R: Rng>(
    seq: &UserSequence,
    t_prime: usize,
    m: usize,
    catalog_size: usize,
    rng: &mut R,
) -> Result<CandidateSet> {
    if !seq.update_steps().contains(&t_prime) {
        return Err(Error::Config(format!(
            "t'={t_prime} outside update range {:?}",
            seq.update_steps()
        )));
    }
    candidate_set_at(seq, t_prime, m, catalog_size, rng)
}

/// Candidate construction shared with supervised-prefix contexts, where
/// `pos_idx` may lie below `T`. `items[pos_idx]` is the latent positive.
pub(crate) fn candidate_set_at<R: Rng>(
    seq: &UserSequence,
    pos_idx: usize,
    m: usize,
    catalog_size: usize,
    rng: &mut R,
) -> Result<CandidateSet> {
    if m < 1 {
        return Err(Error::Config("candidate set size M must be >= 1".into()));
    }
    let positive = seq.items[pos_idx];
    if positive == seq.held_out() {
        return Err(Error::Config(format!(
            "latent positive {positive} equals the held-out target of user {}",
            seq.user_id
        )));
    }
    let forbidden: HashSet<ItemId> = seq.items.iter().copied().collect();
    let pool = catalog_size - forbidden.len();
    if m - 1 > pool {
        return Err(Error::Config(format!(
            "need {} distractors but only {pool} catalog items lie outside the sequence",
            m - 1
        )));
    }
    let mut items = Vec::with_capacity(m);
    items.push(positive);
    while items.len() < m {
        let cand = ItemId(rng.gen_range(0..catalog_size as u32));
        if !forbidden.contains(&cand) && !items.contains(&cand) {
            items.push(cand);
        }
    }
    items.shuffle(rng);
    let positive_index = items.iter().position(|&it| it == positive);
    CandidateSet::new(items, positive_index)
}

/// Binary feedback: the exposure hit the next observed item. A miss is a
/// no-positive-response proxy, not an explicit negative label.
pub fn assign_feedback(a_log: ItemId, next_item: ItemId) -> bool {
    a_log == next_item
}

/// Generate one-step bandit feedback for every `(sequence, t')` pair under
/// `policy` as the logging policy at temperature `tau`.
///
/// Each sequence consumes an independent sub-stream derived from
/// `(seed, user_id)`, so logs are reproducible and independent of sequence
/// iteration order.
pub fn make_bandit_log(
    policy: &PolicyParams,
    seqs: &[UserSequence],
    m: usize,
    tau: f64,
    round: usize,
    seed: u64,
) -> Result<BanditLog> {
    let catalog_size = policy.catalog_size();
    let mut examples = Vec::new();
    for seq in seqs {
        let mut stream = rng::substream(seed, tag::LOGGING, seq.user_id);
        for t_prime in seq.update_steps() {
            let candidates = build_candidate_set(seq, t_prime, m, catalog_size, &mut stream)?;
            let context =
                Context::from_history(seq.user_id, seq.items[..t_prime].to_vec(), catalog_size)?;
            let dist = policy.item_distribution_at(&context, &candidates, tau)?;
            let (a_log, e0) = dist.sample(&mut stream);
            let y = assign_feedback(a_log, seq.items[t_prime]);
            examples.push(LoggedExample {
                context,
                candidates,
                a_log,
                y,
                e0,
                round,
            });
        }
    }
    Ok(BanditLog {
        examples,
        catalog_size,
        meta: LogMeta {
            seed,
            m,
            tau,
            policy_fingerprint: policy.fingerprint(),
        },
    })
}

fn fmt_f64(x: f64) -> String {
    // 17 significant digits: enough for bit-exact f64 round-trips.
    format!("{x:.16e}")
}

fn join_items(items: &[ItemId]) -> String {
    items
        .iter()
        .map(|it| it.0.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Write a log as line-delimited text: one metadata header, then one record
/// per line. Propensities survive a round-trip bit-exactly.
pub fn write_log(log: &BanditLog, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "abpo-bandit-log version={} seed={} m={} tau={} v={} policy={}",
        LOG_FORMAT_VERSION,
        log.meta.seed,
        log.meta.m,
        fmt_f64(log.meta.tau),
        log.catalog_size,
        log.meta.policy_fingerprint
    )?;
    for ex in &log.examples {
        writeln!(
            w,
            "user_id={} t_prime={} history={} candidates={} positive_index={} a_log={} y={} e0={} round={}",
            ex.context.user_id,
            ex.context.history.len(),
            join_items(&ex.context.history),
            join_items(&ex.candidates.items),
            ex.candidates
                .positive_index
                .map(|i| i.to_string())
                .unwrap_or_else(|| "none".into()),
            ex.a_log,
            u8::from(ex.y),
            fmt_f64(ex.e0),
            ex.round
        )?;
    }
    w.flush()?;
    Ok(())
}

struct FieldMap<'a> {
    line: usize,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> FieldMap<'a> {
    fn parse(line_no: usize, text: &'a str) -> Result<Self> {
        let mut pairs = Vec::new();
        for token in text.split_whitespace() {
            let (k, v) = token.split_once('=').ok_or(Error::Parse {
                line: line_no,
                msg: format!("expected key=value, got '{token}'"),
            })?;
            pairs.push((k, v));
        }
        Ok(Self {
            line: line_no,
            pairs,
        })
    }

    fn get(&self, key: &str) -> Result<&'a str> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or(Error::Parse {
                line: self.line,
                msg: format!("missing field '{key}'"),
            })
    }

    fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.parse().map_err(|_| Error::Parse {
            line: self.line,
            msg: format!("field '{key}' is not a valid {}", std::any::type_name::<T>()),
        })
    }

    fn get_items(&self, key: &str) -> Result<Vec<ItemId>> {
        let raw = self.get(key)?;
        raw.split(',')
            .map(|tok| {
                tok.parse::<u32>().map(ItemId).map_err(|_| Error::Parse {
                    line: self.line,
                    msg: format!("field '{key}' has a non-integer entry '{tok}'"),
                })
            })
            .collect()
    }
}

/// Read a log written by [`write_log`], validating every record.
pub fn read_log(path: &Path) -> Result<BanditLog> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header_text = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file: missing header".into(),
    })??;
    let header_body = header_text
        .strip_prefix("abpo-bandit-log ")
        .ok_or(Error::Parse {
            line: 1,
            msg: "not an abpo bandit log".into(),
        })?;
    let header = FieldMap::parse(1, header_body)?;
    let version: u32 = header.get_parsed("version")?;
    if version != LOG_FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported log version {version}"),
        });
    }
    let catalog_size: usize = header.get_parsed("v")?;
    let meta = LogMeta {
        seed: header.get_parsed("seed")?,
        m: header.get_parsed("m")?,
        tau: header.get_parsed("tau")?,
        policy_fingerprint: header.get("policy")?.to_string(),
    };

    let mut examples = Vec::new();
    for (offset, line) in lines.enumerate() {
        let line_no = offset + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let fields = FieldMap::parse(line_no, &text)?;
        let user_id: u64 = fields.get_parsed("user_id")?;
        let t_prime: usize = fields.get_parsed("t_prime")?;
        let history = fields.get_items("history")?;
        if history.len() != t_prime {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "t_prime={t_prime} does not match history length {}",
                    history.len()
                ),
            });
        }
        let cand_items = fields.get_items("candidates")?;
        let positive_index = match fields.get("positive_index")? {
            "none" => None,
            raw => Some(raw.parse::<usize>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid positive_index '{raw}'"),
            })?),
        };
        let candidates = CandidateSet::new(cand_items, positive_index).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let a_log = ItemId(fields.get_parsed::<u32>("a_log")?);
        let y = match fields.get("y")? {
            "0" => false,
            "1" => true,
            raw => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("feedback y must be 0 or 1, got '{raw}'"),
                })
            }
        };
        let e0: f64 = fields.get_parsed("e0")?;
        let round: usize = fields.get_parsed("round")?;

        if candidates.position_of(a_log).is_none() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("logged item {a_log} not in its candidate set"),
            });
        }
        if !(e0 > 0.0 && e0 <= 1.0) {
            return Err(Error::Validation(format!(
                "line {line_no}: propensity {e0} outside (0, 1]"
            )));
        }
        if let Some(pos) = candidates.positive_item() {
            if y != (a_log == pos) {
                return Err(Error::Validation(format!(
                    "line {line_no}: feedback y={} inconsistent with positive item {pos}",
                    u8::from(y)
                )));
            }
        }
        let context = Context::from_history(user_id, history, catalog_size).map_err(|e| {
            Error::Parse {
                line: line_no,
                msg: e.to_string(),
            }
        })?;
        examples.push(LoggedExample {
            context,
            candidates,
            a_log,
            y,
            e0,
            round,
        });
    }
    Ok(BanditLog {
        examples,
        catalog_size,
        meta,
    })
}
