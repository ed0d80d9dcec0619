//! Experiment configuration: defaults, flat key=value files, flag overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optimizer::{RewardConfig, UpdateConfig, UpdateMode};
use crate::policy;
use crate::synth::SynthConfig;

/// How rounds update the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Abpo,
    VanillaGrpo,
    NoUpdate,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abpo" => Ok(Mode::Abpo),
            "vanilla_grpo" => Ok(Mode::VanillaGrpo),
            "no_update" => Ok(Mode::NoUpdate),
            other => Err(Error::Config(format!(
                "mode must be abpo | vanilla_grpo | no_update, got '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Abpo => "abpo",
            Mode::VanillaGrpo => "vanilla_grpo",
            Mode::NoUpdate => "no_update",
        };
        write!(f, "{s}")
    }
}

/// Every knob of a closed-loop experiment. The feature dimension is derived
/// from the catalog size by the policy's feature map and is not a free field.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub catalog_size: usize,
    pub num_users: usize,
    pub prefix_len: usize,
    pub horizon: usize,
    pub candidate_size: usize,
    pub temperature: f64,
    pub group_size: usize,
    pub clip: f64,
    pub snips_delta: f64,
    pub std_floor: f64,
    pub lambda_sc: f64,
    pub malformation_prob: f64,
    pub format_reward_on: bool,
    pub learning_rate: f64,
    pub init_learning_rate: f64,
    pub init_epochs: usize,
    pub epochs_per_round: usize,
    pub rounds: usize,
    pub mode: Mode,
    pub batch_size: usize,
    pub stratified: bool,
    /// Re-log each round under the current policy; when false, the initial
    /// policy keeps logging forever (ablation).
    pub relog_each_round: bool,
    /// Monte-Carlo samples per example for matching-rate diagnostics.
    pub match_samples: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    // latent-preference generator knobs
    pub embed_dim: usize,
    pub sharpness: f64,
    pub shared_taste: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            catalog_size: 500,
            num_users: 200,
            prefix_len: 8,
            horizon: 4,
            candidate_size: 50,
            temperature: 1.0,
            group_size: 8,
            clip: 0.2,
            snips_delta: 1e-6,
            std_floor: 1e-8,
            lambda_sc: 0.1,
            malformation_prob: 0.05,
            format_reward_on: true,
            learning_rate: 0.05,
            init_learning_rate: 1.0,
            init_epochs: 40,
            epochs_per_round: 2,
            rounds: 4,
            mode: Mode::Abpo,
            batch_size: 32,
            stratified: true,
            relog_each_round: true,
            match_samples: 100,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: PathBuf::from("runs"),
            embed_dim: 8,
            sharpness: 6.0,
            shared_taste: 0.5,
        }
    }
}

fn check(ok: bool, field: &str, bound: &str, value: impl std::fmt::Display) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{field} must satisfy {bound}, got {value}"
        )))
    }
}

impl ExperimentConfig {
    /// Feature dimension induced by the catalog (bag-of-items + recency).
    pub fn feature_dim(&self) -> usize {
        policy::feature_dim(self.catalog_size)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.catalog_size >= 2, "catalog_size", ">= 2", self.catalog_size)?;
        check(self.num_users >= 1, "num_users", ">= 1", self.num_users)?;
        check(self.prefix_len >= 1, "prefix_len", ">= 1", self.prefix_len)?;
        check(self.horizon >= 2, "horizon", ">= 2", self.horizon)?;
        check(
            self.candidate_size >= 1,
            "candidate_size",
            ">= 1",
            self.candidate_size,
        )?;
        check(self.temperature > 0.0, "temperature", "> 0", self.temperature)?;
        check(self.group_size >= 2, "group_size", ">= 2", self.group_size)?;
        check(
            self.clip > 0.0 && self.clip < 1.0,
            "clip",
            "in (0, 1)",
            self.clip,
        )?;
        check(self.snips_delta > 0.0, "snips_delta", "> 0", self.snips_delta)?;
        check(self.std_floor > 0.0, "std_floor", "> 0", self.std_floor)?;
        check(self.lambda_sc >= 0.0, "lambda_sc", ">= 0", self.lambda_sc)?;
        check(
            (0.0..1.0).contains(&self.malformation_prob),
            "malformation_prob",
            "in [0, 1)",
            self.malformation_prob,
        )?;
        check(
            self.learning_rate > 0.0,
            "learning_rate",
            "> 0",
            self.learning_rate,
        )?;
        check(
            self.init_learning_rate > 0.0,
            "init_learning_rate",
            "> 0",
            self.init_learning_rate,
        )?;
        check(self.rounds >= 1, "rounds", ">= 1", self.rounds)?;
        check(self.batch_size >= 1, "batch_size", ">= 1", self.batch_size)?;
        check(self.match_samples >= 1, "match_samples", ">= 1", self.match_samples)?;
        check(!self.seeds.is_empty(), "seeds", "non-empty", self.seeds.len())?;
        check(self.embed_dim >= 1, "embed_dim", ">= 1", self.embed_dim)?;
        check(self.sharpness >= 0.0, "sharpness", ">= 0", self.sharpness)?;
        check(
            (0.0..=1.0).contains(&self.shared_taste),
            "shared_taste",
            "in [0, 1]",
            self.shared_taste,
        )?;
        // cross-module feasibility: every candidate builder must find
        // M - 1 distractors outside a sequence of T + N distinct items
        let needed = self.candidate_size - 1;
        let pool = self
            .catalog_size
            .saturating_sub(self.prefix_len + self.horizon);
        check(
            needed <= pool,
            "candidate_size",
            "M - 1 <= catalog_size - (prefix_len + horizon)",
            self.candidate_size,
        )?;
        Ok(())
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            group_size: self.group_size,
            clip: self.clip,
            snips_delta: self.snips_delta,
            std_floor: self.std_floor,
            learning_rate: self.learning_rate,
            mode: match self.mode {
                Mode::VanillaGrpo => UpdateMode::VanillaGrpo,
                _ => UpdateMode::Abpo,
            },
            batch_size: self.batch_size,
            stratified: self.stratified,
            reward: RewardConfig {
                lambda_sc: self.lambda_sc,
                malformation_prob: self.malformation_prob,
                format_reward_on: self.format_reward_on,
            },
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            catalog_size: self.catalog_size,
            num_users: self.num_users,
            prefix_len: self.prefix_len,
            horizon: self.horizon,
            embed_dim: self.embed_dim,
            sharpness: self.sharpness,
            shared_taste: self.shared_taste,
        }
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("invalid value '{value}' for key '{key}'"))
            })
        }
        match key {
            "catalog_size" => self.catalog_size = parse(key, value)?,
            "num_users" => self.num_users = parse(key, value)?,
            "prefix_len" => self.prefix_len = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "candidate_size" => self.candidate_size = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "group_size" => self.group_size = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "snips_delta" => self.snips_delta = parse(key, value)?,
            "std_floor" => self.std_floor = parse(key, value)?,
            "lambda_sc" => self.lambda_sc = parse(key, value)?,
            "malformation_prob" => self.malformation_prob = parse(key, value)?,
            "format_reward_on" => self.format_reward_on = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "init_learning_rate" => self.init_learning_rate = parse(key, value)?,
            "init_epochs" => self.init_epochs = parse(key, value)?,
            "epochs_per_round" => self.epochs_per_round = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "stratified" => self.stratified = parse(key, value)?,
            "relog_each_round" => self.relog_each_round = parse(key, value)?,
            "match_samples" => self.match_samples = parse(key, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|tok| parse::<u64>(key, tok.trim()))
                    .collect::<Result<_>>()?;
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "sharpness" => self.sharpness = parse(key, value)?,
            "shared_taste" => self.shared_taste = parse(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Full resolved configuration as sorted `key=value` lines, suitable for
    /// echoing into the output directory and re-parsing.
    pub fn echo(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("catalog_size", self.catalog_size.to_string());
        map.insert("num_users", self.num_users.to_string());
        map.insert("prefix_len", self.prefix_len.to_string());
        map.insert("horizon", self.horizon.to_string());
        map.insert("candidate_size", self.candidate_size.to_string());
        map.insert("feature_dim", self.feature_dim().to_string());
        map.insert("temperature", self.temperature.to_string());
        map.insert("group_size", self.group_size.to_string());
        map.insert("clip", self.clip.to_string());
        map.insert("snips_delta", self.snips_delta.to_string());
        map.insert("std_floor", self.std_floor.to_string());
        map.insert("lambda_sc", self.lambda_sc.to_string());
        map.insert("malformation_prob", self.malformation_prob.to_string());
        map.insert("format_reward_on", self.format_reward_on.to_string());
        map.insert("learning_rate", self.learning_rate.to_string());
        map.insert("init_learning_rate", self.init_learning_rate.to_string());
        map.insert("init_epochs", self.init_epochs.to_string());
        map.insert("epochs_per_round", self.epochs_per_round.to_string());
        map.insert("rounds", self.rounds.to_string());
        map.insert("mode", self.mode.to_string());
        map.insert("batch_size", self.batch_size.to_string());
        map.insert("stratified", self.stratified.to_string());
        map.insert("relog_each_round", self.relog_each_round.to_string());
        map.insert("match_samples", self.match_samples.to_string());
        map.insert(
            "seeds",
            self.seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        map.insert("out_dir", self.out_dir.display().to_string());
        map.insert("embed_dim", self.embed_dim.to_string());
        map.insert("sharpness", self.sharpness.to_string());
        map.insert("shared_taste", self.shared_taste.to_string());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

/// Resolve a configuration: defaults, then file assignments, then overrides.
/// A missing file is tolerated with a notice. Returns the validated config
/// plus any notices for the caller to surface.
pub fn resolve(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<(ExperimentConfig, Vec<String>)> {
    let mut cfg = ExperimentConfig::default();
    let mut notices = Vec::new();
    if let Some(path) = path {
        if path.exists() {
            for (key, value) in parse_config_file(path)? {
                cfg.set(&key, &value)?;
            }
        } else {
            notices.push(format!(
                "config file {} not found; using defaults",
                path.display()
            ));
        }
    }
    for (key, value) in overrides {
        cfg.set(key, value)?;
    }
    cfg.validate()?;
    Ok((cfg, notices))
}

/// Parse a flat `key=value` file; `#` starts a comment, blank lines skipped.
pub fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(Error::Parse {
            line: idx + 1,
            msg: format!("expected key=value, got '{line}'"),
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn out_of_bound_clip_names_field_and_bound() {
        let mut cfg = ExperimentConfig::default();
        cfg.clip = 1.5;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("clip"), "{err}");
        assert!(err.contains("(0, 1)"), "{err}");
        assert!(err.contains("1.5"), "{err}");
    }

    #[test]
    fn missing_file_gives_defaults_with_notice() {
        let (cfg, notices) = resolve(Some(Path::new("/nonexistent/abpo.cfg")), &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(notices.len(), 1);
        assert!(notices[0].contains("not found"));
    }

    #[test]
    fn flag_overrides_file_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(&path, "rounds=7\ngroup_size=4 # comment\n\n# full line\n").unwrap();
        let overrides = vec![("rounds".to_string(), "2".to_string())];
        let (cfg, notices) = resolve(Some(&path), &overrides).unwrap();
        assert!(notices.is_empty());
        assert_eq!(cfg.rounds, 2);
        assert_eq!(cfg.group_size, 4);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(cfg.set("not_a_key", "1"), Err(Error::Config(_))));
    }

    #[test]
    fn echo_reparses_to_the_same_config() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("mode", "vanilla_grpo").unwrap();
        cfg.set("seeds", "9,10").unwrap();
        cfg.set("learning_rate", "0.125").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.cfg");
        std::fs::write(&path, cfg.echo()).unwrap();
        let mut back = ExperimentConfig::default();
        for (k, v) in parse_config_file(&path).unwrap() {
            if k == "feature_dim" {
                assert_eq!(v, cfg.feature_dim().to_string());
                continue;
            }
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }
}
