use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Activation;
use crate::envs::{Dfa, DfaDocument, Env, EnvKind, GridSpec, SeqSpec};
use crate::error::{Error, Result};
use crate::replay::Prioritization;

/// Which balance objective the trainer optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Trajectory balance on the grid, relative balance on sequences.
    #[default]
    Auto,
    /// Trajectory balance with the fixed backward policy.
    Tb,
    /// Relative balance against the prior.
    Rtb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqConfig {
    pub vocab: Vec<char>,
    pub max_len: usize,
    pub motif: String,
    /// Nesting bound of the built-in balanced-parentheses oracle.
    pub max_depth: usize,
    /// Replaces the built-in oracle when set.
    pub oracle: Option<DfaDocument>,
}

impl Default for SeqConfig {
    fn default() -> Self {
        SeqConfig {
            vocab: vec!['a', 'b', '(', ')'],
            max_len: 24,
            motif: "aba".into(),
            max_depth: 4,
            oracle: None,
        }
    }
}

/// Corpus generation and maximum-likelihood fitting of the sequence prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub corpus_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_len: usize,
    /// Longest generated string; defaults to the task's `max_len` when 0.
    pub max_len: usize,
    /// Chance of emitting the motif as one unit at a free position.
    pub motif_rate: f64,
    /// Chance of opening a parenthesis when nesting is allowed.
    pub open_rate: f64,
    /// Chance of closing a parenthesis when one is open.
    pub close_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            corpus_size: 2000,
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            min_len: 4,
            max_len: 0,
            motif_rate: 0.1,
            open_rate: 0.15,
            close_rate: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub grid: GridSpec,
    pub seq: SeqConfig,
    pub objective: Objective,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub capacity_pos: usize,
    pub capacity_neg: usize,
    pub lr: f64,
    pub lr_log_z: f64,
    pub mutation_negatives: bool,
    /// Probability mass mixed uniformly over valid actions when sampling
    /// on-policy batches.
    pub epsilon: f64,
    pub rs_baseline: bool,
    pub reward_floor: f64,
    pub prioritization: Prioritization,
    /// Replay updates per on-policy update.
    pub replay_ratio: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub window: usize,
    pub eval_every: u64,
    pub eval_samples: usize,
    pub seed: u64,
    pub pretrain: PretrainConfig,
}

impl TrainConfig {
    pub fn defaults(env: EnvKind) -> TrainConfig {
        let (alpha, beta, hidden) = match env {
            EnvKind::Grid => (0.01, 1.0, vec![64, 64]),
            EnvKind::Seq => (1e-3, 25.0, vec![128, 128]),
        };
        TrainConfig {
            env,
            grid: GridSpec::default(),
            seq: SeqConfig::default(),
            objective: Objective::Auto,
            alpha,
            beta,
            batch_size: 64,
            steps: 2000,
            capacity_pos: 6400,
            capacity_neg: 6400,
            lr: 1e-3,
            lr_log_z: 0.1,
            mutation_negatives: false,
            epsilon: 0.0,
            rs_baseline: false,
            reward_floor: 1e-8,
            prioritization: Prioritization::Rank,
            replay_ratio: 1,
            hidden,
            activation: Activation::Tanh,
            window: 8,
            eval_every: 100,
            eval_samples: 1000,
            seed: 0,
            pretrain: PretrainConfig::default(),
        }
    }

    /// Parses a JSON document. `env` is required; absent keys take the
    /// defaults for that environment and unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let doc: Value = serde_json::from_str(text)?;
        let Value::Object(map) = &doc else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let env = map.get("env").ok_or_else(|| Error::Config("missing required key \"env\"".into()))?;
        let env: EnvKind = serde_json::from_value(env.clone()).map_err(|e| Error::Config(format!("env: {e}")))?;
        let mut merged = serde_json::to_value(TrainConfig::defaults(env))?;
        merge(&mut merged, doc);
        let cfg: TrainConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.capacity_pos == 0 || self.capacity_neg == 0 {
            return bad("buffer capacities must be >= 1".into());
        }
        for (name, v) in [("lr", self.lr), ("lr_log_z", self.lr_log_z), ("pretrain.lr", self.pretrain.lr)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.reward_floor > 0.0) {
            return bad(format!("reward_floor must be > 0, got {}", self.reward_floor));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must be in [0, 1], got {}", self.epsilon));
        }
        if self.replay_ratio > 16 {
            return bad("replay_ratio must be at most 16".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be non-empty and positive".into());
        }
        if self.window == 0 {
            return bad("window must be >= 1".into());
        }
        if self.eval_every == 0 || self.eval_samples == 0 {
            return bad("eval_every and eval_samples must be >= 1".into());
        }
        if self.mutation_negatives && self.env != EnvKind::Seq {
            return bad("mutation_negatives needs the seq environment".into());
        }
        let p = &self.pretrain;
        if p.corpus_size == 0 || p.batch_size == 0 {
            return bad("pretrain corpus_size and batch_size must be >= 1".into());
        }
        for (name, v) in [
            ("motif_rate", p.motif_rate),
            ("open_rate", p.open_rate),
            ("close_rate", p.close_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("pretrain.{name} must be in [0, 1], got {v}"));
            }
        }
        self.build_env()?;
        Ok(())
    }

    /// The environment this config describes.
    pub fn build_env(&self) -> Result<Env> {
        let env = match self.env {
            EnvKind::Grid => Env::Grid(self.grid.clone()),
            EnvKind::Seq => {
                let s = &self.seq;
                let letters: Vec<char> = s.vocab.iter().copied().filter(|c| !"()".contains(*c)).collect();
                let oracle = match &s.oracle {
                    Some(doc) => Dfa::from_document(doc)?,
                    None => Dfa::balanced_parens(s.max_depth, &letters, 1, Some(s.max_len)),
                };
                Env::Seq(SeqSpec {
                    vocab: s.vocab.clone(),
                    max_len: s.max_len,
                    motif: s.motif.clone(),
                    oracle,
                })
            }
        };
        env.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(env)
    }

    /// The objective after resolving [`Objective::Auto`].
    pub fn resolved_objective(&self) -> Objective {
        match (self.objective, self.env) {
            (Objective::Auto, EnvKind::Grid) => Objective::Tb,
            (Objective::Auto, EnvKind::Seq) => Objective::Rtb,
            (o, _) => o,
        }
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// everything else is replaced.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_configs_take_env_defaults() {
        let g = TrainConfig::from_json(r#"{"env": "grid"}"#).unwrap();
        assert_eq!(g, TrainConfig::defaults(EnvKind::Grid));
        assert_eq!(g.alpha, 0.01);
        assert_eq!(g.resolved_objective(), Objective::Tb);
        let s = TrainConfig::from_json(r#"{"env": "seq", "seq": {"max_depth": 2}}"#).unwrap();
        assert_eq!(s.beta, 25.0);
        assert_eq!(s.seq.max_depth, 2);
        assert_eq!(s.seq.max_len, 24);
        assert_eq!(s.resolved_objective(), Objective::Rtb);
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(TrainConfig::from_json(r#"{"env": "grid", "alpha": -1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"env": "grid", "alhpa": 0.1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"env": "grid", "grid": {"sidee": 3}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"alpha": 0.1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"env": "cube"}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"env": "grid", "mutation_negatives": true}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"env": "grid", "grid": {"side": 2}}"#).is_err());
        assert!(TrainConfig::from_json("[1]").is_err());
    }

    #[test]
    fn round_trip() {
        let mut c = TrainConfig::defaults(EnvKind::Seq);
        c.seq.oracle = Some(Dfa::balanced_parens(2, &['a', 'b'], 1, Some(24)).to_document());
        c.alpha = 0.125;
        let back = TrainConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
