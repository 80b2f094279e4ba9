//! Flat `key = value` run configuration. Unknown keys are errors.

use std::path::Path;

use crate::dualpath::DpdConfig;
use crate::error::{DpdError, Result};
use crate::training::{SynthDatasetSpec, TrainConfig};

/// Parsed but uninterpreted `key = value` pairs, with their line numbers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    entries: Vec<(String, String, usize)>,
}

impl RunConfig {
    /// One pair per line; `#` starts a comment; duplicate keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DpdError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(DpdError::Config(format!("line {}: empty key or value", i + 1)));
            }
            if let Some((_, _, first)) = entries.iter().find(|(key, _, _)| key == k) {
                return Err(DpdError::Config(format!("line {}: `{k}` already set on line {first}", i + 1)));
            }
            entries.push((k.to_string(), v.to_string(), i + 1));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DpdError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _, _)| k == key).map(|(_, v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| DpdError::Config(format!("invalid value {v:?} for {key}")))
}

/// Everything a training run needs, validated and frozen before compute.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub model: DpdConfig,
    pub data: SynthDatasetSpec,
    pub train: TrainConfig,
    /// Held-out examples for the periodic and final metrics.
    pub eval_examples: usize,
}

impl Default for TrainRun {
    /// The reference toy configuration.
    fn default() -> Self {
        let model = DpdConfig::default();
        Self {
            data: SynthDatasetSpec {
                channels: model.latent_dim,
                vocab: model.vocab,
                ..SynthDatasetSpec::default()
            },
            model,
            train: TrainConfig::default(),
            eval_examples: 8,
        }
    }
}

/// Keys accepted by [`TrainRun::from_config`], beyond `model.*` fields.
pub const DATA_KEYS: [&str; 5] = ["num_examples", "frames", "tokens_per_example", "frames_per_token", "seed"];
pub const TRAIN_KEYS: [&str; 9] = [
    "steps",
    "batch_size",
    "learning_rate",
    "chunk_count",
    "cfg_dropout_prob",
    "seed",
    "eval_every",
    "early_stop_ratio",
    "eval_examples",
];

impl TrainRun {
    /// Applies `model.*`, `data.*` and `train.*` keys over the defaults.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let mut run = Self::default();
        for (key, value, line) in &cfg.entries {
            let known = match key.split_once('.') {
                Some(("model", field)) => run.model.set(field, value)?,
                Some(("data", field)) => run.set_data(field, value)?,
                Some(("train", field)) => run.set_train(field, value)?,
                _ => false,
            };
            if !known {
                return Err(DpdError::Config(format!("line {line}: unknown key `{key}`")));
            }
        }
        run.data.channels = run.model.latent_dim;
        run.data.vocab = run.model.vocab;
        run.validate()?;
        Ok(run)
    }

    fn set_data(&mut self, field: &str, v: &str) -> Result<bool> {
        let d = &mut self.data;
        match field {
            "num_examples" => d.num_examples = num(field, v)?,
            "frames" => d.frames = num(field, v)?,
            "tokens_per_example" => d.tokens_per_example = num(field, v)?,
            "frames_per_token" => d.frames_per_token = num(field, v)?,
            "seed" => d.seed = num(field, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn set_train(&mut self, field: &str, v: &str) -> Result<bool> {
        let t = &mut self.train;
        match field {
            "steps" => t.steps = num(field, v)?,
            "batch_size" => t.batch_size = num(field, v)?,
            "learning_rate" => t.learning_rate = num(field, v)?,
            "chunk_count" => t.chunk_count = num(field, v)?,
            "cfg_dropout_prob" => t.cfg_dropout_prob = num(field, v)?,
            "seed" => t.seed = num(field, v)?,
            "eval_every" => t.eval_every = num(field, v)?,
            "early_stop_ratio" => t.early_stop_ratio = if v == "none" { None } else { Some(num(field, v)?) },
            "eval_examples" => self.eval_examples = num(field, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.data.num_examples == 0 || self.eval_examples == 0 {
            return Err(DpdError::Config("num_examples and eval_examples must be positive".into()));
        }
        if self.data.frames < self.train.chunk_count {
            return Err(DpdError::Config(format!(
                "{} frames cannot hold {} chunks",
                self.data.frames, self.train.chunk_count
            )));
        }
        Ok(())
    }

    /// The effective configuration, re-parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.model.to_pairs() {
            out.push_str(&format!("model.{k} = {v}\n"));
        }
        let d = &self.data;
        for (k, v) in DATA_KEYS.iter().zip([d.num_examples, d.frames, d.tokens_per_example, d.frames_per_token]) {
            out.push_str(&format!("data.{k} = {v}\n"));
        }
        out.push_str(&format!("data.seed = {}\n", d.seed));
        let t = &self.train;
        out.push_str(&format!("train.steps = {}\n", t.steps));
        out.push_str(&format!("train.batch_size = {}\n", t.batch_size));
        out.push_str(&format!("train.learning_rate = {:?}\n", t.learning_rate));
        out.push_str(&format!("train.chunk_count = {}\n", t.chunk_count));
        out.push_str(&format!("train.cfg_dropout_prob = {:?}\n", t.cfg_dropout_prob));
        out.push_str(&format!("train.seed = {}\n", t.seed));
        out.push_str(&format!("train.eval_every = {}\n", t.eval_every));
        match t.early_stop_ratio {
            Some(r) => out.push_str(&format!("train.early_stop_ratio = {r:?}\n")),
            None => out.push_str("train.early_stop_ratio = none\n"),
        }
        out.push_str(&format!("train.eval_examples = {}\n", self.eval_examples));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let c = RunConfig::parse("# header\n\n model.hidden_dim = 16  # inline\ntrain.steps=5\n").unwrap();
        assert_eq!(c.get("model.hidden_dim"), Some("16"));
        assert_eq!(c.get("train.steps"), Some("5"));
        let run = TrainRun::from_config(&c).unwrap();
        assert_eq!(run.model.hidden_dim, 16);
        assert_eq!(run.train.steps, 5);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        for text in ["train.stepz = 3", "steps = 3", "train.steps = 3\ntrain.steps = 4", "train.steps", "train.steps = x", "model.hidden_dim = 7"] {
            let parsed = RunConfig::parse(text);
            let res = parsed.and_then(|c| TrainRun::from_config(&c));
            assert!(res.is_err(), "{text:?} accepted");
        }
    }

    #[test]
    fn effective_config_round_trips() {
        let mut run = TrainRun::default();
        run.train.early_stop_ratio = Some(0.5);
        run.data.seed = 9;
        let back = TrainRun::from_config(&RunConfig::parse(&run.to_text()).unwrap()).unwrap();
        assert_eq!(back, run);
        let none = TrainRun::default();
        assert_eq!(TrainRun::from_config(&RunConfig::parse(&none.to_text()).unwrap()).unwrap(), none);
    }
}
