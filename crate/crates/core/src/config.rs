//! Training configuration and its flat `key = value` text form.
//!
//! The canonical text lists every key once, in a fixed order, with floats
//! written in Rust's shortest round-trip form, so `parse(to_text(c)) == c`
//! and `to_text(parse(t))` is stable. `#` starts a comment line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autograd::{AdamConfig, AdamState, Optimizer};
use crate::encoder::EncoderConfig;
use crate::error::{DpmnError, Result};
use crate::heads::{HeadConfig, HeadKind};
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::prompt::{default_token_ids, PromptConfig, PromptInit};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = DpmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(DpmnError::config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub optimizer: OptimizerKind,
    pub loss_weights: LossWeights,
    /// Minimum corpus frequency for a token to enter the vocabulary.
    pub min_freq: usize,
    /// `encoder.vocab_size = 0` means "size of the training vocabulary".
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            learning_rate: 3e-6,
            batch_size: 32,
            max_epochs: 30,
            early_stop_patience: 4,
            optimizer: OptimizerKind::Adam,
            loss_weights: LossWeights::default(),
            min_freq: 1,
            model: ModelConfig::with_vocab(0),
        }
    }
}

const KEYS: [&str; 24] = [
    "seed",
    "learning_rate",
    "batch_size",
    "max_epochs",
    "early_stop_patience",
    "optimizer",
    "loss.main",
    "loss.auxi1",
    "loss.auxi2",
    "data.min_freq",
    "encoder.layers",
    "encoder.hidden",
    "encoder.heads",
    "encoder.ff",
    "encoder.vocab_size",
    "encoder.max_seq_len",
    "encoder.dropout",
    "prompt.length",
    "prompt.form",
    "prompt.init",
    "prompt.tuning",
    "head.kind",
    "head.lstm_hidden",
    "head.ffn_hidden",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DpmnError::config("learning_rate must be positive"));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
            ("data.min_freq", self.min_freq),
        ] {
            if v == 0 {
                return Err(DpmnError::config(format!("{name} must be positive")));
            }
        }
        let w = self.loss_weights.as_array();
        LossWeights::new(w[0], w[1], w[2])?;
        let m = &self.model;
        // The vocabulary size may still be open; check the rest.
        let mut encoder = m.encoder.clone();
        encoder.vocab_size = encoder.vocab_size.max(1);
        encoder.validate()?;
        m.prompt.check()?;
        if m.prompt.length + 1 > encoder.max_seq_len {
            return Err(DpmnError::config("prompt.length leaves no room for text"));
        }
        m.head.validate()
    }

    /// The model config with the vocabulary size filled in.
    pub fn model_for_vocab(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut model = self.model.clone();
        match model.encoder.vocab_size {
            0 => model.encoder.vocab_size = vocab_size,
            n if n == vocab_size => {}
            n => {
                return Err(DpmnError::config(format!(
                    "encoder.vocab_size is {n} but the training vocabulary has {vocab_size} entries"
                )))
            }
        }
        model.validate()?;
        Ok(model)
    }

    pub fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Adam => Optimizer::Adam {
                config: AdamConfig::with_lr(self.learning_rate),
                state: AdamState::new(),
            },
            OptimizerKind::Sgd => Optimizer::Sgd { lr: self.learning_rate },
        }
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let w = self.loss_weights.as_array();
        let values: [String; 24] = [
            self.seed.to_string(),
            self.learning_rate.to_string(),
            self.batch_size.to_string(),
            self.max_epochs.to_string(),
            self.early_stop_patience.to_string(),
            self.optimizer.to_string(),
            w[0].to_string(),
            w[1].to_string(),
            w[2].to_string(),
            self.min_freq.to_string(),
            m.encoder.layers.to_string(),
            m.encoder.hidden.to_string(),
            m.encoder.heads.to_string(),
            m.encoder.ff.to_string(),
            m.encoder.vocab_size.to_string(),
            m.encoder.max_seq_len.to_string(),
            m.encoder.dropout.to_string(),
            m.prompt.length.to_string(),
            m.prompt.form.to_string(),
            m.prompt.init.to_string(),
            m.prompt.tuning.to_string(),
            m.head.kind.to_string(),
            m.head.lstm_hidden.to_string(),
            m.head.ffn_hidden.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses config text. Missing keys keep their defaults; unknown or
    /// repeated keys and invalid values are configuration errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut seen: Vec<String> = Vec::new();
        let mut init_text: Option<String> = None;
        let mut lstm_given = false;
        let mut ffn_given = false;
        let mut w = c.loss_weights.as_array();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| DpmnError::config(format!("line {}: expected `key = value`", n + 1)))?;
            if seen.iter().any(|s| s == key) {
                return Err(DpmnError::config(format!("line {}: `{key}` given twice", n + 1)));
            }
            seen.push(key.to_string());
            let bad = |e: String| DpmnError::config(format!("line {}: `{key}`: {e}", n + 1));
            let m = &mut c.model;
            match key {
                "seed" => c.seed = num(value).map_err(bad)?,
                "learning_rate" => c.learning_rate = num(value).map_err(bad)?,
                "batch_size" => c.batch_size = num(value).map_err(bad)?,
                "max_epochs" => c.max_epochs = num(value).map_err(bad)?,
                "early_stop_patience" => c.early_stop_patience = num(value).map_err(bad)?,
                "optimizer" => c.optimizer = value.parse()?,
                "loss.main" => w[0] = num(value).map_err(bad)?,
                "loss.auxi1" => w[1] = num(value).map_err(bad)?,
                "loss.auxi2" => w[2] = num(value).map_err(bad)?,
                "data.min_freq" => c.min_freq = num(value).map_err(bad)?,
                "encoder.layers" => m.encoder.layers = num(value).map_err(bad)?,
                "encoder.hidden" => m.encoder.hidden = num(value).map_err(bad)?,
                "encoder.heads" => m.encoder.heads = num(value).map_err(bad)?,
                "encoder.ff" => m.encoder.ff = num(value).map_err(bad)?,
                "encoder.vocab_size" => m.encoder.vocab_size = num(value).map_err(bad)?,
                "encoder.max_seq_len" => m.encoder.max_seq_len = num(value).map_err(bad)?,
                "encoder.dropout" => m.encoder.dropout = num(value).map_err(bad)?,
                "prompt.length" => m.prompt.length = num(value).map_err(bad)?,
                "prompt.form" => m.prompt.form = value.parse()?,
                "prompt.init" => init_text = Some(value.to_string()),
                "prompt.tuning" => m.prompt.tuning = value.parse()?,
                "head.kind" => m.head.kind = value.parse()?,
                "head.lstm_hidden" => {
                    m.head.lstm_hidden = num(value).map_err(bad)?;
                    lstm_given = true;
                }
                "head.ffn_hidden" => {
                    m.head.ffn_hidden = num(value).map_err(bad)?;
                    ffn_given = true;
                }
                other => return Err(DpmnError::config(format!("line {}: unknown key `{other}`", n + 1))),
            }
        }
        c.loss_weights = LossWeights::new(w[0], w[1], w[2])?;

        // `token` without ids means the default ids for the prompt length.
        c.model.prompt.init = match init_text.as_deref() {
            None | Some("token") => PromptInit::Token(default_token_ids(c.model.prompt.length)),
            Some(s) => s.parse()?,
        };
        // Head sizes follow the hidden size unless set explicitly.
        let derived = HeadConfig::for_hidden(c.model.head.kind, c.model.encoder.hidden);
        if !lstm_given {
            c.model.head.lstm_hidden = derived.lstm_hidden;
        }
        if !ffn_given {
            c.model.head.ffn_hidden = derived.ffn_hidden;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DpmnError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| DpmnError::io(path, e))
    }

    /// Replaces the model's prompt, keeping everything else.
    pub fn with_prompt(mut self, prompt: PromptConfig) -> Self {
        self.model.prompt = prompt;
        self
    }

    pub fn with_head(mut self, kind: HeadKind) -> Self {
        self.model.head.kind = kind;
        self
    }

    pub fn with_encoder(mut self, encoder: EncoderConfig) -> Self {
        self.model.encoder = encoder;
        self
    }
}

fn num<T: FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    s.parse().map_err(|e: T::Err| format!("`{s}`: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{PromptForm, TuningStrategy};

    #[test]
    fn defaults_follow_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate, 3e-6);
        assert_eq!((c.batch_size, c.max_epochs, c.early_stop_patience), (32, 30, 4));
        assert_eq!(c.loss_weights.as_array(), [0.4, 0.3, 0.3]);
        assert_eq!(c.model.prompt.form, PromptForm::Deep);
        c.validate().unwrap();
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = TrainConfig::default();
        c.seed = 17;
        c.learning_rate = 1e-3;
        c.model.prompt.length = 2;
        c.model.prompt.init = PromptInit::Token(vec![2, 9]);
        c.model.prompt.tuning = TuningStrategy::FixedLm;
        c.model.head.kind = HeadKind::Linear;
        let text = c.to_text();
        let back = TrainConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
        assert_eq!(text.lines().count(), 24);
        assert!(text.starts_with("seed = 17\nlearning_rate = 0.001\n"));
    }

    #[test]
    fn partial_files_take_defaults() {
        let c = TrainConfig::parse("# tiny run\nencoder.hidden = 16\nprompt.length = 2\n").unwrap();
        assert_eq!(c.model.head.lstm_hidden, 8);
        assert_eq!(c.model.head.ffn_hidden, 16);
        assert_eq!(c.model.prompt.init, PromptInit::Token(vec![2, 3]));
        assert_eq!(c.max_epochs, 30);
    }

    #[test]
    fn coefficient_sum_is_enforced_at_load() {
        let err = TrainConfig::parse("loss.main = 0.5\nloss.auxi1 = 0.3\nloss.auxi2 = 0.3\n").unwrap_err();
        assert!(matches!(err, DpmnError::Config(_)));
        assert!(TrainConfig::parse("loss.main = 1\nloss.auxi1 = 0\nloss.auxi2 = 0\n").is_ok());
    }

    #[test]
    fn rejects_bad_lines() {
        for text in [
            "colour = blue\n",
            "seed = 1\nseed = 2\n",
            "batch_size = many\n",
            "batch_size = 0\n",
            "no equals sign\n",
            "prompt.form = sideways\n",
            "encoder.hidden = 10\nencoder.heads = 4\n",
        ] {
            assert!(matches!(TrainConfig::parse(text), Err(DpmnError::Config(_))), "{text}");
        }
    }

    #[test]
    fn vocab_size_is_filled_or_checked() {
        let c = TrainConfig::default();
        assert_eq!(c.model_for_vocab(40).unwrap().encoder.vocab_size, 40);
        let mut fixed = c.clone();
        fixed.model.encoder.vocab_size = 30;
        assert!(fixed.model_for_vocab(40).is_err());
        assert!(fixed.model_for_vocab(30).is_ok());
    }
}
