//! Continuous prompt construction: length, form, initialisation and tuning
//! strategy.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Tensor, Var};
use crate::data::CLS_ID;
use crate::encoder::EncoderConfig;
use crate::error::{DpmnError, Result};
use crate::nn;

pub const RANDOM_INIT_STD: f64 = 0.02;

/// Where prompt vectors enter the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptForm {
    /// A separate prefix matrix written before every layer.
    Deep,
    /// One prefix matrix written before the first layer only.
    Light,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum PromptInit {
    /// i.i.d. N(0, 0.02²).
    Random,
    /// Copies of the token-embedding rows for these ids, one per slot.
    Token(Vec<usize>),
}

/// Initialisation method without its token ids, for sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InitKind {
    Random,
    Token,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TuningStrategy {
    /// Only the prompt (and task heads) are trained.
    FixedLm,
    /// The encoder is trained together with the prompt.
    LmPlusPrompt,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PromptConfig {
    pub length: usize,
    pub form: PromptForm,
    pub init: PromptInit,
    pub tuning: TuningStrategy,
}

impl Default for PromptConfig {
    /// Deep, one slot, token-initialised from `[CLS]`, encoder trained too.
    fn default() -> Self {
        PromptConfig {
            length: 1,
            form: PromptForm::Deep,
            init: PromptInit::Token(vec![CLS_ID]),
            tuning: TuningStrategy::LmPlusPrompt,
        }
    }
}

impl PromptConfig {
    /// No prompt at all: zero-length light form.
    pub fn disabled(tuning: TuningStrategy) -> Self {
        PromptConfig {
            length: 0,
            form: PromptForm::Light,
            init: PromptInit::Random,
            tuning,
        }
    }

    /// Checks the invariants that do not depend on a vocabulary.
    pub fn check(&self) -> Result<()> {
        if self.length == 0 && self.form == PromptForm::Deep {
            return Err(DpmnError::config("a zero-length prompt must use the light form"));
        }
        if let PromptInit::Token(ids) = &self.init {
            if ids.len() != self.length {
                return Err(DpmnError::config(format!(
                    "token initialisation lists {} ids for a prompt of length {}",
                    ids.len(),
                    self.length
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        self.check()?;
        if self.length + 1 > encoder.max_seq_len {
            return Err(DpmnError::config(format!(
                "prompt length {} leaves no room in max_seq_len {}",
                self.length, encoder.max_seq_len
            )));
        }
        if let PromptInit::Token(ids) = &self.init {
            if let Some(&bad) = ids.iter().find(|&&id| id >= encoder.vocab_size) {
                return Err(DpmnError::Index {
                    what: "prompt token initialisation",
                    id: bad,
                    size: encoder.vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// The trainable prompt matrices, each `[p_n × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixBank {
    form: PromptForm,
    prompt_len: usize,
    matrices: Vec<Tensor>,
}

impl PrefixBank {
    pub fn param_name(index: usize) -> String {
        format!("prompt.prefix{index:02}")
    }

    /// Shape-only bank description for a config, as stored in a model.
    pub fn entries_for(form: PromptForm, prompt_len: usize, layers: usize) -> usize {
        match form {
            _ if prompt_len == 0 => 0,
            PromptForm::Deep => layers,
            PromptForm::Light => 1,
        }
    }

    /// Reads the current prompt matrices back out of a parameter store.
    pub fn from_store(store: &ParamStore, form: PromptForm, prompt_len: usize, layers: usize) -> Result<Self> {
        let matrices = (0..Self::entries_for(form, prompt_len, layers))
            .map(|i| store.require(&Self::param_name(i)).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(PrefixBank {
            form,
            prompt_len,
            matrices,
        })
    }

    pub fn form(&self) -> PromptForm {
        self.form
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.matrices
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.matrices.len()).map(Self::param_name).collect()
    }

    pub fn num_values(&self) -> usize {
        self.matrices.iter().map(Tensor::numel).sum()
    }

    pub fn insert_into(&self, store: &mut ParamStore) -> Result<()> {
        for (i, m) in self.matrices.iter().enumerate() {
            store.insert(Self::param_name(i), m.clone())?;
        }
        Ok(())
    }

    /// Puts the stored prompt matrices on the tape, in layer order.
    pub fn load(tape: &mut Tape, store: &ParamStore, entries: usize) -> Result<Vec<Var>> {
        (0..entries)
            .map(|i| tape.param(store, &Self::param_name(i)))
            .collect()
    }
}

/// Builds the prompt bank. Random initialisation draws from a generator
/// seeded with `seed`; token initialisation copies rows of
/// `embedding_table`, and the deep form repeats them in every layer.
pub fn init_prompt(
    config: &PromptConfig,
    encoder: &EncoderConfig,
    embedding_table: &Tensor,
    seed: u64,
) -> Result<PrefixBank> {
    config.validate(encoder)?;
    let d = encoder.hidden;
    if embedding_table.shape() != [encoder.vocab_size, d] {
        return Err(DpmnError::Shape {
            op: "init_prompt",
            lhs: embedding_table.shape().to_vec(),
            rhs: vec![encoder.vocab_size, d],
        });
    }
    let entries = PrefixBank::entries_for(config.form, config.length, encoder.layers);
    let shape = [config.length, d];
    let matrices = match &config.init {
        PromptInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..entries)
                .map(|_| nn::normal(&shape, RANDOM_INIT_STD, &mut rng))
                .collect()
        }
        PromptInit::Token(ids) => {
            let table = embedding_table.data();
            let rows: Vec<f64> = ids
                .iter()
                .flat_map(|&id| table[id * d..(id + 1) * d].iter().copied())
                .collect();
            let m = Tensor::new(shape.to_vec(), rows)?;
            vec![m; entries]
        }
    };
    Ok(PrefixBank {
        form: config.form,
        prompt_len: config.length,
        matrices,
    })
}

/// Token ids used for token initialisation in sweeps: `[CLS]` followed by
/// the most frequent corpus tokens.
pub fn default_token_ids(length: usize) -> Vec<usize> {
    (0..length).map(|k| CLS_ID + k).collect()
}

/// Cartesian product of lengths × forms × inits in that nesting order,
/// keeping only valid combinations.
pub fn sweep_configs(
    lengths: &[usize],
    forms: &[PromptForm],
    inits: &[InitKind],
    tuning: TuningStrategy,
) -> Vec<PromptConfig> {
    let mut out = Vec::new();
    for &length in lengths {
        for &form in forms {
            for &kind in inits {
                let init = match kind {
                    InitKind::Random => PromptInit::Random,
                    InitKind::Token => PromptInit::Token(default_token_ids(length)),
                };
                let config = PromptConfig {
                    length,
                    form,
                    init,
                    tuning,
                };
                if config.check().is_ok() {
                    out.push(config);
                }
            }
        }
    }
    out
}

impl fmt::Display for PromptForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptForm::Deep => "deep",
            PromptForm::Light => "light",
        })
    }
}

impl FromStr for PromptForm {
    type Err = DpmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(PromptForm::Deep),
            "light" => Ok(PromptForm::Light),
            other => Err(DpmnError::config(format!("unknown prompt form `{other}`"))),
        }
    }
}

impl fmt::Display for PromptInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptInit::Random => f.write_str("random"),
            PromptInit::Token(ids) => {
                let ids: Vec<String> = ids.iter().map(usize::to_string).collect();
                write!(f, "token:{}", ids.join(","))
            }
        }
    }
}

impl FromStr for PromptInit {
    type Err = DpmnError;

    /// `random`, or `token:<id>,<id>,...` (`token:` alone for an empty prompt).
    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(PromptInit::Random);
        }
        let ids = s
            .strip_prefix("token:")
            .ok_or_else(|| DpmnError::config(format!("unknown prompt init `{s}`")))?;
        if ids.is_empty() {
            return Ok(PromptInit::Token(Vec::new()));
        }
        ids.split(',')
            .map(|id| {
                id.trim()
                    .parse()
                    .map_err(|_| DpmnError::config(format!("bad token id `{id}` in prompt init")))
            })
            .collect::<Result<_>>()
            .map(PromptInit::Token)
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Random => "random",
            InitKind::Token => "token",
        })
    }
}

impl FromStr for InitKind {
    type Err = DpmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitKind::Random),
            "token" => Ok(InitKind::Token),
            other => Err(DpmnError::config(format!("unknown init kind `{other}`"))),
        }
    }
}

impl fmt::Display for TuningStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TuningStrategy::FixedLm => "fixed-lm",
            TuningStrategy::LmPlusPrompt => "lm-plus-prompt",
        })
    }
}

impl FromStr for TuningStrategy {
    type Err = DpmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-lm" => Ok(TuningStrategy::FixedLm),
            "lm-plus-prompt" => Ok(TuningStrategy::LmPlusPrompt),
            other => Err(DpmnError::config(format!("unknown tuning strategy `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            layers: 3,
            hidden: 4,
            heads: 2,
            ff: 8,
            vocab_size: vocab,
            max_seq_len: 8,
            dropout: 0.0,
        }
    }

    fn table(vocab: usize, d: usize) -> Tensor {
        Tensor::from_fn(&[vocab, d], |i| i as f64 * 0.5)
    }

    #[test]
    fn token_init_copies_rows_into_every_layer() {
        let cfg = PromptConfig {
            length: 1,
            form: PromptForm::Deep,
            init: PromptInit::Token(vec![7]),
            tuning: TuningStrategy::LmPlusPrompt,
        };
        let t = table(10, 4);
        let bank = init_prompt(&cfg, &encoder(10), &t, 0).unwrap();
        assert_eq!(bank.len(), 3);
        for m in bank.matrices() {
            assert_eq!(m.shape(), &[1, 4]);
            assert_eq!(m.data(), &t.data()[28..32]);
        }
    }

    #[test]
    fn random_init_is_seeded() {
        let cfg = PromptConfig {
            length: 2,
            form: PromptForm::Deep,
            init: PromptInit::Random,
            tuning: TuningStrategy::FixedLm,
        };
        let t = table(10, 4);
        let a = init_prompt(&cfg, &encoder(10), &t, 42).unwrap();
        let b = init_prompt(&cfg, &encoder(10), &t, 42).unwrap();
        let c = init_prompt(&cfg, &encoder(10), &t, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Layers get independent draws.
        assert_ne!(a.matrices()[0], a.matrices()[1]);
    }

    #[test]
    fn light_bank_has_one_entry() {
        let cfg = PromptConfig {
            length: 2,
            form: PromptForm::Light,
            init: PromptInit::Random,
            tuning: TuningStrategy::FixedLm,
        };
        let bank = init_prompt(&cfg, &encoder(10), &table(10, 4), 1).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.num_values(), 2 * 4);
    }

    #[test]
    fn init_errors() {
        let bad_id = PromptConfig {
            length: 1,
            form: PromptForm::Light,
            init: PromptInit::Token(vec![10]),
            tuning: TuningStrategy::FixedLm,
        };
        assert!(matches!(
            init_prompt(&bad_id, &encoder(10), &table(10, 4), 0),
            Err(DpmnError::Index { id: 10, .. })
        ));
        let too_long = PromptConfig {
            length: 8,
            form: PromptForm::Light,
            init: PromptInit::Random,
            tuning: TuningStrategy::FixedLm,
        };
        assert!(matches!(
            init_prompt(&too_long, &encoder(10), &table(10, 4), 0),
            Err(DpmnError::Config(_))
        ));
        let deep_empty = PromptConfig {
            length: 0,
            form: PromptForm::Deep,
            init: PromptInit::Random,
            tuning: TuningStrategy::FixedLm,
        };
        assert!(deep_empty.check().is_err());
    }

    #[test]
    fn sweep_product_and_filter() {
        let all = sweep_configs(
            &[1, 2],
            &[PromptForm::Deep, PromptForm::Light],
            &[InitKind::Random],
            TuningStrategy::LmPlusPrompt,
        );
        assert_eq!(all.len(), 4);
        assert_eq!((all[0].length, all[0].form), (1, PromptForm::Deep));
        assert_eq!((all[3].length, all[3].form), (2, PromptForm::Light));
        assert!(sweep_configs(&[0], &[PromptForm::Deep], &[InitKind::Random], TuningStrategy::FixedLm).is_empty());
        let token = sweep_configs(&[2], &[PromptForm::Deep], &[InitKind::Token], TuningStrategy::FixedLm);
        assert_eq!(token[0].init, PromptInit::Token(vec![CLS_ID, CLS_ID + 1]));
    }

    #[test]
    fn text_forms_round_trip() {
        for s in ["random", "token:2,5", "token:"] {
            assert_eq!(s.parse::<PromptInit>().unwrap().to_string(), s);
        }
        assert_eq!("fixed-lm".parse::<TuningStrategy>().unwrap(), TuningStrategy::FixedLm);
        assert!("deepest".parse::<PromptForm>().is_err());
    }
}
