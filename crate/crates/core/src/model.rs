//! The full network: prompt-augmented encoder plus one head per task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::data::{Batch, Task};
use crate::encoder::{self, EncoderConfig, EncoderStack, TOKEN_EMBEDDING};
use crate::error::{DpmnError, Result};
use crate::heads::{HeadConfig, HeadKind, TaskHead};
use crate::loss::{cross_entropy, total_loss, LossWeights};
use crate::prompt::{init_prompt, PrefixBank, PromptConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub prompt: PromptConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Default encoder and prompt with Bi-LSTM heads sized from `hidden`.
    pub fn with_vocab(vocab_size: usize) -> Self {
        let encoder = EncoderConfig {
            vocab_size,
            ..EncoderConfig::default()
        };
        let head = HeadConfig::for_hidden(HeadKind::BiLstmFfn, encoder.hidden);
        ModelConfig {
            encoder,
            prompt: PromptConfig::default(),
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.prompt.validate(&self.encoder)?;
        self.head.validate()
    }

    pub fn prefix_entries(&self) -> usize {
        PrefixBank::entries_for(self.prompt.form, self.prompt.length, self.encoder.layers)
    }
}

/// Symbolic outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    /// `[batch × (p_n + T) × d]`.
    pub shared: Var,
    /// Logits for tasks A, B and C.
    pub logits: [Var; 3],
}

/// Per-task and total losses of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossPass {
    pub forward: ForwardPass,
    pub task_losses: [Var; 3],
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct Dpmn {
    config: ModelConfig,
    encoder: EncoderStack,
    heads: [TaskHead; 3],
    params: ParamStore,
}

impl Dpmn {
    /// Fresh parameters drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (encoder, heads) = Self::structure(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder.init_params(&mut params, &mut rng)?;
        let prompt_seed = rng.random::<u64>();
        let table = params.require(TOKEN_EMBEDDING)?.clone();
        let bank = init_prompt(&config.prompt, &config.encoder, &table, prompt_seed)?;
        bank.insert_into(&mut params)?;
        for head in &heads {
            head.init_params(&mut params, &mut rng)?;
        }
        Ok(Dpmn {
            config,
            encoder,
            heads,
            params,
        })
    }

    /// Wraps existing parameter values, checking that names and shapes are
    /// exactly those `config` calls for.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Dpmn::new(config, 0)?;
        let expected: Vec<(&str, &[usize])> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let found: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != found {
            let missing = expected.iter().find(|e| !found.contains(e));
            let extra = found.iter().find(|f| !expected.contains(f));
            return Err(DpmnError::config(format!(
                "parameters do not match the model config (first missing: {missing:?}, first unexpected: {extra:?})"
            )));
        }
        Ok(Dpmn { params, ..reference })
    }

    fn structure(config: &ModelConfig) -> Result<(EncoderStack, [TaskHead; 3])> {
        config.validate()?;
        let encoder = EncoderStack::new(config.encoder.clone())?;
        let d = config.encoder.hidden;
        let heads = [Task::A, Task::B, Task::C].map(|t| TaskHead::new(t, d, config.head.clone()));
        let [a, b, c] = heads;
        Ok((encoder, [a?, b?, c?]))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &EncoderStack {
        &self.encoder
    }

    pub fn head(&self, task: Task) -> &TaskHead {
        &self.heads[task.index()]
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn prefix_bank(&self) -> Result<PrefixBank> {
        let p = &self.config.prompt;
        PrefixBank::from_store(&self.params, p.form, p.length, self.config.encoder.layers)
    }

    /// Parameters the optimizer updates: prompt and (under lm-plus-prompt)
    /// encoder, plus the heads of tasks whose loss weight is nonzero.
    pub fn trainable_parameters(&self, weights: &LossWeights) -> Result<Vec<String>> {
        let bank = self.prefix_bank()?;
        let mut names = encoder::trainable_parameters(&self.encoder, &bank, self.config.prompt.tuning);
        for head in &self.heads {
            if weights.get(head.task()) > 0.0 {
                names.extend(head.param_names());
            }
        }
        names.sort();
        Ok(names)
    }

    /// Encoder plus all three heads. Dropout is active only when `rng` is given.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<ForwardPass> {
        let p_n = self.config.prompt.length;
        let emb = self.encoder.embed(tape, &self.params, batch.ids(), batch.size(), p_n)?;
        let prefix = PrefixBank::load(tape, &self.params, self.config.prefix_entries())?;
        let shared = self.encoder.encode(
            tape,
            &self.params,
            emb,
            &prefix,
            self.config.prompt.form,
            &batch.mask(),
            rng,
        )?;
        let lengths: Vec<usize> = batch.lengths().iter().map(|l| l + p_n).collect();
        let mut logits = Vec::with_capacity(3);
        for head in &self.heads {
            logits.push(head.forward(tape, &self.params, shared, &lengths)?);
        }
        Ok(ForwardPass {
            shared,
            logits: [logits[0], logits[1], logits[2]],
        })
    }

    /// Forward pass followed by the masked per-task losses and their
    /// weighted total.
    pub fn loss(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        weights: &LossWeights,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossPass> {
        let forward = self.forward(tape, batch, rng)?;
        let mut task_losses = Vec::with_capacity(3);
        for task in Task::ALL {
            let labels = batch.task_labels(task);
            task_losses.push(cross_entropy(tape, forward.logits[task.index()], &labels, task)?);
        }
        let task_losses = [task_losses[0], task_losses[1], task_losses[2]];
        let total = total_loss(tape, task_losses, weights)?;
        Ok(LossPass {
            forward,
            task_losses,
            total,
        })
    }

    /// Argmax class per row for each task, dropout off.
    pub fn predict(&self, batch: &Batch) -> Result<[Vec<usize>; 3]> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, batch, None)?;
        Ok(pass.logits.map(|l| argmax_rows(tape.value(l), tape.shape(l)[1])))
    }
}

fn argmax_rows(values: &[f64], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskLabels;
    use crate::prompt::{PromptForm, PromptInit, TuningStrategy};

    pub(crate) fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                layers: 2,
                hidden: 8,
                heads: 2,
                ff: 16,
                vocab_size: vocab,
                max_seq_len: 12,
                dropout: 0.0,
            },
            prompt: PromptConfig {
                length: 2,
                form: PromptForm::Deep,
                init: PromptInit::Random,
                tuning: TuningStrategy::LmPlusPrompt,
            },
            head: HeadConfig::for_hidden(HeadKind::BiLstmFfn, 8),
        }
    }

    fn batch() -> Batch {
        Batch::new(
            vec![vec![2, 5, 6, 7], vec![2, 9]],
            vec![
                TaskLabels::new(Some(1), Some(0), Some(2)).unwrap(),
                TaskLabels::new(Some(0), None, None).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Dpmn::new(tiny(12), 3).unwrap();
        let b = Dpmn::new(tiny(12), 3).unwrap();
        let c = Dpmn::new(tiny(12), 4).unwrap();
        assert_eq!(a.params().checksum(|_| true), b.params().checksum(|_| true));
        assert_ne!(a.params().checksum(|_| true), c.params().checksum(|_| true));
    }

    #[test]
    fn forward_shapes() {
        let model = Dpmn::new(tiny(12), 1).unwrap();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &batch(), None).unwrap();
        assert_eq!(tape.shape(pass.shared), &[2, 6, 8]);
        assert_eq!(tape.shape(pass.logits[0]), &[2, 2]);
        assert_eq!(tape.shape(pass.logits[2]), &[2, 3]);
        let preds = model.predict(&batch()).unwrap();
        assert_eq!(preds[2].len(), 2);
        assert!(preds[2].iter().all(|&p| p < 3));
    }

    #[test]
    fn from_params_checks_layout() {
        let model = Dpmn::new(tiny(12), 1).unwrap();
        let params = model.params().clone();
        assert!(Dpmn::from_params(tiny(12), params.clone()).is_ok());
        let mut other = tiny(12);
        other.prompt.length = 1;
        assert!(matches!(Dpmn::from_params(other, params), Err(DpmnError::Config(_))));
    }

    #[test]
    fn trainable_sets() {
        let mut cfg = tiny(12);
        let model = Dpmn::new(cfg.clone(), 1).unwrap();
        let all = model.trainable_parameters(&LossWeights::default()).unwrap();
        assert_eq!(all.len(), model.params().len());
        let single = model.trainable_parameters(&LossWeights::single_task()).unwrap();
        assert!(single.iter().all(|n| !n.starts_with("head_b") && !n.starts_with("head_c")));

        cfg.prompt.tuning = TuningStrategy::FixedLm;
        let model = Dpmn::new(cfg, 1).unwrap();
        let fixed = model.trainable_parameters(&LossWeights::default()).unwrap();
        assert!(fixed.iter().all(|n| !n.starts_with("encoder.")));
        assert!(fixed.contains(&"prompt.prefix01".to_string()));
    }

    #[test]
    fn each_task_loss_reaches_only_its_own_head() {
        let model = Dpmn::new(tiny(12), 2).unwrap();
        for task in Task::ALL {
            let mut tape = Tape::new();
            let pass = model.loss(&mut tape, &batch(), &LossWeights::default(), None).unwrap();
            tape.backward(pass.task_losses[task.index()]).unwrap();
            let mut store = model.params().clone();
            tape.accumulate_param_grads(&mut store).unwrap();
            for (name, t) in store.iter() {
                let nonzero = t.grad().is_some_and(|g| g.iter().any(|x| *x != 0.0));
                if name.starts_with("head_") {
                    assert_eq!(nonzero, name.starts_with(&TaskHead::prefix(task)), "{name}");
                }
            }
            assert!(store.get("prompt.prefix00").unwrap().grad().unwrap().iter().any(|x| *x != 0.0));
        }
    }
}
