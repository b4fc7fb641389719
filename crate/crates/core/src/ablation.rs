//! Architecture ablations and prompt sweeps over one base configuration.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::data::{Example, Vocab};
use crate::error::Result;
use crate::heads::HeadKind;
use crate::loss::LossWeights;
use crate::prompt::{default_token_ids, PromptConfig, PromptInit};
use crate::trainer::{TrainOutcome, Trainer};

/// One architecture: head type, multi-task loss on/off, prompt on/off.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub head: HeadKind,
    pub mtl: bool,
    pub prompt: bool,
}

impl Variant {
    pub fn structure(&self) -> String {
        let mut parts = vec![match self.head {
            HeadKind::Linear => "Encoder + Linear Head",
            HeadKind::BiLstmFfn => "Encoder + Bi-LSTM FFN Head",
        }];
        if self.head == HeadKind::Linear && (self.mtl || self.prompt) {
            parts[0] = "Encoder";
        }
        if self.mtl {
            parts.push("Multi-task Learning");
        }
        if self.prompt {
            parts.push("Prompt");
        }
        parts.join(" + ")
    }

    /// The base config with this variant's toggles applied. Prompt-off
    /// variants have no prompt slots; MTL-off variants train task A only.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.model.head.kind = self.head;
        c.loss_weights = if self.mtl {
            if base.loss_weights == LossWeights::single_task() {
                LossWeights::default()
            } else {
                base.loss_weights
            }
        } else {
            LossWeights::single_task()
        };
        c.model.prompt = if self.prompt {
            if base.model.prompt.length == 0 {
                PromptConfig {
                    tuning: base.model.prompt.tuning,
                    ..PromptConfig::default()
                }
            } else {
                base.model.prompt.clone()
            }
        } else {
            PromptConfig::disabled(base.model.prompt.tuning)
        };
        c
    }
}

/// The six rows of the component ablation, smallest model first.
pub const TABLE_VARIANTS: [Variant; 6] = [
    Variant {
        name: "BERT Base",
        head: HeadKind::Linear,
        mtl: false,
        prompt: false,
    },
    Variant {
        name: "BERT LSTM",
        head: HeadKind::BiLstmFfn,
        mtl: false,
        prompt: false,
    },
    Variant {
        name: "DPMN-P",
        head: HeadKind::BiLstmFfn,
        mtl: true,
        prompt: false,
    },
    Variant {
        name: "DPMN-M",
        head: HeadKind::BiLstmFfn,
        mtl: false,
        prompt: true,
    },
    Variant {
        name: "DPMN-B",
        head: HeadKind::Linear,
        mtl: true,
        prompt: true,
    },
    Variant {
        name: "DPMN",
        head: HeadKind::BiLstmFfn,
        mtl: true,
        prompt: true,
    },
];

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub config: TrainConfig,
    pub outcome: TrainOutcome,
}

impl AblationRow {
    /// Task-A dev macro F1 at the best epoch.
    pub fn dev_f1(&self) -> [f64; 3] {
        self.outcome.log.best_epoch().map_or([0.0; 3], |e| e.dev_f1)
    }

    pub fn best_epoch(&self) -> usize {
        self.outcome.log.best_epoch().map_or(0, |e| e.epoch)
    }

    pub fn prefix_values(&self) -> usize {
        self.outcome.checkpoint.params.count_values(|n| n.starts_with("prompt."))
    }

    pub fn trainable_values(&self) -> usize {
        let Ok(model) = self.outcome.checkpoint.model() else { return 0 };
        let names = model.trainable_parameters(&self.config.loss_weights).unwrap_or_default();
        names
            .iter()
            .filter_map(|n| model.params().get(n))
            .map(|t| t.numel())
            .sum()
    }
}

/// Trains every variant on the same data, vocabulary and seed. Runs are
/// independent and execute in parallel when `parallel` is set; the output
/// order always follows `variants`.
pub fn ablate(
    base: &TrainConfig,
    variants: &[Variant],
    train_set: &[Example],
    dev_set: &[Example],
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    let vocab = Vocab::build(train_set, base.min_freq)?;
    let run = |v: &Variant| -> Result<AblationRow> {
        let config = v.apply(base);
        let outcome = Trainer::new(config.clone()).vocab(vocab.clone()).run(train_set, dev_set)?;
        Ok(AblationRow {
            variant: *v,
            config,
            outcome,
        })
    };
    if parallel {
        variants.par_iter().map(run).collect()
    } else {
        variants.iter().map(run).collect()
    }
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "| Model | Structure | Dev Macro-F1 (A) | Dev F1 (B) | Dev F1 (C) | Best epoch | Trainable values | Prompt values |\n\
         |---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let f = r.dev_f1();
        let _ = writeln!(
            out,
            "| {} | {} | {:.4} | {:.4} | {:.4} | {} | {} | {} |",
            r.variant.name,
            r.variant.structure(),
            f[0],
            f[1],
            f[2],
            r.best_epoch(),
            r.trainable_values(),
            r.prefix_values()
        );
    }
    out
}

pub const ABLATION_CSV_HEADER: &str =
    "model,head,mtl,prompt,dev_f1_a,dev_f1_b,dev_f1_c,best_epoch,trainable_values,prompt_values";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let f = r.dev_f1();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant.name,
            r.variant.head,
            on_off(r.variant.mtl),
            on_off(r.variant.prompt),
            f[0],
            f[1],
            f[2],
            r.best_epoch(),
            r.trainable_values(),
            r.prefix_values()
        );
    }
    out
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub prompt: PromptConfig,
    pub outcome: TrainOutcome,
}

/// Trains the base config once per prompt setting.
pub fn sweep(
    base: &TrainConfig,
    prompts: &[PromptConfig],
    train_set: &[Example],
    dev_set: &[Example],
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    let vocab = Vocab::build(train_set, base.min_freq)?;
    let run = |p: &PromptConfig| -> Result<SweepRow> {
        let config = base.clone().with_prompt(p.clone());
        let outcome = Trainer::new(config).vocab(vocab.clone()).run(train_set, dev_set)?;
        Ok(SweepRow {
            prompt: p.clone(),
            outcome,
        })
    };
    if parallel {
        prompts.par_iter().map(run).collect()
    } else {
        prompts.iter().map(run).collect()
    }
}

pub const SWEEP_CSV_HEADER: &str = "length,form,init,tuning,dev_f1_a,dev_f1_b,dev_f1_c,best_epoch";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        let best = r.outcome.log.best_epoch();
        let f = best.map_or([0.0; 3], |e| e.dev_f1);
        let init = match &r.prompt.init {
            PromptInit::Random => "random".to_string(),
            PromptInit::Token(ids) if *ids == default_token_ids(ids.len()) => "token".to_string(),
            other => other.to_string(),
        };
        let form = if r.prompt.length == 0 {
            "none".to_string()
        } else {
            r.prompt.form.to_string()
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.prompt.length,
            form,
            init,
            r.prompt.tuning,
            f[0],
            f[1],
            f[2],
            best.map_or(0, |e| e.epoch)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticCorpus;
    use crate::gradcheck::tiny_config;

    fn base() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.model = tiny_config();
        c.model.encoder.vocab_size = 0;
        c.model.prompt.init = PromptInit::Random;
        c.learning_rate = 1e-3;
        c.batch_size = 8;
        c.max_epochs = 1;
        c
    }

    #[test]
    fn toggles_map_to_configs() {
        let b = base();
        let bert = TABLE_VARIANTS[0].apply(&b);
        assert_eq!(bert.model.prompt.length, 0);
        assert_eq!(bert.loss_weights, LossWeights::single_task());
        assert_eq!(bert.model.head.kind, HeadKind::Linear);
        let full = TABLE_VARIANTS[5].apply(&b);
        assert_eq!(full.model.prompt, b.model.prompt);
        assert_eq!(full.loss_weights, b.loss_weights);
        assert_eq!(TABLE_VARIANTS[4].structure(), "Encoder + Multi-task Learning + Prompt");
        assert_eq!(TABLE_VARIANTS[1].structure(), "Encoder + Bi-LSTM FFN Head");
    }

    #[test]
    fn six_rows_with_prompt_parameters_only_where_enabled() {
        let data = SyntheticCorpus {
            size: 16,
            ..SyntheticCorpus::default()
        }
        .generate();
        let rows = ablate(&base(), &TABLE_VARIANTS, &data, &data, true).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert_eq!(r.prefix_values() == 0, !r.variant.prompt, "{}", r.variant.name);
        }
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 7);
        assert!(ablation_markdown(&rows).contains("| DPMN-M |"));
        let serial = ablate(&base(), &TABLE_VARIANTS, &data, &data, false).unwrap();
        assert_eq!(ablation_csv(&serial), csv);
    }
}
