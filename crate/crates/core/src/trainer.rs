//! Training loop, evaluation and the per-epoch run log.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{make_batches, Example, Task, Vocab};
use crate::error::{DpmnError, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::Dpmn;

/// Stops once the monitored metric has gone `patience` consecutive epochs
/// without strictly improving on its best value.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

/// What [`EarlyStopping::observe`] decided for one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = self.best.is_none_or(|(_, b)| metric > b);
        if improved {
            self.best = Some((epoch, metric));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.best.map(|(_, m)| m)
    }
}

/// Losses recorded for one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    /// 1-based across the whole run.
    pub step: usize,
    pub task_losses: [f64; 3],
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's steps of the losses for A, B, C.
    pub train_losses: [f64; 3],
    pub train_total: f64,
    pub dev_f1: [f64; 3],
    /// The value early stopping saw (task-A dev F1 unless overridden).
    pub monitored: f64,
    pub wall_ms: f64,
    pub best: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

pub const EPOCH_CSV_HEADER: &str =
    "epoch,loss_a,loss_b,loss_c,loss_total,dev_f1_a,dev_f1_b,dev_f1_c,monitored,wall_ms,best";
pub const STEP_CSV_HEADER: &str = "epoch,step,loss_a,loss_b,loss_c,loss_total";

impl RunLog {
    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.best)
    }

    /// One row per epoch; floats in shortest round-trip form.
    pub fn epochs_csv(&self) -> String {
        self.render_epochs(true)
    }

    /// Same as [`RunLog::epochs_csv`] without the wall-time column, for
    /// comparing runs.
    pub fn epochs_csv_without_time(&self) -> String {
        self.render_epochs(false)
    }

    fn render_epochs(&self, with_time: bool) -> String {
        let mut out = String::new();
        if with_time {
            out.push_str(EPOCH_CSV_HEADER);
        } else {
            out.push_str(&EPOCH_CSV_HEADER.replace(",wall_ms", ""));
        }
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch,
                fmt(e.train_losses[0]),
                fmt(e.train_losses[1]),
                fmt(e.train_losses[2]),
                fmt(e.train_total),
                fmt(e.dev_f1[0]),
                fmt(e.dev_f1[1]),
                fmt(e.dev_f1[2]),
                fmt(e.monitored),
            );
            if with_time {
                let _ = write!(out, ",{:.1}", e.wall_ms);
            }
            let _ = writeln!(out, ",{}", u8::from(e.best));
        }
        out
    }

    pub fn steps_csv(&self) -> String {
        let mut out = format!("{STEP_CSV_HEADER}\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.epoch,
                s.step,
                fmt(s.task_losses[0]),
                fmt(s.task_losses[1]),
                fmt(s.task_losses[2]),
                fmt(s.total)
            );
        }
        out
    }

    /// True when both runs recorded the same losses and metrics; wall time
    /// is ignored.
    pub fn same_trajectory(&self, other: &RunLog) -> bool {
        self.steps == other.steps && self.epochs_csv_without_time() == other.epochs_csv_without_time()
    }
}

// Adding 0.0 turns a -0.0 (an empty masked loss) into 0.
fn fmt(x: f64) -> String {
    (x + 0.0).to_string()
}

/// Per-task macro F1 and confusion matrices. Examples without a label for
/// a task are left out of that task's matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub f1: [f64; 3],
    pub confusion: [ConfusionMatrix; 3],
}

impl EvalReport {
    pub fn examples(&self, task: Task) -> usize {
        self.confusion[task.index()].total()
    }
}

pub fn evaluate_model(model: &Dpmn, vocab: &Vocab, examples: &[Example], batch_size: usize) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(DpmnError::contract("cannot evaluate on an empty dataset"));
    }
    let max_text = max_text_len(model);
    let mut confusion = Task::ALL.map(|t| ConfusionMatrix::new(t.num_classes()));
    for batch in make_batches(examples, vocab, batch_size, max_text, None)? {
        let preds = model.predict(&batch)?;
        for task in Task::ALL {
            for (row, gold) in batch.task_labels(task).into_iter().enumerate() {
                if let Some(g) = gold {
                    confusion[task.index()].add(preds[task.index()][row], g)?;
                }
            }
        }
    }
    Ok(EvalReport {
        f1: [0, 1, 2].map(|i| confusion[i].macro_f1()),
        confusion,
    })
}

/// Evaluates a checkpoint on labelled examples.
pub fn evaluate(checkpoint: &Checkpoint, examples: &[Example]) -> Result<EvalReport> {
    let model = checkpoint.model()?;
    evaluate_model(&model, &checkpoint.vocab, examples, checkpoint.config.batch_size)
}

fn max_text_len(model: &Dpmn) -> usize {
    let c = model.config();
    c.encoder.max_seq_len - c.prompt.length
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best epoch by the monitored metric.
    pub checkpoint: Checkpoint,
    pub log: RunLog,
}

type DevMetric<'a> = Box<dyn FnMut(usize, &EvalReport) -> f64 + 'a>;
type EpochHook<'a> = Box<dyn FnMut(&EpochRecord) + 'a>;

/// Runs training with optional hooks.
///
/// ```no_run
/// # use dpmn::{config::TrainConfig, data::SyntheticCorpus, trainer::Trainer};
/// let corpus = SyntheticCorpus::default().generate();
/// let outcome = Trainer::new(TrainConfig::default()).run(&corpus, &corpus)?;
/// println!("{}", outcome.log.epochs_csv());
/// # Ok::<(), dpmn::DpmnError>(())
/// ```
pub struct Trainer<'a> {
    config: TrainConfig,
    vocab: Option<Vocab>,
    max_steps: Option<usize>,
    dev_metric: Option<DevMetric<'a>>,
    on_epoch: Option<EpochHook<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig) -> Self {
        Trainer {
            config,
            vocab: None,
            max_steps: None,
            dev_metric: None,
            on_epoch: None,
        }
    }

    /// Use this vocabulary instead of building one from the training set.
    pub fn vocab(mut self, vocab: Vocab) -> Self {
        self.vocab = Some(vocab);
        self
    }

    /// Stop after this many optimizer steps (the current epoch is still
    /// evaluated and logged).
    pub fn max_steps(mut self, steps: usize) -> Self {
        self.max_steps = Some(steps);
        self
    }

    /// Replaces the early-stopping metric. The closure gets the 1-based
    /// epoch and the dev evaluation.
    pub fn dev_metric(mut self, f: impl FnMut(usize, &EvalReport) -> f64 + 'a) -> Self {
        self.dev_metric = Some(Box::new(f));
        self
    }

    pub fn on_epoch(mut self, f: impl FnMut(&EpochRecord) + 'a) -> Self {
        self.on_epoch = Some(Box::new(f));
        self
    }

    pub fn run(mut self, train_set: &[Example], dev_set: &[Example]) -> Result<TrainOutcome> {
        let cfg = self.config.clone();
        cfg.validate()?;
        if train_set.is_empty() || dev_set.is_empty() {
            return Err(DpmnError::contract("training and dev sets must be non-empty"));
        }
        let vocab = match self.vocab.take() {
            Some(v) => v,
            None => Vocab::build(train_set, cfg.min_freq)?,
        };
        let model_config = cfg.model_for_vocab(vocab.len())?;
        let mut saved_config = cfg.clone();
        saved_config.model = model_config.clone();

        let mut model = Dpmn::new(model_config, cfg.seed)?;
        let trainable = model.trainable_parameters(&cfg.loss_weights)?;
        let mut optimizer = cfg.optimizer();
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD50_u64);
        let mut early = EarlyStopping::new(cfg.early_stop_patience);
        let max_text = max_text_len(&model);

        let mut log = RunLog::default();
        let mut best_params = model.params().clone();
        let mut step = 0usize;
        let started = Instant::now();
        'epochs: for epoch in 1..=cfg.max_epochs {
            let shuffle = cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
            let batches = make_batches(train_set, &vocab, cfg.batch_size, max_text, Some(shuffle))?;
            let mut sums = [0.0; 4];
            let mut steps_this_epoch = 0usize;
            let mut reached_limit = false;
            for batch in &batches {
                step += 1;
                let mut tape = Tape::new();
                let pass = model
                    .loss(&mut tape, batch, &cfg.loss_weights, Some(&mut dropout_rng))
                    .map_err(|e| at_step(e, epoch, step))?;
                let losses = pass.task_losses.map(|l| tape.value(l)[0]);
                let total = tape.value(pass.total)[0];
                if !total.is_finite() {
                    return Err(DpmnError::NonFinite(format!(
                        "loss at epoch {epoch}, step {step} is {total}"
                    )));
                }
                tape.backward(pass.total).map_err(|e| at_step(e, epoch, step))?;
                let params = model.params_mut();
                params.zero_grad();
                tape.accumulate_param_grads(params)?;
                optimizer.step(params, &trainable).map_err(|e| at_step(e, epoch, step))?;

                for (s, v) in sums.iter_mut().zip(losses.iter().chain([&total])) {
                    *s += v;
                }
                steps_this_epoch += 1;
                log.steps.push(StepRecord {
                    epoch,
                    step,
                    task_losses: losses,
                    total,
                });
                if self.max_steps.is_some_and(|m| step >= m) {
                    reached_limit = true;
                    break;
                }
            }

            let report = evaluate_model(&model, &vocab, dev_set, cfg.batch_size)?;
            let monitored = match self.dev_metric.as_mut() {
                Some(f) => f(epoch, &report),
                None => report.f1[0],
            };
            let decision = early.observe(epoch, monitored);
            if decision.improved {
                best_params = model.params().clone();
                for e in &mut log.epochs {
                    e.best = false;
                }
            }
            let n = steps_this_epoch.max(1) as f64;
            let record = EpochRecord {
                epoch,
                train_losses: [sums[0] / n, sums[1] / n, sums[2] / n],
                train_total: sums[3] / n,
                dev_f1: report.f1,
                monitored,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                best: decision.improved,
            };
            if let Some(hook) = self.on_epoch.as_mut() {
                hook(&record);
            }
            log.epochs.push(record);
            if decision.stop || reached_limit {
                break 'epochs;
            }
        }

        let params = clear_grads(&best_params);
        Ok(TrainOutcome {
            checkpoint: Checkpoint {
                config: saved_config,
                vocab,
                params,
            },
            log,
        })
    }
}

/// Drops gradient buffers so checkpoints compare by value only.
fn clear_grads(store: &ParamStore) -> ParamStore {
    let mut clean = ParamStore::new();
    for (name, t) in store.iter() {
        let fresh = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("same shape");
        clean.insert(name, fresh).expect("unique names");
    }
    clean
}

fn at_step(e: DpmnError, epoch: usize, step: usize) -> DpmnError {
    match e {
        DpmnError::NonFinite(msg) => DpmnError::NonFinite(format!("{msg} (epoch {epoch}, step {step})")),
        other => other,
    }
}

/// Trains with default hooks.
pub fn train(config: &TrainConfig, train_set: &[Example], dev_set: &[Example]) -> Result<TrainOutcome> {
    Trainer::new(config.clone()).run(train_set, dev_set)
}
