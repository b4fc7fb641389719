//! Per-task classifiers over the encoder's shared representation.
//!
//! The Bi-LSTM + FFN head runs a forward LSTM up to each row's last real
//! position and a backward LSTM from that position down to 0, concatenates
//! the two final hidden states and feeds them to `ReLU` between two linear
//! layers. The linear head reads sequence position 0 only.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Tensor, Var};
use crate::data::Task;
use crate::error::{DpmnError, Result};
use crate::nn::{self, linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    BiLstmFfn,
    Linear,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::BiLstmFfn => "bilstm-ffn",
            HeadKind::Linear => "linear",
        })
    }
}

impl FromStr for HeadKind {
    type Err = DpmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm-ffn" => Ok(HeadKind::BiLstmFfn),
            "linear" => Ok(HeadKind::Linear),
            other => Err(DpmnError::config(format!("unknown head kind `{other}`"))),
        }
    }
}

/// Head sizes. `lstm_hidden` is `h` per direction; `ffn_hidden` is the
/// width between the two FFN layers.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub lstm_hidden: usize,
    pub ffn_hidden: usize,
}

impl HeadConfig {
    /// `h = d/2`, so the concatenated state is as wide as the encoder.
    pub fn for_hidden(kind: HeadKind, hidden: usize) -> Self {
        HeadConfig {
            kind,
            lstm_hidden: (hidden / 2).max(1),
            ffn_hidden: hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lstm_hidden == 0 || self.ffn_hidden == 0 {
            return Err(DpmnError::config("head sizes must be positive"));
        }
        Ok(())
    }
}

/// One task's head; parameter values live in a [`ParamStore`] under
/// `head_<task>.*`.
#[derive(Clone, Debug)]
pub struct TaskHead {
    task: Task,
    input: usize,
    classes: usize,
    config: HeadConfig,
}

impl TaskHead {
    pub fn new(task: Task, input: usize, config: HeadConfig) -> Result<Self> {
        config.validate()?;
        Ok(TaskHead {
            task,
            input,
            classes: task.num_classes(),
            config,
        })
    }

    /// Head whose output width is `classes`; fails if it does not match the task.
    pub fn with_classes(task: Task, input: usize, classes: usize, config: HeadConfig) -> Result<Self> {
        if classes != task.num_classes() {
            return Err(DpmnError::config(format!(
                "task {task} has {} classes, head was given {classes}",
                task.num_classes()
            )));
        }
        Self::new(task, input, config)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn kind(&self) -> HeadKind {
        self.config.kind
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn prefix(task: Task) -> String {
        format!("head_{}", task.name())
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", Self::prefix(self.task))
    }

    /// PyTorch-style U(-1/√fan_in, 1/√fan_in) weights and biases.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let (d, h, f, c) = (self.input, self.config.lstm_hidden, self.config.ffn_hidden, self.classes);
        let mut put = |store: &mut ParamStore, name: String, shape: &[usize], fan_in: usize| {
            store.insert(name, nn::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng))
        };
        match self.config.kind {
            HeadKind::BiLstmFfn => {
                for dir in ["lstm_fwd", "lstm_bwd"] {
                    put(store, self.name(&format!("{dir}.w_ih")), &[d, 4 * h], h)?;
                    put(store, self.name(&format!("{dir}.w_hh")), &[h, 4 * h], h)?;
                    put(store, self.name(&format!("{dir}.b")), &[4 * h], h)?;
                }
                put(store, self.name("ffn1.w"), &[2 * h, f], 2 * h)?;
                put(store, self.name("ffn1.b"), &[f], 2 * h)?;
                put(store, self.name("ffn2.w"), &[f, c], f)?;
                put(store, self.name("ffn2.b"), &[c], f)?;
            }
            HeadKind::Linear => {
                put(store, self.name("linear.w"), &[d, c], d)?;
                put(store, self.name("linear.b"), &[c], d)?;
            }
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let parts: &[&str] = match self.config.kind {
            HeadKind::BiLstmFfn => &[
                "ffn1.b",
                "ffn1.w",
                "ffn2.b",
                "ffn2.w",
                "lstm_bwd.b",
                "lstm_bwd.w_hh",
                "lstm_bwd.w_ih",
                "lstm_fwd.b",
                "lstm_fwd.w_hh",
                "lstm_fwd.w_ih",
            ],
            HeadKind::Linear => &["linear.b", "linear.w"],
        };
        parts.iter().map(|p| self.name(p)).collect()
    }

    /// Logits `[batch × classes]` from `shared[batch × S × d]`.
    /// `lengths` counts each row's real positions, prompt slots included.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, shared: Var, lengths: &[usize]) -> Result<Var> {
        match self.config.kind {
            HeadKind::BiLstmFfn => {
                let h = self.bilstm_forward(tape, store, shared, lengths)?;
                self.ffn_forward(tape, store, h)
            }
            HeadKind::Linear => {
                let s = tape.shape(shared).to_vec();
                self.check_shared(&s, lengths)?;
                let first = tape.slice(shared, 1, 0, 1)?;
                let first = tape.reshape(first, &[s[0], s[2]])?;
                linear(tape, store, first, &self.name("linear"))
            }
        }
    }

    fn check_shared(&self, shape: &[usize], lengths: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[2] != self.input || lengths.len() != shape[0] {
            return Err(DpmnError::Shape {
                op: "task head",
                lhs: shape.to_vec(),
                rhs: vec![lengths.len(), self.input],
            });
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > shape[1]) {
            return Err(DpmnError::contract(format!(
                "row length {bad} outside 1..={}",
                shape[1]
            )));
        }
        Ok(())
    }

    /// `[F_h ; B_h]`, shape `[batch × 2h]`.
    pub fn bilstm_forward(&self, tape: &mut Tape, store: &ParamStore, shared: Var, lengths: &[usize]) -> Result<Var> {
        let s = tape.shape(shared).to_vec();
        self.check_shared(&s, lengths)?;
        let seq = s[1];
        let fwd = self.lstm_scan(tape, store, shared, lengths, "lstm_fwd", &mut (0..seq))?;
        let bwd = self.lstm_scan(tape, store, shared, lengths, "lstm_bwd", &mut (0..seq).rev())?;
        tape.concat(&[fwd, bwd], 1)
    }

    /// Runs one LSTM direction over the steps in `order`, updating a row's
    /// state only at its real positions. Returns the final hidden state.
    fn lstm_scan(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        shared: Var,
        lengths: &[usize],
        dir: &str,
        order: &mut dyn Iterator<Item = usize>,
    ) -> Result<Var> {
        let s = tape.shape(shared).to_vec();
        let (batch, seq, d) = (s[0], s[1], s[2]);
        let h = self.config.lstm_hidden;
        let w_ih = tape.param(store, &self.name(&format!("{dir}.w_ih")))?;
        let w_hh = tape.param(store, &self.name(&format!("{dir}.w_hh")))?;
        let bias = tape.param(store, &self.name(&format!("{dir}.b")))?;

        // Input projections for every position at once: [batch, seq, 4h].
        let flat = tape.reshape(shared, &[batch * seq, d])?;
        let xw = tape.matmul(flat, w_ih)?;
        let xw = tape.reshape(xw, &[batch, seq, 4 * h])?;

        let mut hidden = tape.constant(Tensor::zeros(&[batch, h]))?;
        let mut cell = tape.constant(Tensor::zeros(&[batch, h]))?;
        for t in order {
            let active: Vec<bool> = lengths.iter().map(|&len| t < len).collect();
            if !active.iter().any(|&a| a) {
                continue;
            }
            let x_t = tape.slice(xw, 1, t, 1)?;
            let x_t = tape.reshape(x_t, &[batch, 4 * h])?;
            let rec = tape.matmul(hidden, w_hh)?;
            let gates = tape.add(x_t, rec)?;
            let gates = tape.add(gates, bias)?;
            let i_gate = tape.slice(gates, 1, 0, h)?;
            let i_gate = tape.sigmoid(i_gate)?;
            let f_gate = tape.slice(gates, 1, h, h)?;
            let f_gate = tape.sigmoid(f_gate)?;
            let g_gate = tape.slice(gates, 1, 2 * h, h)?;
            let g_gate = tape.tanh(g_gate)?;
            let o_gate = tape.slice(gates, 1, 3 * h, h)?;
            let o_gate = tape.sigmoid(o_gate)?;
            let keep = tape.mul(f_gate, cell)?;
            let write = tape.mul(i_gate, g_gate)?;
            let new_cell = tape.add(keep, write)?;
            let squashed = tape.tanh(new_cell)?;
            let new_hidden = tape.mul(o_gate, squashed)?;

            if active.iter().all(|&a| a) {
                hidden = new_hidden;
                cell = new_cell;
            } else {
                let on = Tensor::from_fn(&[batch, h], |i| if active[i / h] { 1.0 } else { 0.0 });
                let off = Tensor::from_fn(&[batch, h], |i| if active[i / h] { 0.0 } else { 1.0 });
                let on = tape.constant(on)?;
                let off = tape.constant(off)?;
                hidden = blend(tape, new_hidden, hidden, on, off)?;
                cell = blend(tape, new_cell, cell, on, off)?;
            }
        }
        Ok(hidden)
    }

    /// `W2 · ReLU(W1 · h + b1) + b2`.
    pub fn ffn_forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let width = 2 * self.config.lstm_hidden;
        if tape.shape(h).len() != 2 || tape.shape(h)[1] != width {
            return Err(DpmnError::Shape {
                op: "ffn",
                lhs: tape.shape(h).to_vec(),
                rhs: vec![width],
            });
        }
        let hidden = linear(tape, store, h, &self.name("ffn1"))?;
        let hidden = tape.relu(hidden)?;
        linear(tape, store, hidden, &self.name("ffn2"))
    }
}

fn blend(tape: &mut Tape, new: Var, old: Var, on: Var, off: Var) -> Result<Var> {
    let a = tape.mul(new, on)?;
    let b = tape.mul(old, off)?;
    tape.add(a, b)
}
