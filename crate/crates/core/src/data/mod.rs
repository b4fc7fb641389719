//! OLID-style corpora: hierarchical labels, tokenisation, vocabulary and
//! padded batches.

mod batch;
mod synthetic;
mod tokenize;
mod tsv;

pub use batch::{make_batches, Batch};
pub use synthetic::SyntheticCorpus;
pub use tokenize::{split_tokens, tokenize, Vocab, CLS_ID, PAD_ID, UNK_ID};
pub use tsv::{parse_tsv, parse_tsv_str, to_tsv, to_tsv_row};

use std::fmt;
use std::str::FromStr;

use crate::error::{DpmnError, Result};

/// One of the three hierarchical sub-tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    /// Offensive or not; the main task.
    A,
    /// Targeted insult vs untargeted, defined only for offensive posts.
    B,
    /// Target kind, defined only for targeted insults.
    C,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::A, Task::B, Task::C];

    pub fn num_classes(self) -> usize {
        match self {
            Task::A | Task::B => 2,
            Task::C => 3,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::A => "a",
            Task::B => "b",
            Task::C => "c",
        }
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::A => &["NOT", "OFF"],
            Task::B => &["TIN", "UNT"],
            Task::C => &["IND", "GRP", "OTH"],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelA {
    Not,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelB {
    Tin,
    Unt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelC {
    Ind,
    Grp,
    Oth,
}

macro_rules! label_enum {
    ($ty:ident, $task:expr, [$($variant:ident),*]) => {
        impl $ty {
            pub fn class_index(self) -> usize {
                self as usize
            }

            pub fn as_str(self) -> &'static str {
                $task.class_names()[self as usize]
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                let names = $task.class_names();
                [$($ty::$variant),*]
                    .into_iter()
                    .zip(names)
                    .find(|(_, n)| **n == s)
                    .map(|(v, _)| v)
                    .ok_or_else(|| format!("unknown label `{s}`, expected one of {names:?}"))
            }
        }
    };
}

label_enum!(LabelA, Task::A, [Not, Off]);
label_enum!(LabelB, Task::B, [Tin, Unt]);
label_enum!(LabelC, Task::C, [Ind, Grp, Oth]);

/// A labelled post. `label_b` is present exactly when the post is offensive
/// and `label_c` exactly when it is a targeted insult.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label_a: LabelA,
    pub label_b: Option<LabelB>,
    pub label_c: Option<LabelC>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        label_a: LabelA,
        label_b: Option<LabelB>,
        label_c: Option<LabelC>,
    ) -> std::result::Result<Self, String> {
        let ex = Example {
            id: id.into(),
            text: text.into(),
            label_a,
            label_b,
            label_c,
        };
        ex.check_hierarchy()?;
        Ok(ex)
    }

    pub fn check_hierarchy(&self) -> std::result::Result<(), String> {
        if self.text.trim().is_empty() {
            return Err("text is empty".into());
        }
        match (self.label_a, self.label_b) {
            (LabelA::Not, Some(b)) => return Err(format!("task B label {} on a NOT post", b.as_str())),
            (LabelA::Off, None) => return Err("OFF post without a task B label".into()),
            _ => {}
        }
        match (self.label_b, self.label_c) {
            (Some(LabelB::Tin), None) => Err("TIN post without a task C label".into()),
            (b, Some(c)) if b != Some(LabelB::Tin) => {
                Err(format!("task C label {} without TIN", c.as_str()))
            }
            _ => Ok(()),
        }
    }

    pub fn labels(&self) -> TaskLabels {
        TaskLabels {
            a: Some(self.label_a.class_index()),
            b: self.label_b.map(LabelB::class_index),
            c: self.label_c.map(LabelC::class_index),
        }
    }
}

/// Class index per task, `None` where the task does not apply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TaskLabels {
    pub a: Option<usize>,
    pub b: Option<usize>,
    pub c: Option<usize>,
}

impl TaskLabels {
    /// Builds labels, rejecting hierarchy violations and out-of-range classes.
    pub fn new(a: Option<usize>, b: Option<usize>, c: Option<usize>) -> Result<Self> {
        let labels = TaskLabels { a, b, c };
        for task in Task::ALL {
            if let Some(k) = labels.get(task) {
                if k >= task.num_classes() {
                    return Err(DpmnError::contract(format!(
                        "task {task} label {k} out of range"
                    )));
                }
            }
        }
        if b.is_some() && a != Some(LabelA::Off.class_index()) {
            return Err(DpmnError::contract("task B label requires task A = OFF"));
        }
        if c.is_some() && b != Some(LabelB::Tin.class_index()) {
            return Err(DpmnError::contract("task C label requires task B = TIN"));
        }
        Ok(labels)
    }

    pub fn get(&self, task: Task) -> Option<usize> {
        match task {
            Task::A => self.a,
            Task::B => self.b,
            Task::C => self.c,
        }
    }

    pub fn set(&mut self, task: Task, value: Option<usize>) {
        match task {
            Task::A => self.a = value,
            Task::B => self.b = value,
            Task::C => self.c = value,
        }
    }
}
