use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{tokenize, Example, Task, TaskLabels, Vocab, PAD_ID};
use crate::error::{DpmnError, Result};

/// Right-padded token ids for a group of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    ids: Vec<usize>,
    size: usize,
    seq_len: usize,
    lengths: Vec<usize>,
    labels: Vec<TaskLabels>,
}

impl Batch {
    /// Pads every row to the longest one. Rows must be non-empty.
    pub fn new(rows: Vec<Vec<usize>>, labels: Vec<TaskLabels>) -> Result<Self> {
        if rows.is_empty() || rows.len() != labels.len() {
            return Err(DpmnError::contract(format!(
                "batch needs matching non-empty rows and labels ({} vs {})",
                rows.len(),
                labels.len()
            )));
        }
        if rows.iter().any(Vec::is_empty) {
            return Err(DpmnError::contract("batch row with zero tokens"));
        }
        let seq_len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let lengths = rows.iter().map(Vec::len).collect();
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        for row in &rows {
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat_n(PAD_ID, seq_len - row.len()));
        }
        Ok(Batch {
            ids,
            size: rows.len(),
            seq_len,
            lengths,
            labels,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Row-major `[size × seq_len]` token ids.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Number of real (non-pad) tokens per row.
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// 1.0 at real positions, 0.0 at padding, row-major.
    pub fn mask(&self) -> Vec<f64> {
        self.lengths
            .iter()
            .flat_map(|&len| (0..self.seq_len).map(move |t| if t < len { 1.0 } else { 0.0 }))
            .collect()
    }

    pub fn labels(&self) -> &[TaskLabels] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [TaskLabels] {
        &mut self.labels
    }

    pub fn task_labels(&self, task: Task) -> Vec<Option<usize>> {
        self.labels.iter().map(|l| l.get(task)).collect()
    }

    /// The same batch with extra padding columns appended.
    pub fn padded_to(&self, seq_len: usize) -> Result<Batch> {
        if seq_len < self.seq_len {
            return Err(DpmnError::contract("cannot pad a batch to a shorter length"));
        }
        let rows = (0..self.size)
            .map(|i| self.row(i)[..self.lengths[i]].to_vec())
            .collect();
        let mut out = Batch::new(rows, self.labels.clone())?;
        let mut ids = Vec::with_capacity(self.size * seq_len);
        for i in 0..self.size {
            ids.extend_from_slice(out.row(i));
            ids.extend(std::iter::repeat_n(PAD_ID, seq_len - out.seq_len));
        }
        out.ids = ids;
        out.seq_len = seq_len;
        Ok(out)
    }
}

/// Tokenises, truncates each text to `max_text_len` ids (the `[CLS]` id is
/// always kept) and groups examples into batches. With a shuffle seed the
/// example order is permuted deterministically first.
pub fn make_batches(
    examples: &[Example],
    vocab: &Vocab,
    batch_size: usize,
    max_text_len: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(DpmnError::contract("cannot batch an empty corpus"));
    }
    if batch_size == 0 {
        return Err(DpmnError::config("batch_size must be at least 1"));
    }
    if max_text_len == 0 {
        return Err(DpmnError::config("no room left for text after the prompt"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let rows = chunk
                .iter()
                .map(|&i| {
                    let mut ids = tokenize(&examples[i].text, vocab);
                    ids.truncate(max_text_len);
                    ids
                })
                .collect();
            let labels = chunk.iter().map(|&i| examples[i].labels()).collect();
            Batch::new(rows, labels)
        })
        .collect()
}
