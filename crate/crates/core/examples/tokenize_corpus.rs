//! Parses a TSV corpus, builds a vocabulary and batches it. Pass a path to
//! use your own file; the bundled 12-row sample is used otherwise.

use dpmn::data::{make_batches, parse_tsv, split_tokens, tokenize, Task, Vocab};
use dpmn::Result;

fn main() -> Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/sample.tsv").to_string());
    let examples = parse_tsv(&path)?;
    println!("{} examples from {path}", examples.len());
    for task in Task::ALL {
        let mut counts = vec![0usize; task.num_classes()];
        for ex in &examples {
            if let Some(c) = ex.labels().get(task) {
                counts[c] += 1;
            }
        }
        let parts: Vec<String> = task.class_names().iter().zip(&counts).map(|(n, c)| format!("{n}={c}")).collect();
        println!("  task {task}: {}", parts.join(" "));
    }

    let vocab = Vocab::build(&examples, 1)?;
    println!("vocabulary: {} ids including PAD, UNK and CLS", vocab.len());
    let text = &examples[1].text;
    println!("{text:?}");
    println!("  tokens {:?}", split_tokens(text));
    println!("  ids    {:?}", tokenize(text, &vocab));
    println!("  unseen {:?}", tokenize("completely unseen words", &vocab));

    let batches = make_batches(&examples, &vocab, 5, 16, Some(0))?;
    for (i, b) in batches.iter().enumerate() {
        println!("batch {i}: {} rows padded to {}, lengths {:?}", b.size(), b.seq_len(), b.lengths());
    }
    Ok(())
}
