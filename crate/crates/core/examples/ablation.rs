//! Trains the six architecture variants on one synthetic corpus and prints
//! the comparison table.

use dpmn::ablation::{ablate, ablation_markdown, TABLE_VARIANTS};
use dpmn::config::TrainConfig;
use dpmn::data::SyntheticCorpus;
use dpmn::encoder::EncoderConfig;
use dpmn::Result;

fn main() -> Result<()> {
    let corpus = |size, seed| {
        SyntheticCorpus {
            size,
            seed,
            ..SyntheticCorpus::default()
        }
        .generate()
    };
    let (train_set, dev_set) = (corpus(48, 1), corpus(24, 2));
    let mut base = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        max_epochs: 8,
        early_stop_patience: 3,
        ..TrainConfig::default()
    }
    .with_encoder(EncoderConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        ff: 32,
        max_seq_len: 24,
        ..EncoderConfig::default()
    });
    base.min_freq = 1;

    for v in &TABLE_VARIANTS {
        println!("{:<10} {}", v.name, v.structure());
    }
    let rows = ablate(&base, &TABLE_VARIANTS, &train_set, &dev_set, true)?;
    println!();
    print!("{}", ablation_markdown(&rows));
    Ok(())
}
