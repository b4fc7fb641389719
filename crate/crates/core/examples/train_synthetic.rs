//! Trains a small DPMN on a generated corpus whose labels are decided by
//! cue words, then reloads the best checkpoint and evaluates it.

use dpmn::checkpoint::Checkpoint;
use dpmn::config::TrainConfig;
use dpmn::data::{SyntheticCorpus, Task};
use dpmn::encoder::EncoderConfig;
use dpmn::trainer::{evaluate, Trainer};
use dpmn::Result;

fn main() -> Result<()> {
    let train_set = SyntheticCorpus {
        size: 64,
        seed: 7,
        ..SyntheticCorpus::default()
    }
    .generate();
    let dev_set = SyntheticCorpus {
        size: 32,
        seed: 8,
        ..SyntheticCorpus::default()
    }
    .generate();
    println!("e.g. {:?} -> {:?}", train_set[0].text, train_set[0].labels());

    let mut config = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        max_epochs: 40,
        early_stop_patience: 10,
        seed: 7,
        ..TrainConfig::default()
    }
    .with_encoder(EncoderConfig {
        layers: 2,
        hidden: 32,
        heads: 4,
        ff: 64,
        max_seq_len: 32,
        ..EncoderConfig::default()
    });
    config.min_freq = 1;

    let outcome = Trainer::new(config)
        .on_epoch(|r| {
            println!(
                "epoch {:>2}  loss {:.4}  dev F1 {:.3} {:.3} {:.3}  {:.0} ms",
                r.epoch, r.train_total, r.dev_f1[0], r.dev_f1[1], r.dev_f1[2], r.wall_ms
            )
        })
        .run(&train_set, &dev_set)?;
    let best = outcome.log.best_epoch().expect("trained at least one epoch");
    println!("best epoch {} with task-A dev F1 {:.4}", best.epoch, best.dev_f1[0]);

    let dir = std::env::temp_dir().join("dpmn-train-synthetic");
    std::fs::create_dir_all(&dir).map_err(|e| dpmn::DpmnError::Io { path: dir.clone(), source: e })?;
    let path = dir.join("model.dpmn");
    outcome.checkpoint.save(&path)?;
    let report = evaluate(&Checkpoint::load(&path)?, &dev_set)?;
    for task in Task::ALL {
        println!("reloaded, task {task}: macro F1 {:.4}", report.f1[task.index()]);
    }
    println!("checkpoint at {}", path.display());
    Ok(())
}
