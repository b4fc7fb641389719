//! Weighted three-task loss on a batch where some rows have no label for
//! the auxiliary tasks.

use dpmn::autograd::Tape;
use dpmn::data::{Batch, Task, TaskLabels};
use dpmn::loss::LossWeights;
use dpmn::model::{Dpmn, ModelConfig};
use dpmn::Result;

fn main() -> Result<()> {
    let mut config = ModelConfig::with_vocab(40);
    config.encoder.layers = 2;
    config.encoder.hidden = 16;
    config.encoder.heads = 2;
    config.encoder.ff = 32;
    let model = Dpmn::new(config, 5)?;

    // NOT; OFF/UNT; OFF/TIN/GRP.
    let labels = vec![
        TaskLabels::new(Some(0), None, None)?,
        TaskLabels::new(Some(1), Some(1), None)?,
        TaskLabels::new(Some(1), Some(0), Some(1))?,
    ];
    let batch = Batch::new(vec![vec![2, 5, 6], vec![2, 7, 8, 9], vec![2, 10]], labels)?;

    for weights in [LossWeights::default(), LossWeights::new(0.5, 0.5, 0.0)?, LossWeights::single_task()] {
        let mut tape = Tape::new();
        let pass = model.loss(&mut tape, &batch, &weights, None)?;
        let l = pass.task_losses.map(|v| tape.value(v)[0]);
        println!(
            "weights {:?}: L_a {:.4}  L_b {:.4}  L_c {:.4}  total {:.4}  (recombined {:.4})",
            weights.as_array(),
            l[0],
            l[1],
            l[2],
            tape.value(pass.total)[0],
            weights.combine(l),
        );
    }
    for task in Task::ALL {
        let present = batch.task_labels(task).iter().flatten().count();
        println!("task {task}: {present} of {} rows labelled", batch.size());
    }
    match LossWeights::new(0.5, 0.3, 0.3) {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
