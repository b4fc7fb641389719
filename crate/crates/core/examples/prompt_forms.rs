//! Compares the deep and light prompt forms: how many prompt matrices each
//! needs, how many values are trained under each tuning strategy, and how
//! the encoder output differs.

use dpmn::autograd::Tape;
use dpmn::data::{Batch, TaskLabels};
use dpmn::encoder::trainable_parameters;
use dpmn::model::{Dpmn, ModelConfig};
use dpmn::prompt::{PromptConfig, PromptForm, PromptInit, TuningStrategy};
use dpmn::Result;

fn main() -> Result<()> {
    let mut base = ModelConfig::with_vocab(50);
    base.encoder.layers = 4;
    base.encoder.hidden = 32;
    base.encoder.ff = 64;
    let batch = Batch::new(vec![vec![2, 10, 11, 12], vec![2, 13, 14]], vec![TaskLabels::default(); 2])?;

    let mut outputs = Vec::new();
    for form in [PromptForm::Deep, PromptForm::Light] {
        for tuning in [TuningStrategy::FixedLm, TuningStrategy::LmPlusPrompt] {
            let mut config = base.clone();
            config.prompt = PromptConfig {
                length: 4,
                form,
                init: PromptInit::Random,
                tuning,
            };
            let model = Dpmn::new(config, 3)?;
            let bank = model.prefix_bank()?;
            let trainable = trainable_parameters(model.encoder(), &bank, tuning);
            let trainable_values: usize =
                trainable.iter().map(|n| model.params().require(n).map(|t| t.numel())).sum::<Result<_>>()?;
            println!(
                "{form:>5} / {tuning:<14}  prompt matrices {}  prompt values {:>4}  trainable encoder+prompt values {trainable_values}",
                bank.len(),
                bank.num_values(),
            );
            if tuning == TuningStrategy::LmPlusPrompt {
                let mut tape = Tape::new();
                let pass = model.forward(&mut tape, &batch, None)?;
                outputs.push(tape.value(pass.shared).to_vec());
            }
        }
    }
    // Same seed, same encoder weights: only the prompt wiring differs.
    let gap = outputs[0]
        .iter()
        .zip(&outputs[1])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max |deep - light| over the encoder output: {gap:.4}");
    Ok(())
}
