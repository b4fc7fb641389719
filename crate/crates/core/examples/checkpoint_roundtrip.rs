//! Writes a checkpoint, reads it back, and shows that corruption is caught.

use dpmn::autograd::ParamStore;
use dpmn::checkpoint::Checkpoint;
use dpmn::config::TrainConfig;
use dpmn::data::{parse_tsv, Vocab};
use dpmn::model::Dpmn;
use dpmn::Result;

fn main() -> Result<()> {
    let examples = parse_tsv(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/sample.tsv"))?;
    let vocab = Vocab::build(&examples, 1)?;
    let config = TrainConfig::default();
    let model_config = config.model_for_vocab(vocab.len())?;
    let mut config = config;
    config.model = model_config.clone();
    let model = Dpmn::new(model_config, 0)?;
    let ckpt = Checkpoint {
        config,
        vocab,
        params: model.into_params(),
    };

    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    println!(
        "{} bytes, {} tensors, {} values; re-serialised identically: {}",
        bytes.len(),
        back.params.len(),
        back.params.count_values(|_| true),
        back.to_bytes() == bytes
    );
    let digest = |p: &ParamStore| p.checksum(|n| n.starts_with("encoder."));
    println!("encoder checksum matches: {}", digest(&back.params) == digest(&ckpt.params));

    let mut corrupt = bytes.clone();
    corrupt[bytes.len() / 2] ^= 0x10;
    match Checkpoint::from_bytes(&corrupt) {
        Err(e) => println!("corrupted copy: {e} (exit code {})", e.exit_code()),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
