//! Runs one task head over a padded batch and shows that padding does not
//! change the logits of the shorter sequence.

use dpmn::autograd::{ParamStore, Tape, Tensor};
use dpmn::data::Task;
use dpmn::heads::{HeadConfig, HeadKind, TaskHead};
use dpmn::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let d = 8;
    let head = TaskHead::new(Task::C, d, HeadConfig::for_hidden(HeadKind::BiLstmFfn, d))?;
    let mut store = ParamStore::new();
    head.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("task C head parameters:");
    for name in head.param_names() {
        println!("  {name:<24} {:?}", store.require(&name)?.shape());
    }

    let states = |seq: usize, pad: f64| {
        Tensor::from_fn(&[2, seq, d], |i| {
            let (row, t, k) = (i / (seq * d), (i / d) % seq, i % d);
            if row == 1 && t >= 3 {
                pad
            } else {
                (((row * 5 + t) * d + k) * 37 % 11) as f64 / 5.0 - 1.0
            }
        })
    };
    let mut logits = Vec::new();
    for (seq, pad) in [(5, 0.0), (5, 123.0), (7, -9.0)] {
        let mut tape = Tape::new();
        let shared = tape.constant(states(seq, pad))?;
        let out = head.forward(&mut tape, &store, shared, &[5, 3])?;
        let v = tape.value(out);
        println!("padded to {seq} with {pad:>6}: row 1 logits {:?}", &v[3..6]);
        logits.push(v[3..6].to_vec());
    }
    assert!(logits.windows(2).all(|w| w[0] == w[1]));
    println!("row 1 logits are bitwise identical whatever the padding");
    Ok(())
}
