//! Builds a tiny two-layer network on the tape, checks one gradient
//! against a central difference and takes a few Adam steps.

use dpmn::autograd::{Optimizer, ParamStore, Tape, Tensor};
use dpmn::Result;

fn loss_of(store: &ParamStore, x: &Tensor, target: &[f64]) -> Result<(Tape, dpmn::autograd::Var)> {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone())?;
    let w1 = tape.param(store, "w1")?;
    let w2 = tape.param(store, "w2")?;
    let h = tape.matmul(x, w1)?;
    let h = tape.tanh(h)?;
    let y = tape.matmul(h, w2)?;
    let t = tape.constant(Tensor::new(vec![target.len(), 1], target.to_vec())?)?;
    let neg_t = tape.scale(t, -1.0)?;
    let diff = tape.add(y, neg_t)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.sum(sq)?;
    Ok((tape, loss))
}

fn main() -> Result<()> {
    let mut store = ParamStore::new();
    store.insert("w1", Tensor::from_fn(&[2, 3], |i| 0.1 * (i as f64 + 1.0)))?;
    store.insert("w2", Tensor::from_fn(&[3, 1], |i| 0.2 - 0.1 * i as f64))?;
    let x = Tensor::new(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0])?;
    let target = [0.0, 1.0, 1.0, 0.0];

    let (mut tape, loss) = loss_of(&store, &x, &target)?;
    tape.backward(loss)?;
    tape.accumulate_param_grads(&mut store)?;
    let analytic = store.require("w1")?.grad().expect("w1 received a gradient")[0];

    let h = 1e-5;
    let mut numeric = 0.0;
    for sign in [1.0, -1.0] {
        let mut shifted = store.clone();
        shifted.get_mut("w1").unwrap().data_mut()[0] += sign * h;
        let (tape, loss) = loss_of(&shifted, &x, &target)?;
        numeric += sign * tape.value(loss)[0] / (2.0 * h);
    }
    println!("dL/dw1[0]: analytic {analytic:.9}, central difference {numeric:.9}");

    let trainable = vec!["w1".to_string(), "w2".to_string()];
    let mut opt = Optimizer::adam(0.05);
    for step in 0..=200 {
        store.zero_grad();
        let (mut tape, loss) = loss_of(&store, &x, &target)?;
        if step % 50 == 0 {
            println!("step {step:>3}  loss {:.6}", tape.value(loss)[0]);
        }
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut store)?;
        opt.step(&mut store, &trainable)?;
    }
    Ok(())
}
