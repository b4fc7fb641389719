//! Small building blocks shared by the encoder and task heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub(crate) fn normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// `x[n×in] · {prefix}.w[in×out] + {prefix}.b[out]`.
pub(crate) fn linear(tape: &mut Tape, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Registers `{prefix}.w` and a zero `{prefix}.b`.
pub(crate) fn insert_linear(store: &mut ParamStore, prefix: &str, w: Tensor) -> Result<()> {
    let out = w.shape()[1];
    store.insert(format!("{prefix}.w"), w)?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[out]))
}

/// Inverted dropout; identity when `rng` is `None` or `rate` is zero.
pub(crate) fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let mask = Tensor::from_fn(tape.shape(x), |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = tape.constant(mask)?;
    tape.mul(x, m)
}
