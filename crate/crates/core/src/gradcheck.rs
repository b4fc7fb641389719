//! Analytic gradients against central finite differences.
//!
//! Op-level checks evaluate every input coordinate of each differentiable
//! op on random inputs. The model-level check samples coordinates across
//! every parameter tensor of a small network and groups the results by
//! module.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Tensor, Var};
use crate::data::{Batch, TaskLabels};
use crate::encoder::EncoderConfig;
use crate::error::{DpmnError, Result};
use crate::heads::{HeadConfig, HeadKind};
use crate::loss::LossWeights;
use crate::model::{Dpmn, ModelConfig};
use crate::prompt::{PromptConfig, PromptForm, PromptInit, TuningStrategy};

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Denominator floor so that tiny gradients are compared absolutely.
pub const ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// One compared coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GroupResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub ops: Vec<GroupResult>,
    pub model: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().chain(&self.model).all(GroupResult::passed)
    }

    pub fn max_op_error(&self) -> f64 {
        self.ops.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_model_error(&self) -> f64 {
        self.model.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn model_probes(&self) -> usize {
        self.model.iter().map(|g| g.probes).sum()
    }

    /// `Ok(self)` if every group passed, otherwise a gradient-check error
    /// naming the worst group.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let worst = self
            .ops
            .iter()
            .chain(&self.model)
            .filter(|g| !g.passed())
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("a group failed");
        Err(DpmnError::GradCheck(format!(
            "{} has relative error {:.3e} (tolerance {:.0e})",
            worst.group, worst.max_rel_error, worst.tolerance
        )))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>7} {:>12} {:>6}", "group", "probes", "max rel err", "status")?;
        for g in self.ops.iter().chain(&self.model) {
            writeln!(
                f,
                "{:<28} {:>7} {:>12.3e} {:>6}",
                g.group,
                g.probes,
                g.max_rel_error,
                if g.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Analytic gradients of `loss` for every parameter in `store`.
pub fn analytic_gradients(
    store: &ParamStore,
    loss: &impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<ParamStore> {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    tape.backward(l)?;
    let mut grads = store.clone();
    grads.zero_grad();
    tape.accumulate_param_grads(&mut grads)?;
    Ok(grads)
}

/// Central difference of `loss` along one coordinate.
pub fn numeric_gradient(
    store: &ParamStore,
    name: &str,
    index: usize,
    loss: &impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<f64> {
    let mut shifted = store.clone();
    let mut eval = |delta: f64| -> Result<f64> {
        let original = store.require(name)?.data()[index];
        shifted.get_mut(name).expect("cloned store").data_mut()[index] = original + delta;
        let mut tape = Tape::new();
        let l = loss(&mut tape, &shifted)?;
        Ok(tape.value(l)[0])
    };
    let plus = eval(STEP)?;
    let minus = eval(-STEP)?;
    Ok((plus - minus) / (2.0 * STEP))
}

/// Compares every coordinate of the named parameters.
pub fn check_all_coordinates(
    store: &ParamStore,
    names: &[String],
    loss: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<Vec<Probe>> {
    let grads = analytic_gradients(store, &loss)?;
    let mut probes = Vec::new();
    for name in names {
        let t = grads.require(name)?;
        for index in 0..t.numel() {
            probes.push(Probe {
                name: name.clone(),
                index,
                analytic: t.grad().map_or(0.0, |g| g[index]),
                numeric: numeric_gradient(store, name, index, &loss)?,
            });
        }
    }
    Ok(probes)
}

/// Compares `count` sampled coordinates. The first probes visit each named
/// tensor once; afterwards tensors are drawn at random. Every other probe
/// is placed on a coordinate with a nonzero analytic gradient when the
/// tensor has one, so sparse tensors such as embedding tables are not only
/// checked where both sides are zero.
pub fn sample_coordinates(
    store: &ParamStore,
    names: &[String],
    count: usize,
    seed: u64,
    loss: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<Vec<Probe>> {
    if names.is_empty() {
        return Err(DpmnError::contract("no parameters to probe"));
    }
    let grads = analytic_gradients(store, &loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(count);
    for i in 0..count {
        let name = if i < names.len() {
            &names[i]
        } else {
            names.choose(&mut rng).expect("non-empty")
        };
        let t = grads.require(name)?;
        let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let nonzero: Vec<usize> = (0..g.len()).filter(|&k| g[k] != 0.0).collect();
        let index = if i % 2 == 1 && !nonzero.is_empty() {
            *nonzero.choose(&mut rng).expect("non-empty")
        } else {
            rng.random_range(0..t.numel())
        };
        probes.push(Probe {
            name: name.clone(),
            index,
            analytic: g[index],
            numeric: numeric_gradient(store, name, index, &loss)?,
        });
    }
    Ok(probes)
}

/// Max relative error per group, groups in name order.
pub fn summarize(probes: &[Probe], group_of: impl Fn(&str) -> String, tolerance: f64) -> Vec<GroupResult> {
    let mut groups: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for p in probes {
        let entry = groups.entry(group_of(&p.name)).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 = entry.1.max(p.relative_error());
    }
    groups
        .into_iter()
        .map(|(group, (probes, max_rel_error))| GroupResult {
            group,
            probes,
            max_rel_error,
            tolerance,
        })
        .collect()
}

/// `encoder.layer00`, `head_a.lstm_fwd`, `prompt.prefix01`, ...
pub fn module_group(name: &str) -> String {
    name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], |t, v| t.bmm(v[0], v[1])),
        ("add", vec![vec![2, 3], vec![2, 3]], |t, v| t.add(v[0], v[1])),
        ("add_broadcast", vec![vec![2, 3], vec![3]], |t, v| t.add(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |t, v| t.mul(v[0], v[1])),
        ("mul_broadcast", vec![vec![2, 3], vec![3]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![2, 3]], |t, v| t.scale(v[0], -1.7)),
        ("relu", vec![vec![2, 5]], |t, v| t.relu(v[0])),
        ("sigmoid", vec![vec![2, 5]], |t, v| t.sigmoid(v[0])),
        ("tanh", vec![vec![2, 5]], |t, v| t.tanh(v[0])),
        ("gelu", vec![vec![2, 5]], |t, v| t.gelu(v[0])),
        ("softmax", vec![vec![5]], |t, v| t.softmax(v[0], 0)),
        ("softmax_inner_axis", vec![vec![2, 3, 4]], |t, v| t.softmax(v[0], 1)),
        ("log_softmax", vec![vec![3, 4]], |t, v| t.log_softmax(v[0], 1)),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-12)
        }),
        ("concat", vec![vec![2, 3], vec![2, 5]], |t, v| t.concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![3, 4]], |t, v| t.slice(v[0], 1, 1, 2)),
        ("reshape_permute", vec![vec![2, 3, 4]], |t, v| {
            let r = t.reshape(v[0], &[6, 4])?;
            let r = t.reshape(r, &[2, 3, 4])?;
            t.permute(r, &[2, 0, 1])
        }),
        ("embedding", vec![vec![5, 3]], |t, v| t.embedding(v[0], &[0, 3, 3, 1])),
        ("expand", vec![vec![2, 3]], |t, v| t.expand(v[0], 4)),
        ("sum", vec![vec![2, 3]], |t, v| t.sum(v[0])),
    ]
}

/// Every coordinate of every op input, weighted by a fixed random cotangent.
pub fn check_ops(seed: u64) -> Result<Vec<GroupResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    for (op, shapes, f) in op_cases() {
        let mut store = ParamStore::new();
        let names: Vec<String> = (0..shapes.len()).map(|i| format!("{op}.in{i}")).collect();
        for (name, shape) in names.iter().zip(&shapes) {
            store.insert(name.clone(), Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)))?;
        }
        let cot_seed = rng.random::<u64>();
        let loss = |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
            let inputs = names.iter().map(|n| tape.param(store, n)).collect::<Result<Vec<_>>>()?;
            let y = f(tape, &inputs)?;
            let mut crng = ChaCha8Rng::seed_from_u64(cot_seed);
            let w = Tensor::from_fn(tape.shape(y), |_| crng.random_range(-1.0..1.0));
            let w = tape.constant(w)?;
            let y = tape.mul(y, w)?;
            tape.sum(y)
        };
        let probes = check_all_coordinates(&store, &names, loss)?;
        let mut summary = summarize(&probes, |_| format!("op.{op}"), OP_TOLERANCE);
        results.append(&mut summary);
    }
    Ok(results)
}

/// Two layers, `d = 16`, two prompt slots, deep form, dropout off.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            ff: 32,
            vocab_size: 16,
            max_seq_len: 12,
            dropout: 0.0,
        },
        prompt: PromptConfig {
            length: 2,
            form: PromptForm::Deep,
            init: PromptInit::Random,
            tuning: TuningStrategy::LmPlusPrompt,
        },
        head: HeadConfig::for_hidden(HeadKind::BiLstmFfn, 16),
    }
}

/// Two rows of unequal length so padding and masking are exercised; the
/// first carries all three labels, the second only A and B.
pub fn probe_batch(vocab_size: usize) -> Result<Batch> {
    let id = |k: usize| 3 + k % (vocab_size.max(4) - 3);
    Batch::new(
        vec![vec![2, id(0), id(4), id(7), id(2)], vec![2, id(9), id(1)]],
        vec![TaskLabels::new(Some(1), Some(0), Some(1))?, TaskLabels::new(Some(1), Some(1), None)?],
    )
}

/// Samples `probes` coordinates across every parameter of `config`'s model
/// (with its dropout forced off) on the total multi-task loss.
pub fn check_model(config: &ModelConfig, probes: usize, seed: u64) -> Result<Vec<GroupResult>> {
    let mut config = config.clone();
    config.encoder.dropout = 0.0;
    let model = Dpmn::new(config.clone(), seed)?;
    let batch = probe_batch(config.encoder.vocab_size)?;
    let weights = LossWeights::default();
    let names: Vec<String> = model.params().names().map(String::from).collect();
    let loss = |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
        let mut m = model.clone();
        *m.params_mut() = store.clone();
        Ok(m.loss(tape, &batch, &weights, None)?.total)
    };
    let probes = sample_coordinates(model.params(), &names, probes, seed ^ 0x5eed, loss)?;
    Ok(summarize(&probes, module_group, MODEL_TOLERANCE))
}

/// Op checks plus the model check on [`tiny_config`].
pub fn run(probes: usize, seed: u64) -> Result<GradCheckReport> {
    Ok(GradCheckReport {
        ops: check_ops(seed)?,
        model: check_model(&tiny_config(), probes, seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-6, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn grouping() {
        assert_eq!(module_group("encoder.layer01.attn_q.w"), "encoder.layer01");
        assert_eq!(module_group("encoder.token_embedding"), "encoder.token_embedding");
        assert_eq!(module_group("head_c.ffn2.b"), "head_c.ffn2");
    }

    #[test]
    fn every_op_passes() {
        for g in check_ops(1).unwrap() {
            assert!(g.passed(), "{g:?}");
        }
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // relu's derivative is discontinuous at 0; probing exactly there
        // gives a central difference of 0.5 against an analytic 0 or 1.
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros(&[1])).unwrap();
        let probes = check_all_coordinates(&store, &["x".to_string()], |tape, store| {
            let x = tape.param(store, "x")?;
            let y = tape.relu(x)?;
            tape.sum(y)
        })
        .unwrap();
        assert!(probes[0].relative_error() > 0.1);
    }

    #[test]
    fn small_model_probe_run() {
        let mut cfg = tiny_config();
        cfg.encoder.hidden = 8;
        cfg.encoder.ff = 8;
        cfg.head = HeadConfig::for_hidden(HeadKind::BiLstmFfn, 8);
        let groups = check_model(&cfg, 80, 3).unwrap();
        assert!(groups.iter().any(|g| g.group == "prompt.prefix01"));
        for g in groups {
            assert!(g.passed(), "{g:?}");
        }
    }
}
