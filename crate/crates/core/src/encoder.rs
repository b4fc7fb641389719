//! BERT-style post-norm transformer encoder with continuous prompt slots.
//!
//! The prompt occupies the first `p_n` sequence positions. Light prompts
//! are written there once, before the first layer. Deep prompts are also
//! written before every later layer, overwriting whatever the previous
//! layer produced at those positions.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Tensor, Var};
use crate::error::{DpmnError, Result};
use crate::nn::{self, dropout, linear};
use crate::prompt::{PrefixBank, PromptForm, TuningStrategy};

pub const TOKEN_EMBEDDING: &str = "encoder.token_embedding";
pub const POSITION_EMBEDDING: &str = "encoder.position_embedding";
pub const LAYER_NORM_EPS: f64 = 1e-12;
const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            ff: 256,
            vocab_size: 0,
            max_seq_len: 64,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.layers", self.layers),
            ("encoder.hidden", self.hidden),
            ("encoder.heads", self.heads),
            ("encoder.ff", self.ff),
            ("encoder.vocab_size", self.vocab_size),
            ("encoder.max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DpmnError::config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(DpmnError::config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DpmnError::config("encoder.dropout must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Token/position embeddings plus `layers` transformer blocks. Parameter
/// values live in a [`ParamStore`]; this type knows their names and shapes.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    config: EncoderConfig,
}

impl EncoderStack {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(EncoderStack { config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn layer_prefix(i: usize) -> String {
        format!("encoder.layer{i:02}")
    }

    /// BERT-style initialisation: N(0, 0.02) weights, zero biases, unit gains.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let c = &self.config;
        let d = c.hidden;
        store.insert(TOKEN_EMBEDDING, nn::normal(&[c.vocab_size, d], 0.02, rng))?;
        store.insert(POSITION_EMBEDDING, nn::normal(&[c.max_seq_len, d], 0.02, rng))?;
        for i in 0..c.layers {
            let p = Self::layer_prefix(i);
            for proj in ["attn_q", "attn_k", "attn_v", "attn_o"] {
                nn::insert_linear(store, &format!("{p}.{proj}"), nn::normal(&[d, d], 0.02, rng))?;
            }
            nn::insert_linear(store, &format!("{p}.ffn1"), nn::normal(&[d, c.ff], 0.02, rng))?;
            nn::insert_linear(store, &format!("{p}.ffn2"), nn::normal(&[c.ff, d], 0.02, rng))?;
            for ln in ["ln1", "ln2"] {
                store.insert(format!("{p}.{ln}.gain"), Tensor::filled(&[d], 1.0))?;
                store.insert(format!("{p}.{ln}.bias"), Tensor::zeros(&[d]))?;
            }
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![TOKEN_EMBEDDING.to_string(), POSITION_EMBEDDING.to_string()];
        for i in 0..self.config.layers {
            let p = Self::layer_prefix(i);
            for part in ["attn_q", "attn_k", "attn_v", "attn_o", "ffn1", "ffn2"] {
                names.push(format!("{p}.{part}.w"));
                names.push(format!("{p}.{part}.b"));
            }
            for ln in ["ln1", "ln2"] {
                names.push(format!("{p}.{ln}.gain"));
                names.push(format!("{p}.{ln}.bias"));
            }
        }
        names.sort();
        names
    }

    /// Token plus position embeddings for `ids[batch×text_len]`. Text
    /// positions start at `prompt_len` so prompt slots own the first ones.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        batch: usize,
        prompt_len: usize,
    ) -> Result<Var> {
        if batch == 0 || !ids.len().is_multiple_of(batch) || ids.is_empty() {
            return Err(DpmnError::contract(format!(
                "{} ids do not form {batch} rows",
                ids.len()
            )));
        }
        let text_len = ids.len() / batch;
        if prompt_len + text_len > self.config.max_seq_len {
            return Err(DpmnError::contract(format!(
                "sequence of {text_len} tokens plus {prompt_len} prompt slots exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let d = self.config.hidden;
        let table = tape.param(store, TOKEN_EMBEDDING)?;
        let tokens = tape.embedding(table, ids)?;
        let tokens = tape.reshape(tokens, &[batch, text_len, d])?;
        let positions: Vec<usize> = (prompt_len..prompt_len + text_len).collect();
        let pos_table = tape.param(store, POSITION_EMBEDDING)?;
        let pos = tape.embedding(pos_table, &positions)?;
        tape.add(tokens, pos)
    }

    /// Runs the layer stack over `[prefix ; input_emb]`.
    ///
    /// `prefix` holds the loaded prompt matrices: one per layer for the deep
    /// form, one (or none when `p_n = 0`) for the light form. `text_mask` is
    /// `[batch×T]` with 1.0 at real tokens; prompt slots are never masked.
    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input_emb: Var,
        prefix: &[Var],
        form: PromptForm,
        text_mask: &[f64],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        let shape = tape.shape(input_emb).to_vec();
        if shape.len() != 3 || shape[2] != c.hidden {
            return Err(DpmnError::Shape {
                op: "encode",
                lhs: shape,
                rhs: vec![c.hidden],
            });
        }
        let (batch, text_len, d) = (shape[0], shape[1], shape[2]);
        if text_mask.len() != batch * text_len {
            return Err(DpmnError::contract("attention mask does not match the input"));
        }
        let expected = match form {
            PromptForm::Deep => c.layers,
            PromptForm::Light => prefix.len().min(1),
        };
        if prefix.len() != expected || (form == PromptForm::Deep && prefix.is_empty()) {
            return Err(DpmnError::config(format!(
                "{form} prompt needs {} prefix matrices, bank has {}",
                if form == PromptForm::Deep { c.layers } else { 1 },
                prefix.len()
            )));
        }
        let prompt_len = prefix.first().map_or(0, |&p| tape.shape(p)[0]);
        for &p in prefix {
            if tape.shape(p) != [prompt_len, d] {
                return Err(DpmnError::Shape {
                    op: "prefix",
                    lhs: tape.shape(p).to_vec(),
                    rhs: vec![prompt_len, d],
                });
            }
        }
        let seq = prompt_len + text_len;
        if seq > c.max_seq_len {
            return Err(DpmnError::contract("prompt plus text exceeds max_seq_len"));
        }

        let key_bias = self.attention_bias(batch, prompt_len, text_len, text_mask);
        let key_bias = tape.constant(key_bias)?;

        let mut h = dropout(tape, input_emb, c.dropout, dropout_rng.as_deref_mut())?;
        for layer in 0..c.layers {
            let slot = match form {
                PromptForm::Deep => prefix.get(layer).copied(),
                PromptForm::Light if layer == 0 => prefix.first().copied(),
                PromptForm::Light => None,
            };
            if let Some(p) = slot {
                let broadcast = tape.expand(p, batch)?;
                let text = if layer == 0 {
                    h
                } else {
                    tape.slice(h, 1, prompt_len, text_len)?
                };
                h = tape.concat(&[broadcast, text], 1)?;
            }
            h = self.layer(tape, store, layer, h, key_bias, batch, seq, dropout_rng.as_deref_mut())?;
        }
        Ok(h)
    }

    // Additive bias [batch*heads, seq, seq]: 0 for visible keys, -1e9 for padding.
    fn attention_bias(&self, batch: usize, prompt_len: usize, text_len: usize, mask: &[f64]) -> Tensor {
        let heads = self.config.heads;
        let seq = prompt_len + text_len;
        let mut data = Vec::with_capacity(batch * heads * seq * seq);
        for b in 0..batch {
            let row: Vec<f64> = (0..seq)
                .map(|j| {
                    if j < prompt_len || mask[b * text_len + j - prompt_len] > 0.0 {
                        0.0
                    } else {
                        MASKED_SCORE
                    }
                })
                .collect();
            for _ in 0..heads * seq {
                data.extend_from_slice(&row);
            }
        }
        Tensor::new(vec![batch * heads, seq, seq], data).expect("sized above")
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        index: usize,
        h: Var,
        key_bias: Var,
        batch: usize,
        seq: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        let (d, heads) = (c.hidden, c.heads);
        let dh = d / heads;
        let p = Self::layer_prefix(index);
        let x = tape.reshape(h, &[batch * seq, d])?;

        let split_heads = |tape: &mut Tape, name: &str| -> Result<Var> {
            let y = linear(tape, store, x, &format!("{p}.{name}"))?;
            let y = tape.reshape(y, &[batch, seq, heads, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[batch * heads, seq, dh])
        };
        let q = split_heads(tape, "attn_q")?;
        let k = split_heads(tape, "attn_k")?;
        let v = split_heads(tape, "attn_v")?;
        let kt = tape.permute(k, &[0, 2, 1])?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = tape.add(scores, key_bias)?;
        let attn = tape.softmax(scores, 2)?;
        let ctx = tape.bmm(attn, v)?;
        let ctx = tape.reshape(ctx, &[batch, heads, seq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch * seq, d])?;
        let out = linear(tape, store, ctx, &format!("{p}.attn_o"))?;
        let out = dropout(tape, out, c.dropout, rng.as_deref_mut())?;

        let res = tape.add(x, out)?;
        let g1 = tape.param(store, &format!("{p}.ln1.gain"))?;
        let b1 = tape.param(store, &format!("{p}.ln1.bias"))?;
        let h1 = tape.layer_norm(res, g1, b1, LAYER_NORM_EPS)?;

        let f = linear(tape, store, h1, &format!("{p}.ffn1"))?;
        let f = tape.gelu(f)?;
        let f = linear(tape, store, f, &format!("{p}.ffn2"))?;
        let f = dropout(tape, f, c.dropout, rng)?;
        let res = tape.add(h1, f)?;
        let g2 = tape.param(store, &format!("{p}.ln2.gain"))?;
        let b2 = tape.param(store, &format!("{p}.ln2.bias"))?;
        let h2 = tape.layer_norm(res, g2, b2, LAYER_NORM_EPS)?;
        tape.reshape(h2, &[batch, seq, d])
    }
}

/// Parameters the optimizer may update for a tuning strategy: the prompt
/// always, the encoder only under `lm-plus-prompt`. Task heads are added by
/// the caller.
pub fn trainable_parameters(stack: &EncoderStack, bank: &PrefixBank, strategy: TuningStrategy) -> Vec<String> {
    let mut names = bank.param_names();
    if strategy == TuningStrategy::LmPlusPrompt {
        names.extend(stack.param_names());
    }
    names.sort();
    names
}
