//! Minimal decoder-only transformer language model.
//!
//! Pre-layernorm blocks with causal multi-head attention and a GELU MLP,
//! learned positional embeddings, and by default an output head tied to the
//! token embedding. Dropout sites:
//!
//! * `embedding_output`: after token + position embedding,
//! * `attention_output`: after each attention block's output projection,
//!   before the residual add (or after it, with
//!   `attention_dropout_after_residual`),
//! * `mlp_output`: after each MLP block's output projection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::dropout::{apply_dropout, DropoutLayerState, DropoutMode, MaskKey};
use crate::error::{Error, Result};
use crate::rng::{domain, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutSite {
    EmbeddingOutput,
    AttentionOutput,
    MlpOutput,
}

fn default_sites() -> BTreeSet<DropoutSite> {
    [DropoutSite::EmbeddingOutput, DropoutSite::AttentionOutput]
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_sites: BTreeSet<DropoutSite>,
    pub tied_head: bool,
    pub attention_dropout_after_residual: bool,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    /// Desk-scale default: 4 layers, d_model 128, 4 heads, context 256.
    fn default() -> Self {
        Self {
            vocab_size: crate::data::VOCAB_SIZE,
            context_len: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            dropout_sites: default_sites(),
            tied_head: true,
            attention_dropout_after_residual: false,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("model.{field}: {why}")));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return bad(name, "must be positive".into());
            }
        }
        if self.d_model % self.n_heads != 0 {
            return bad(
                "n_heads",
                format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            );
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std", format!("{} is not a positive number", self.init_std));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps", "must be positive".into());
        }
        Ok(())
    }

    /// Parameters in one transformer block.
    pub fn per_layer_params(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        2 * d                 // ln1
            + 4 * (d * d + d) // q, k, v, o
            + 2 * d           // ln2
            + d * f + f       // mlp in
            + f * d + d // mlp out
    }
}

/// Exact parameter count for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    let (v, c, d) = (config.vocab_size, config.context_len, config.d_model);
    let head = if config.tied_head { 0 } else { d * v };
    v * d + c * d + config.n_layers * config.per_layer_params() + 2 * d + head
}

const PER_LAYER: usize = 16;

/// Named parameter tensors in a fixed canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Indices of one block's parameters in [`ModelParams`] order.
struct Block {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Block {
    fn at(layer: usize) -> Self {
        let b = 2 + layer * PER_LAYER;
        Self {
            ln1_g: b,
            ln1_b: b + 1,
            wq: b + 2,
            bq: b + 3,
            wk: b + 4,
            bk: b + 5,
            wv: b + 6,
            bv: b + 7,
            wo: b + 8,
            bo: b + 9,
            ln2_g: b + 10,
            ln2_b: b + 11,
            w1: b + 12,
            b1: b + 13,
            w2: b + 14,
            b2: b + 15,
        }
    }
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, c, d, f) = (
        config.vocab_size,
        config.context_len,
        config.d_model,
        config.d_ff,
    );
    let std = config.init_std;
    // Residual output projections are scaled down with depth.
    let proj_std = std / (2.0 * config.n_layers.max(1) as f64).sqrt();
    let mut out = vec![
        ("embed.wte".to_string(), vec![v, d], Init::Normal(std)),
        ("embed.wpe".to_string(), vec![c, d], Init::Normal(std)),
    ];
    for l in 0..config.n_layers {
        let p = |s: &str| format!("h{l}.{s}");
        out.extend([
            (p("ln1.g"), vec![d], Init::Ones),
            (p("ln1.b"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], Init::Normal(std)),
            (p("attn.bq"), vec![d], Init::Zeros),
            (p("attn.wk"), vec![d, d], Init::Normal(std)),
            (p("attn.bk"), vec![d], Init::Zeros),
            (p("attn.wv"), vec![d, d], Init::Normal(std)),
            (p("attn.bv"), vec![d], Init::Zeros),
            (p("attn.wo"), vec![d, d], Init::Normal(proj_std)),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln2.g"), vec![d], Init::Ones),
            (p("ln2.b"), vec![d], Init::Zeros),
            (p("mlp.w1"), vec![d, f], Init::Normal(std)),
            (p("mlp.b1"), vec![f], Init::Zeros),
            (p("mlp.w2"), vec![f, d], Init::Normal(proj_std)),
            (p("mlp.b2"), vec![d], Init::Zeros),
        ]);
    }
    out.push(("final.ln.g".to_string(), vec![d], Init::Ones));
    out.push(("final.ln.b".to_string(), vec![d], Init::Zeros));
    if !config.tied_head {
        out.push(("final.head".to_string(), vec![d, v], Init::Normal(std)));
    }
    out
}

impl ModelParams {
    /// Random initialization; each tensor draws from its own stream keyed
    /// by `(seed, tensor index)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (i, (name, shape, init)) in layout(config).into_iter().enumerate() {
            let t = match init {
                Init::Normal(std) => {
                    Tensor::randn(&shape, std, &mut Rng::keyed(seed, &[domain::INIT, i as u64]))
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = layout(config);
        if expected.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((en, es, _), (n, t)) in expected.into_iter().zip(named) {
            if en != n || es != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {n} {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
            names.push(n);
            tensors.push(t);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Training-mode controls for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub training: bool,
    pub p: f64,
    pub step: u64,
    /// Mask seed; masks are keyed `(seed, site, step, sample)`.
    pub seed: u64,
    pub mode: DropoutMode,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            training: false,
            p: 0.0,
            step: 0,
            seed: 0,
            mode: DropoutMode::Stochastic,
        }
    }

    pub fn train(p: f64, step: u64, seed: u64) -> Self {
        Self {
            training: true,
            p,
            step,
            seed,
            mode: DropoutMode::Stochastic,
        }
    }
}

/// A recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    /// One handle per parameter, in [`ModelParams`] order.
    pub params: Vec<Var>,
    pub logits: Var,
}

/// Mask stream id of a dropout site.
pub fn site_id(site: DropoutSite, layer: usize) -> u64 {
    match site {
        DropoutSite::EmbeddingOutput => 0,
        DropoutSite::AttentionOutput => 1 + 2 * layer as u64,
        DropoutSite::MlpOutput => 2 + 2 * layer as u64,
    }
}

/// Runs the model on `tokens` (`batch * seq` ids, row-major) and returns the
/// recorded tape with logits of shape `[batch, seq, vocab]`.
pub fn forward(
    params: &ModelParams,
    tokens: &[usize],
    batch: usize,
    seq: usize,
    opts: &ForwardOptions,
    requires_grad: bool,
) -> Result<Forward> {
    let cfg = &params.config;
    if seq == 0 || seq > cfg.context_len {
        return Err(Error::Shape(format!(
            "sequence length {seq} outside [1, {}]",
            cfg.context_len
        )));
    }
    if tokens.len() != batch * seq {
        return Err(Error::Shape(format!(
            "{} tokens do not fill a [{batch}, {seq}] batch",
            tokens.len()
        )));
    }
    if let Some(pos) = tokens.iter().position(|&t| t >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {} at position {pos} (row {}, column {}) outside vocabulary of {}",
            tokens[pos],
            pos / seq,
            pos % seq,
            cfg.vocab_size
        )));
    }
    let (d, h) = (cfg.d_model, cfg.n_heads);
    let dh = d / h;
    let mut tape = Tape::new();
    let p: Vec<Var> = params
        .tensors
        .iter()
        .map(|t| tape.leaf(t.clone(), requires_grad))
        .collect();

    let key = MaskKey {
        seed: opts.seed,
        step: opts.step,
    };
    let has = |s| cfg.dropout_sites.contains(&s);
    let drop = |tape: &mut Tape, x: Var, site: DropoutSite, layer: usize| -> Result<Var> {
        if !has(site) {
            return Ok(x);
        }
        let mut state = DropoutLayerState::for_mode(opts.mode, site_id(site, layer), d, opts.seed);
        apply_dropout(tape, x, opts.p, &mut state, opts.training, key)
    };

    let tok = tape.embedding(p[0], tokens, &[batch, seq])?;
    let positions: Vec<usize> = (0..seq).collect();
    let pos = tape.embedding(p[1], &positions, &[seq])?;
    let mut x = tape.add(tok, pos)?;
    x = drop(&mut tape, x, DropoutSite::EmbeddingOutput, 0)?;

    let affine = |tape: &mut Tape, x: Var, g: Var, b: Var| -> Result<Var> {
        let n = tape.layernorm(x, 2, cfg.ln_eps)?;
        let n = tape.mul(n, g)?;
        tape.add(n, b)
    };
    let linear = |tape: &mut Tape, x: Var, w: Var, b: Var| -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    };

    for l in 0..cfg.n_layers {
        let blk = Block::at(l);
        let hn = affine(&mut tape, x, p[blk.ln1_g], p[blk.ln1_b])?;
        let q = linear(&mut tape, hn, p[blk.wq], p[blk.bq])?;
        let k = linear(&mut tape, hn, p[blk.wk], p[blk.bk])?;
        let v = linear(&mut tape, hn, p[blk.wv], p[blk.bv])?;
        let heads = |tape: &mut Tape, t: Var, perm: &[usize]| -> Result<Var> {
            let r = tape.reshape(t, &[batch, seq, h, dh])?;
            tape.permute(r, perm)
        };
        let q = heads(&mut tape, q, &[0, 2, 1, 3])?; // [B, H, T, dh]
        let kt = heads(&mut tape, k, &[0, 2, 3, 1])?; // [B, H, dh, T]
        let v = heads(&mut tape, v, &[0, 2, 1, 3])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let att = tape.causal_softmax(scores)?;
        let y = tape.matmul(att, v)?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        let y = tape.reshape(y, &[batch, seq, d])?;
        let y = linear(&mut tape, y, p[blk.wo], p[blk.bo])?;
        if cfg.attention_dropout_after_residual {
            let sum = tape.add(x, y)?;
            x = drop(&mut tape, sum, DropoutSite::AttentionOutput, l)?;
        } else {
            let y = drop(&mut tape, y, DropoutSite::AttentionOutput, l)?;
            x = tape.add(x, y)?;
        }

        let hn = affine(&mut tape, x, p[blk.ln2_g], p[blk.ln2_b])?;
        let m = linear(&mut tape, hn, p[blk.w1], p[blk.b1])?;
        let m = tape.gelu(m)?;
        let m = linear(&mut tape, m, p[blk.w2], p[blk.b2])?;
        let m = drop(&mut tape, m, DropoutSite::MlpOutput, l)?;
        x = tape.add(x, m)?;
    }

    let base = 2 + cfg.n_layers * PER_LAYER;
    let x = affine(&mut tape, x, p[base], p[base + 1])?;
    let head = if cfg.tied_head {
        tape.transpose(p[0])?
    } else {
        p[base + 2]
    };
    let logits = tape.matmul(x, head)?;
    Ok(Forward {
        tape,
        params: p,
        logits,
    })
}

/// Mean next-token cross-entropy (nats per token) of recorded logits.
pub fn loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    let rows: usize = shape[..shape.len().saturating_sub(1)].iter().product();
    if rows != targets.len() {
        return Err(Error::Shape(format!(
            "{} targets for logits of shape {shape:?}",
            targets.len()
        )));
    }
    tape.cross_entropy(logits, targets)
}

/// Cross-entropy of a plain logits tensor `[.., V]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let out = loss(&mut tape, l, targets)?;
    tape.value(out).item()
}

/// Loss and per-parameter gradients for one minibatch.
pub fn loss_and_grads(
    params: &ModelParams,
    tokens: &[usize],
    targets: &[usize],
    batch: usize,
    seq: usize,
    opts: &ForwardOptions,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut f = forward(params, tokens, batch, seq, opts, true)?;
    let l = loss(&mut f.tape, f.logits, targets)?;
    let value = f.tape.value(l).item()?;
    f.tape.backward(l)?;
    let grads = f
        .params
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| f.tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((value, grads))
}

/// Eval-mode loss, no gradients.
pub fn eval_loss(
    params: &ModelParams,
    tokens: &[usize],
    targets: &[usize],
    batch: usize,
    seq: usize,
) -> Result<f64> {
    let mut f = forward(params, tokens, batch, seq, &ForwardOptions::eval(), false)?;
    let l = loss(&mut f.tape, f.logits, targets)?;
    f.tape.value(l).item()
}
