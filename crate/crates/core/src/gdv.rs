//! Gradient Direction Variance: the mean pairwise cosine between gradients
//! computed on different minibatches at a fixed set of parameters,
//!
//! ```text
//! GDV = 1 / (|L| |G| (|G| - 1)) * sum_{l in L} sum_{i != j} cos(g_i^l, g_j^l)
//! ```
//!
//! over layers `L` and ordered pairs of minibatch gradients `G`. Despite the
//! name this is a *similarity*: higher gradient direction variance shows up
//! as a *lower* value.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{list_checkpoints, Checkpoint};
use crate::config::{GdvGrouping, InstrumentationConfig};
use crate::data::{BatchPlan, Batch, Corpus};
use crate::error::{Error, Result};
use crate::model::{loss_and_grads, ForwardOptions, ModelParams};
use crate::rng::{domain, stream_id};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGdv {
    pub layer: String,
    pub mean_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdvSnapshot {
    pub step: u64,
    pub num_minibatches: usize,
    /// Dropout ratio used by the probe; 0 means dropout off.
    pub dropout_p: f64,
    pub per_layer: Vec<LayerGdv>,
    pub gdv: f64,
}

/// Result of [`gdv`]: per-layer mean cosines and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct GdvValue {
    pub per_layer: Vec<f64>,
    pub gdv: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// GDV of `per_layer[l][i]`, the flattened gradient of layer `l` on
/// minibatch `i`. Zero-norm vectors are an error unless `skip_zero`, in
/// which case pairs involving them are left out of that layer's mean
/// (layers with no valid pair are left out of the overall mean).
pub fn gdv(per_layer: &[Vec<Vec<f64>>], skip_zero: bool) -> Result<GdvValue> {
    if per_layer.is_empty() {
        return Err(Error::Domain("GDV over zero layers".into()));
    }
    let mut means = Vec::with_capacity(per_layer.len());
    for (l, grads) in per_layer.iter().enumerate() {
        let g = grads.len();
        if g < 2 {
            return Err(Error::Domain(format!(
                "GDV needs at least 2 gradients per layer, layer {l} has {g}"
            )));
        }
        let n = grads[0].len();
        if grads.iter().any(|v| v.len() != n) {
            return Err(Error::Shape(format!("layer {l}: gradients differ in length")));
        }
        let norms: Vec<f64> = grads.iter().map(|v| dot(v, v).sqrt()).collect();
        if !skip_zero {
            if let Some(i) = norms.iter().position(|&x| x == 0.0) {
                return Err(Error::Domain(format!(
                    "layer {l}: gradient {i} has zero norm (enable skipping to drop its pairs)"
                )));
            }
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..g {
            for j in 0..g {
                if i == j || norms[i] == 0.0 || norms[j] == 0.0 {
                    continue;
                }
                let c = dot(&grads[i], &grads[j]) / (norms[i] * norms[j]);
                sum += c.clamp(-1.0, 1.0);
                pairs += 1;
            }
        }
        means.push(if pairs == 0 { f64::NAN } else { sum / pairs as f64 });
    }
    let valid: Vec<f64> = means.iter().copied().filter(|m| !m.is_nan()).collect();
    if valid.is_empty() {
        return Err(Error::Domain("GDV: no pair of nonzero gradients".into()));
    }
    let gdv = (valid.iter().sum::<f64>() / valid.len() as f64).clamp(-1.0, 1.0);
    Ok(GdvValue {
        per_layer: means,
        gdv,
    })
}

/// Layer groups over parameter indices, named.
pub fn layer_groups(
    names: &[String],
    grouping: GdvGrouping,
    include_embeddings: bool,
) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let block = name.split('.').next().unwrap_or(name);
        if block == "embed" && !include_embeddings {
            continue;
        }
        let key = match grouping {
            GdvGrouping::PerTensor => name.clone(),
            GdvGrouping::PerBlock => block.to_string(),
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    groups
}

/// GDV at fixed `params` over the given minibatches. Dropout is off for
/// `p == 0`; otherwise masks are fresh per minibatch. Parameters are only
/// read.
pub fn gdv_probe_batches(
    params: &ModelParams,
    batches: &[Batch],
    p: f64,
    step: u64,
    seed: u64,
    inst: &InstrumentationConfig,
) -> Result<GdvSnapshot> {
    let groups = layer_groups(params.names(), inst.gdv_grouping, inst.gdv_include_embeddings);
    let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(batches.len()); groups.len()];
    let mask_seed = stream_id(&[seed, domain::PROBE, domain::MASK]);
    for (i, b) in batches.iter().enumerate() {
        let opts = if p == 0.0 {
            ForwardOptions::eval()
        } else {
            ForwardOptions::train(p, i as u64, mask_seed)
        };
        let (_, grads) = loss_and_grads(params, &b.inputs, &b.targets, b.batch, b.seq, &opts)?;
        for (slot, (_, idx)) in per_layer.iter_mut().zip(&groups) {
            slot.push(idx.iter().flat_map(|&k| grads[k].iter().copied()).collect());
        }
    }
    let value = gdv(&per_layer, inst.gdv_skip_zero)?;
    Ok(GdvSnapshot {
        step,
        num_minibatches: batches.len(),
        dropout_p: p,
        per_layer: groups
            .into_iter()
            .zip(value.per_layer)
            .map(|((layer, _), mean_cosine)| LayerGdv { layer, mean_cosine })
            .collect(),
        gdv: value.gdv,
    })
}

/// Probe minibatches: freshly sampled from the training split with a seed
/// separate from the training batch stream, identical for every probe of a
/// run.
pub fn probe_batches(
    corpus: &Corpus,
    context_len: usize,
    batch_size: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    let plan = BatchPlan {
        seed: stream_id(&[seed, domain::PROBE]),
        context_len,
        batch_size,
        sampling: crate::data::Sampling::RandomOffset,
    };
    (0..n as u64).map(|t| plan.batch(corpus.train(), t)).collect()
}

/// GDV of a checkpoint on `corpus`.
pub fn gdv_probe(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    num_minibatches: usize,
    p: f64,
) -> Result<GdvSnapshot> {
    let cfg = &ckpt.config;
    let batches = probe_batches(
        corpus,
        cfg.model.context_len,
        cfg.train.batch_size,
        num_minibatches,
        cfg.train.seed,
    )?;
    gdv_probe_batches(&ckpt.params, &batches, p, ckpt.step, cfg.train.seed, &cfg.instrumentation)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdvSweepRow {
    pub step: u64,
    pub gdv_off: f64,
    pub gdv_on: f64,
}

/// Off/on GDV at every checkpoint of a run directory, in step order.
pub fn gdv_sweep(run_dir: &Path, corpus: &Corpus, p: f64) -> Result<Vec<GdvSweepRow>> {
    let ckpts = list_checkpoints(&run_dir.join("ckpt"))?;
    if ckpts.is_empty() {
        return Err(Error::Data(format!("no checkpoints under {}", run_dir.display())));
    }
    let mut rows = Vec::new();
    for (_, path) in ckpts {
        let ckpt = Checkpoint::load(&path)?;
        let n = ckpt.config.instrumentation.gdv_minibatches;
        let off = gdv_probe(&ckpt, corpus, n, 0.0)?;
        let on = gdv_probe(&ckpt, corpus, n, p)?;
        rows.push(GdvSweepRow {
            step: ckpt.step,
            gdv_off: off.gdv,
            gdv_on: on.gdv,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[GdvSweepRow]) -> String {
    let mut out = String::from("step,gdv_off,gdv_on\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.gdv_off, r.gdv_on));
    }
    out
}

/// Appends `snapshot` as one JSON line.
pub fn append_jsonl(path: &Path, snapshot: &GdvSnapshot) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(snapshot).expect("snapshot serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}
