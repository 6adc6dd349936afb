//! The training loop, metrics stream and run directories.
//!
//! Steps are 1-based: step `t` applies the `t`-th optimizer update using
//! dropout ratio `schedule.ratio(t)`. Validation runs at step 0, every
//! `eval_every` steps and at the last step. `ckpt/step-N.bin` holds the
//! state after `N` updates; resuming from it continues at step `N + 1`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_path, list_checkpoints, Checkpoint};
use crate::config::RunConfig;
use crate::data::{eval_batches, Batch, BatchPlan, Corpus};
use crate::dropout::{DropoutMode, DropoutSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::gdv::{append_jsonl, gdv_probe_batches, probe_batches};
use crate::model::{self, ForwardOptions, ModelParams};
use crate::optim::{lr_at, AdamHyper, Optimizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One training-step or evaluation observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub split: Split,
    /// Mean cross-entropy in nats per token.
    pub loss: f64,
    pub ppl: f64,
    pub p: f64,
    pub lr: f64,
    pub wall_ms: Option<f64>,
}

impl MetricsRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn csv_header() -> &'static str {
        "step,split,loss,ppl,p,lr,wall_ms"
    }

    pub fn to_csv(&self) -> String {
        let split = match self.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        let wall = self.wall_ms.map(|w| w.to_string()).unwrap_or_default();
        format!(
            "{},{split},{},{},{},{},{wall}",
            self.step, self.loss, self.ppl, self.p, self.lr
        )
    }
}

/// Reads a metrics JSONL file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::Data(format!("{}: bad record: {e}", path.display())))
        })
        .collect()
}

/// Mean loss over `batches`, weighting every token equally.
pub fn evaluate(params: &ModelParams, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        let l = model::eval_loss(params, &b.inputs, &b.targets, b.batch, b.seq)?;
        let n = b.batch * b.seq;
        total += l * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Data("no evaluation windows".into()));
    }
    Ok(total / count as f64)
}

/// Validation batches of a run.
pub fn val_batches(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<Batch>> {
    eval_batches(
        corpus.val(),
        cfg.model.context_len,
        cfg.train.batch_size,
        cfg.train.eval_windows,
    )
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the latest checkpoint in the run directory.
    pub resume: bool,
    /// Stop (as if interrupted) after this step.
    pub stop_after: Option<u64>,
    /// Print progress lines to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub steps_run: u64,
    pub final_step: u64,
    pub completed: bool,
    /// True when `resume` found the run already finished and did nothing.
    pub already_complete: bool,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_step: Option<u64>,
    pub last_checkpoint: Option<PathBuf>,
}

fn dropout_mode(cfg: &RunConfig) -> DropoutMode {
    match cfg.schedule.kind {
        ScheduleKind::AnnealedDeterministic => DropoutMode::DeterministicAnnealed {
            cutoff_iter: cfg.schedule.cutoff_iter.unwrap_or(0),
            p_base: cfg.schedule.p_base,
            rescale: false,
        },
        _ => DropoutMode::Stochastic,
    }
}

struct Sink {
    jsonl: BufWriter<fs::File>,
    csv: BufWriter<fs::File>,
    jsonl_path: PathBuf,
    csv_path: PathBuf,
}

impl Sink {
    /// Opens the metrics files, keeping only `kept` records.
    fn open(dir: &Path, kept: &[MetricsRecord]) -> Result<Self> {
        let jsonl_path = dir.join("metrics.jsonl");
        let csv_path = dir.join("metrics.csv");
        let create = |p: &Path| fs::File::create(p).map_err(|e| Error::io(p, e));
        let mut sink = Self {
            jsonl: BufWriter::new(create(&jsonl_path)?),
            csv: BufWriter::new(create(&csv_path)?),
            jsonl_path,
            csv_path,
        };
        writeln!(sink.csv, "{}", MetricsRecord::csv_header())
            .map_err(|e| Error::io(&sink.csv_path, e))?;
        for r in kept {
            sink.write(r)?;
        }
        Ok(sink)
    }

    fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        writeln!(self.jsonl, "{}", r.to_json()).map_err(|e| Error::io(&self.jsonl_path, e))?;
        writeln!(self.csv, "{}", r.to_csv()).map_err(|e| Error::io(&self.csv_path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.jsonl.flush().map_err(|e| Error::io(&self.jsonl_path, e))?;
        self.csv.flush().map_err(|e| Error::io(&self.csv_path, e))
    }
}

/// Trains `cfg` on `corpus`, writing into `run_dir`:
/// `config.snapshot`, `metrics.jsonl`, `metrics.csv`, `gdv.jsonl` (when
/// periodic GDV is on) and `ckpt/step-N.bin`.
pub fn train(cfg: &RunConfig, corpus: &Corpus, run_dir: &Path, opts: &TrainOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let t_cfg = &cfg.train;
    let total = t_cfg.total_iters;
    let schedule = DropoutSchedule::new(&cfg.schedule, total)?;
    let ckpt_dir = run_dir.join("ckpt");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let mut start = 0u64;
    let mut params = None;
    let mut optim_state = None;
    let mut best_val_loss = None;
    let mut best_step = None;
    let mut last_checkpoint = None;
    let mut kept = Vec::new();

    if opts.resume {
        if let Some((_, path)) = list_checkpoints(&ckpt_dir)?.pop() {
            let ckpt = Checkpoint::load(&path)?;
            if ckpt.config.hash() != cfg.hash() {
                return Err(Error::ConfigMismatch(ckpt.config.diff(cfg)));
            }
            let metrics_path = run_dir.join("metrics.jsonl");
            let previous = if metrics_path.exists() {
                read_metrics(&metrics_path)?
            } else {
                Vec::new()
            };
            if ckpt.step >= total {
                let last = |s| previous.iter().rev().find(|r| r.split == s).map(|r| r.loss);
                return Ok(RunSummary {
                    run_dir: run_dir.to_path_buf(),
                    steps_run: 0,
                    final_step: ckpt.step,
                    completed: true,
                    already_complete: true,
                    final_train_loss: last(Split::Train),
                    final_val_loss: last(Split::Val),
                    best_val_loss: ckpt.best_val_loss,
                    best_step: ckpt.best_step,
                    last_checkpoint: Some(path),
                });
            }
            kept = previous.into_iter().filter(|r| r.step <= ckpt.step).collect();
            start = ckpt.step;
            best_val_loss = ckpt.best_val_loss;
            best_step = ckpt.best_step;
            params = Some(ckpt.params);
            optim_state = Some(ckpt.optim);
            last_checkpoint = Some(path);
        }
    }
    if start == 0 {
        kept.clear();
        for (_, stale) in list_checkpoints(&ckpt_dir)? {
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        let gdv_path = run_dir.join("gdv.jsonl");
        if gdv_path.exists() {
            fs::remove_file(&gdv_path).map_err(|e| Error::io(&gdv_path, e))?;
        }
    } else {
        let gdv_path = run_dir.join("gdv.jsonl");
        if gdv_path.exists() {
            let text = fs::read_to_string(&gdv_path).map_err(|e| Error::io(&gdv_path, e))?;
            let keep: String = text
                .lines()
                .filter(|l| {
                    serde_json::from_str::<crate::gdv::GdvSnapshot>(l)
                        .map(|s| s.step <= start)
                        .unwrap_or(false)
                })
                .map(|l| format!("{l}\n"))
                .collect();
            fs::write(&gdv_path, keep).map_err(|e| Error::io(&gdv_path, e))?;
        }
    }
    let snapshot = run_dir.join("config.snapshot");
    fs::write(&snapshot, cfg.to_toml()).map_err(|e| Error::io(&snapshot, e))?;

    let mut params = match params {
        Some(p) => p,
        None => ModelParams::init(&cfg.model, t_cfg.seed)?,
    };
    let hyper = AdamHyper {
        beta1: t_cfg.beta1,
        beta2: t_cfg.beta2,
        eps: t_cfg.eps,
        weight_decay: t_cfg.weight_decay,
    };
    let clip = (t_cfg.grad_clip > 0.0).then_some(t_cfg.grad_clip);
    let mut optimizer = Optimizer::new(t_cfg.optimizer, hyper, t_cfg.momentum, clip, params.tensors());
    if let Some(state) = optim_state {
        optimizer.state = state;
    }

    let plan = BatchPlan {
        seed: t_cfg.seed,
        context_len: cfg.model.context_len,
        batch_size: t_cfg.batch_size,
        sampling: cfg.data.sampling,
    };
    let val = val_batches(cfg, corpus)?;
    let probes = if t_cfg.gdv_every > 0 {
        probe_batches(
            corpus,
            cfg.model.context_len,
            t_cfg.batch_size,
            cfg.instrumentation.gdv_minibatches,
            t_cfg.seed,
        )?
    } else {
        Vec::new()
    };
    let mode = dropout_mode(cfg);
    let lr_of = |t: u64| lr_at(t_cfg.lr_schedule, t_cfg.lr, t_cfg.min_lr_ratio, t_cfg.warmup_iters, total, t);
    let clock = Instant::now();
    let wall = || t_cfg.log_wall_time.then(|| clock.elapsed().as_secs_f64() * 1e3);

    let mut sink = Sink::open(run_dir, &kept)?;
    let mut final_train_loss = kept.iter().rev().find(|r| r.split == Split::Train).map(|r| r.loss);
    let mut final_val_loss = kept.iter().rev().find(|r| r.split == Split::Val).map(|r| r.loss);

    let record_val = |sink: &mut Sink, params: &ModelParams, t: u64, best: &mut (Option<f64>, Option<u64>)| -> Result<f64> {
        let loss = evaluate(params, &val)?;
        sink.write(&MetricsRecord {
            step: t,
            split: Split::Val,
            loss,
            ppl: loss.exp(),
            p: schedule.ratio(t)?,
            lr: if t == 0 { 0.0 } else { lr_of(t) },
            wall_ms: wall(),
        })?;
        if best.0.is_none_or(|b| loss < b) {
            *best = (Some(loss), Some(t));
        }
        Ok(loss)
    };
    let mut best = (best_val_loss, best_step);
    if start == 0 {
        final_val_loss = Some(record_val(&mut sink, &params, 0, &mut best)?);
    }

    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let mut steps_run = 0;
    for t in start + 1..=end {
        let p = schedule.ratio(t)?;
        let lr = lr_of(t);
        let batch = plan.batch(corpus.train(), t)?;
        let fopts = ForwardOptions {
            training: true,
            p,
            step: t,
            seed: t_cfg.seed,
            mode,
        };
        let (loss, mut grads) =
            model::loss_and_grads(&params, &batch.inputs, &batch.targets, batch.batch, batch.seq, &fopts)?;
        if !loss.is_finite() {
            sink.flush()?;
            return Err(Error::NonFiniteLoss {
                step: t,
                last_checkpoint,
            });
        }
        let names = params.names().to_vec();
        if let Err(e) = optimizer.step(&names, params.tensors_mut(), &mut grads, t, lr) {
            sink.flush()?;
            return Err(e);
        }
        sink.write(&MetricsRecord {
            step: t,
            split: Split::Train,
            loss,
            ppl: loss.exp(),
            p,
            lr,
            wall_ms: wall(),
        })?;
        final_train_loss = Some(loss);
        steps_run += 1;

        if t % t_cfg.eval_every == 0 || t == total {
            let v = record_val(&mut sink, &params, t, &mut best)?;
            final_val_loss = Some(v);
            if opts.verbose {
                eprintln!("step {t:>6}  train {loss:.4}  val {v:.4}  p {p:.4}  lr {lr:.3e}");
            }
        }
        if t_cfg.gdv_every > 0 && t % t_cfg.gdv_every == 0 {
            let gdv_path = run_dir.join("gdv.jsonl");
            for probe_p in [0.0, cfg.instrumentation.gdv_dropout_p] {
                let snap = gdv_probe_batches(&params, &probes, probe_p, t, t_cfg.seed, &cfg.instrumentation)?;
                append_jsonl(&gdv_path, &snap)?;
            }
        }
        let periodic = t_cfg.checkpoint_every > 0 && t % t_cfg.checkpoint_every == 0;
        if periodic || t == total || Some(t) == opts.stop_after {
            sink.flush()?;
            let path = checkpoint_path(run_dir, t);
            Checkpoint {
                config: cfg.clone(),
                step: t,
                params: params.clone(),
                optim: optimizer.state.clone(),
                best_val_loss: best.0,
                best_step: best.1,
            }
            .save(&path)?;
            last_checkpoint = Some(path);
        }
    }
    sink.flush()?;
    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        steps_run,
        final_step: end.max(start),
        completed: end == total,
        already_complete: false,
        final_train_loss,
        final_val_loss,
        best_val_loss: best.0,
        best_step: best.1,
        last_checkpoint,
    })
}
