use std::fs;
use std::path::Path;

use droplab::config::RunConfig;
use droplab::data::Corpus;
use droplab::dropout::{DropoutSchedule, ScheduleKind, ScheduleSpec};
use droplab::optim::OptimizerKind;
use droplab::train::{read_metrics, train, Split, TrainOptions};
use droplab::Error;

fn corpus() -> Corpus {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../corpora/small");
    Corpus::from_dir(Path::new(dir)).unwrap()
}

fn tiny(total: u64) -> RunConfig {
    let text = "[model]\ncontext_len = 16\nd_model = 16\nn_layers = 1\nn_heads = 2\nd_ff = 32\n\
                [train]\nbatch_size = 4\nlr = 0.003\nwarmup_iters = 2\neval_every = 5\neval_windows = 4\ncheckpoint_every = 5\n\
                [schedule]\nkind = \"linear\"\np_base = 0.2\ndirection = \"increasing\"\n";
    let mut cfg = RunConfig::from_toml(text).unwrap();
    cfg.train.total_iters = total;
    cfg
}

fn run_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn identical_runs_are_bit_identical() {
    let c = corpus();
    let cfg = tiny(10);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&cfg, &c, a.path(), &TrainOptions::default()).unwrap();
    train(&cfg, &c, b.path(), &TrainOptions::default()).unwrap();
    let fa = run_files(a.path());
    assert_eq!(fa, run_files(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["ckpt/step-10.bin", "ckpt/step-5.bin", "config.snapshot", "metrics.csv", "metrics.jsonl"]
    );
    let records = read_metrics(&a.path().join("metrics.jsonl")).unwrap();
    assert_eq!(records.iter().filter(|r| r.split == Split::Train).count(), 10);
    let val_steps: Vec<u64> = records.iter().filter(|r| r.split == Split::Val).map(|r| r.step).collect();
    assert_eq!(val_steps, [0, 5, 10]);
    assert!(records.iter().all(|r| r.wall_ms.is_none()));
}

#[test]
fn recorded_ratio_is_the_schedule_value() {
    let c = corpus();
    let cfg = tiny(20);
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &c, dir.path(), &TrainOptions::default()).unwrap();
    let schedule = DropoutSchedule::new(&cfg.schedule, 20).unwrap();
    for r in read_metrics(&dir.path().join("metrics.jsonl")).unwrap() {
        assert_eq!(r.p, schedule.ratio(r.step).unwrap(), "step {}", r.step);
        assert_eq!(r.ppl, r.loss.exp());
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let c = corpus();
    let mut cfg = tiny(200);
    cfg.train.checkpoint_every = 0;
    cfg.train.eval_every = 50;
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    train(&cfg, &c, full.path(), &TrainOptions::default()).unwrap();
    let first = train(
        &cfg,
        &c,
        split.path(),
        &TrainOptions {
            stop_after: Some(100),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!first.completed);
    assert_eq!(first.final_step, 100);
    let second = train(
        &cfg,
        &c,
        split.path(),
        &TrainOptions {
            resume: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(second.steps_run, 100);
    let metrics = |d: &Path| fs::read(d.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics(full.path()), metrics(split.path()));
    let ck = |d: &Path| fs::read(d.join("ckpt/step-200.bin")).unwrap();
    assert_eq!(ck(full.path()), ck(split.path()));

    let again = train(&cfg, &c, split.path(), &TrainOptions { resume: true, ..Default::default() }).unwrap();
    assert!(again.already_complete);
    assert_eq!(again.steps_run, 0);
}

#[test]
fn resume_with_changed_config_is_refused() {
    let c = corpus();
    let cfg = tiny(10);
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &c, dir.path(), &TrainOptions { stop_after: Some(5), ..Default::default() }).unwrap();
    let mut changed = cfg.clone();
    changed.train.lr = 0.01;
    match train(&changed, &c, dir.path(), &TrainOptions { resume: true, ..Default::default() }) {
        Err(Error::ConfigMismatch(diff)) => {
            assert_eq!(diff, ["train.lr: 0.003 -> 0.01"]);
        }
        other => panic!("expected mismatch, got {other:?}"),
    }
}

#[test]
fn divergence_reports_step_and_checkpoint() {
    let c = corpus();
    let mut cfg = tiny(10);
    cfg.train.lr = 1e300;
    cfg.train.warmup_iters = 0;
    cfg.train.grad_clip = 0.0;
    cfg.train.checkpoint_every = 1;
    let dir = tempfile::tempdir().unwrap();
    let err = train(&cfg, &c, dir.path(), &TrainOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    match err {
        Error::NonFiniteLoss { step, last_checkpoint } => {
            assert!(step >= 2);
            assert_eq!(last_checkpoint.unwrap(), dir.path().join(format!("ckpt/step-{}.bin", step - 1)));
        }
        Error::NonFiniteGrad { step, .. } => assert!(step >= 1),
        other => panic!("{other:?}"),
    }
}

fn fifty_sequences() -> Corpus {
    // 50 training windows worth of text plus a held-out tail.
    let full = corpus();
    let bytes = droplab::data::detokenize(&full.tokens()[..17 * 50 * 10 / 9 + 40]);
    Corpus::from_text("fifty", &String::from_utf8_lossy(&bytes)).unwrap()
}

fn overfit_run(p: f64) -> (f64, f64, f64) {
    let c = fifty_sequences();
    let mut cfg = tiny(2000);
    cfg.schedule = ScheduleSpec::constant(p);
    cfg.train.eval_every = 250;
    cfg.train.checkpoint_every = 0;
    cfg.train.weight_decay = 0.0;
    cfg.train.lr = 0.01;
    cfg.model.d_model = 32;
    cfg.model.d_ff = 64;
    cfg.train.eval_windows = 1000;
    let dir = tempfile::tempdir().unwrap();
    let s = train(&cfg, &c, dir.path(), &TrainOptions::default()).unwrap();
    let records = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    let train_tail: Vec<f64> = records
        .iter()
        .filter(|r| r.split == Split::Train && r.step > 1900)
        .map(|r| r.loss)
        .collect();
    let tail = train_tail.iter().sum::<f64>() / train_tail.len() as f64;
    (tail, s.final_val_loss.unwrap(), s.best_val_loss.unwrap())
}

#[test]
fn tiny_corpus_overfits_without_dropout() {
    let (train0, val0, best0) = overfit_run(0.0);
    eprintln!("p=0: train {train0:.4} val {val0:.4} best {best0:.4}");
    assert!(train0 < (droplab::data::VOCAB_SIZE as f64).ln(), "train loss {train0}");
    assert!(val0 > best0, "validation never turned up");
    let (train1, val1, best1) = overfit_run(0.1);
    eprintln!("p=0.1: train {train1:.4} val {val1:.4} best {best1:.4}");
    assert!(val1 <= val0, "dropout final val {val1} > {val0}");
}

#[test]
fn periodic_gdv_and_alternative_modes_run() {
    let c = corpus();
    let mut cfg = tiny(6);
    cfg.train.gdv_every = 3;
    cfg.instrumentation.gdv_minibatches = 3;
    cfg.train.optimizer = OptimizerKind::SgdMomentum;
    cfg.schedule = ScheduleSpec {
        kind: ScheduleKind::AnnealedDeterministic,
        p_base: 1.0,
        cutoff_iter: Some(4),
        ..ScheduleSpec::constant(0.0)
    };
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &c, dir.path(), &TrainOptions::default()).unwrap();
    let lines: Vec<String> = fs::read_to_string(dir.path().join("gdv.jsonl"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 4);
    for l in lines {
        let v: serde_json::Value = serde_json::from_str(&l).unwrap();
        let g = v["gdv"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&g));
    }

    cfg.train.log_wall_time = true;
    cfg.train.gdv_every = 0;
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &c, dir.path(), &TrainOptions::default()).unwrap();
    let records = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert!(records.iter().all(|r| r.wall_ms.is_some()));
}
