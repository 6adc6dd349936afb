//! Experiment-matrix sweeps and their summary tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::config::{ExperimentMatrix, RunConfig};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::train::{train, RunSummary, TrainOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub run: String,
    pub cell: String,
    pub seed: u64,
    /// `None` when the run failed.
    pub summary: Option<RunSummary>,
    pub error: Option<String>,
}

/// Corpora loaded once per distinct path.
fn load_corpora(runs: &[(String, RunConfig)]) -> Result<BTreeMap<(PathBuf, usize), Corpus>> {
    let mut out = BTreeMap::new();
    for (_, cfg) in runs {
        let key = (cfg.data.corpus.clone(), cfg.data.max_tokens);
        if !out.contains_key(&key) {
            out.insert(key, cfg.data.load()?);
        }
    }
    Ok(out)
}

/// Runs every cell x seed of `matrix` under `out_dir/<cell>-s<seed>`, with
/// up to `parallel` runs at a time. A failing run is recorded and the
/// sweep continues. Rows come back in matrix order regardless of
/// completion order.
pub fn run_sweep(
    matrix: &ExperimentMatrix,
    out_dir: &Path,
    parallel: usize,
    verbose: bool,
) -> Result<Vec<SweepRow>> {
    let runs = matrix.expand()?;
    let corpora = load_corpora(&runs)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cells: Vec<(String, u64)> = matrix
        .cells
        .iter()
        .flat_map(|c| matrix.seeds.iter().map(move |&s| (c.name.clone(), s)))
        .collect();

    let results: Vec<Mutex<Option<Result<RunSummary>>>> =
        runs.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..parallel.max(1).min(runs.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some((name, cfg)) = runs.get(i) else { break };
                if verbose {
                    eprintln!("[sweep] {name}: {}", cfg.schedule.describe());
                }
                let corpus = &corpora[&(cfg.data.corpus.clone(), cfg.data.max_tokens)];
                let r = train(cfg, corpus, &out_dir.join(name), &TrainOptions::default());
                *results[i].lock().expect("result lock") = Some(r);
            });
        }
    });

    Ok(runs
        .iter()
        .zip(cells)
        .zip(results)
        .map(|(((name, _), (cell, seed)), r)| {
            let r = r.into_inner().expect("result lock").expect("every run executed");
            let (summary, error) = match r {
                Ok(s) => (Some(s), None),
                Err(e) => (None, Some(e.to_string())),
            };
            SweepRow {
                run: name.clone(),
                cell,
                seed,
                summary,
                error,
            }
        })
        .collect())
}

fn best_index(rows: &[SweepRow]) -> Option<usize> {
    rows.iter()
        .enumerate()
        .filter_map(|(i, r)| r.summary.as_ref()?.final_val_loss.map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

const HEADER: [&str; 7] = [
    "name",
    "seed",
    "final_train_loss",
    "final_val_loss",
    "final_val_ppl",
    "best_step",
    "best",
];

fn cells(rows: &[SweepRow]) -> Vec<[String; 7]> {
    let best = best_index(rows);
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    rows.iter()
        .enumerate()
        .map(|(i, r)| match &r.summary {
            Some(s) => [
                r.cell.clone(),
                r.seed.to_string(),
                f(s.final_train_loss),
                f(s.final_val_loss),
                f(s.final_val_loss.map(f64::exp)),
                s.best_step.map_or_else(String::new, |b| b.to_string()),
                if Some(i) == best { "*".into() } else { String::new() },
            ],
            None => [
                r.cell.clone(),
                r.seed.to_string(),
                "FAILED".into(),
                "FAILED".into(),
                "FAILED".into(),
                String::new(),
                String::new(),
            ],
        })
        .collect()
}

/// Summary CSV; `*` in the last column marks the lowest final validation
/// loss.
pub fn summary_csv(rows: &[SweepRow]) -> String {
    let mut out = HEADER.join(",");
    out.push('\n');
    for row in cells(rows) {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// The same table, column-aligned.
pub fn summary_table(rows: &[SweepRow]) -> String {
    let body = cells(rows);
    let mut widths = HEADER.map(str::len);
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cols: Vec<&str>| {
        cols.iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
            + "\n"
    };
    let mut out = line(HEADER.to_vec());
    for row in &body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

/// Mean final validation loss per cell, in matrix order; failed runs are
/// left out of the mean.
pub fn cell_means(rows: &[SweepRow]) -> Vec<(String, Option<f64>)> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.cell) {
            order.push(r.cell.clone());
        }
        if let Some(v) = r.summary.as_ref().and_then(|s| s.final_val_loss) {
            acc.entry(r.cell.clone()).or_default().push(v);
        }
    }
    order
        .into_iter()
        .map(|c| {
            let mean = acc
                .get(&c)
                .map(|v| v.iter().sum::<f64>() / v.len() as f64);
            (c, mean)
        })
        .collect()
}

/// Writes `summary.csv` and `summary.txt` into `out_dir`.
pub fn write_summary(out_dir: &Path, rows: &[SweepRow]) -> Result<()> {
    let csv = out_dir.join("summary.csv");
    fs::write(&csv, summary_csv(rows)).map_err(|e| Error::io(&csv, e))?;
    let txt = out_dir.join("summary.txt");
    fs::write(&txt, summary_table(rows)).map_err(|e| Error::io(&txt, e))
}
