//! Run configuration files and experiment matrices.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Corpus, Sampling};
use crate::dropout::{Direction, ScheduleKind, ScheduleSpec};
use crate::error::{Error, Result};
use crate::model::{hex, ModelConfig};
use crate::optim::{LrSchedule, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_iters: u64,
    /// Final learning rate of cosine schedules, as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// SGD momentum coefficient.
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Master seed for initialization, batches, masks and probes.
    pub seed: u64,
    pub eval_every: u64,
    /// Upper bound on validation windows per evaluation.
    pub eval_windows: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// 0 disables periodic GDV snapshots.
    pub gdv_every: u64,
    /// Record wall-clock time in metrics (breaks byte-identical replays).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 30000,
            batch_size: 16,
            lr: 3e-4,
            lr_schedule: LrSchedule::WarmupCosine,
            warmup_iters: 200,
            min_lr_ratio: 0.1,
            optimizer: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            momentum: 0.9,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 500,
            eval_windows: 64,
            checkpoint_every: 5000,
            gdv_every: 0,
            log_wall_time: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of text files, a single text file, or a `corpus.bin`.
    pub corpus: PathBuf,
    pub sampling: Sampling,
    /// Use only the first `max_tokens` tokens of the corpus; 0 uses all.
    pub max_tokens: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpora/small"),
            sampling: Sampling::RandomOffset,
            max_tokens: 0,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Corpus> {
        Corpus::open(&self.corpus)?.truncated(self.max_tokens)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GdvGrouping {
    /// One group per embedding table set, per transformer block, and the
    /// final layernorm/head.
    PerBlock,
    PerTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstrumentationConfig {
    pub gdv_minibatches: usize,
    /// Dropout ratio of the "on" probe.
    pub gdv_dropout_p: f64,
    pub gdv_grouping: GdvGrouping,
    pub gdv_include_embeddings: bool,
    /// Drop pairs involving zero-norm gradients instead of failing.
    pub gdv_skip_zero: bool,
}

impl Default for InstrumentationConfig {
    fn default() -> Self {
        Self {
            gdv_minibatches: 10,
            gdv_dropout_p: 0.1,
            gdv_grouping: GdvGrouping::PerBlock,
            gdv_include_embeddings: true,
            gdv_skip_zero: false,
        }
    }
}

/// A complete run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleSpec,
    pub data: DataConfig,
    pub instrumentation: InstrumentationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleSpec::constant(0.1),
            data: DataConfig::default(),
            instrumentation: InstrumentationConfig::default(),
        }
    }
}

/// Every key a config file may contain, with optional keys filled in.
fn exemplar() -> toml::Value {
    let mut full = RunConfig::default();
    full.schedule.direction = Some(Direction::Increasing);
    full.schedule.cutoff_iter = Some(1);
    full.schedule.cycles = Some(1);
    toml::Value::try_from(&full).expect("config serializes")
}

fn unknown_keys(value: &toml::Value, shape: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (Some(v), Some(s)) = (value.as_table(), shape.as_table()) else {
        return;
    };
    for (k, child) in v {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match s.get(k) {
            Some(sub) => unknown_keys(child, sub, &path, out),
            None => out.push(path),
        }
    }
}

impl RunConfig {
    /// Parses TOML, rejecting (and listing) every unknown key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &exemplar(), "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        let bad = |field: &str, why: &str| Err(Error::Config(format!("train.{field}: {why}")));
        if t.total_iters == 0 {
            return bad("total_iters", "must be positive");
        }
        if t.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if t.eval_every == 0 {
            return bad("eval_every", "must be positive");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("beta1", "betas must lie in [0, 1)");
        }
        if t.grad_clip < 0.0 {
            return bad("grad_clip", "must be non-negative");
        }
        if self.instrumentation.gdv_minibatches < 2 {
            return Err(Error::Config(
                "instrumentation.gdv_minibatches: need at least 2".into(),
            ));
        }
        crate::dropout::DropoutSchedule::new(&self.schedule, t.total_iters)?;
        Ok(())
    }

    /// Canonical JSON: keys sorted, so the text is independent of the order
    /// keys appeared in the source file.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(&serde_json::to_value(self).expect("config serializes"))
            .expect("json serializes")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Human-readable differences `key: old -> new`, one per changed leaf.
    pub fn diff(&self, other: &RunConfig) -> Vec<String> {
        let a = flatten(&serde_json::to_value(self).expect("config serializes"));
        let b = flatten(&serde_json::to_value(other).expect("config serializes"));
        let keys: BTreeSet<_> = a.keys().chain(b.keys()).collect();
        let none = "(unset)".to_string();
        keys.into_iter()
            .filter(|k| a.get(*k) != b.get(*k))
            .map(|k| {
                format!(
                    "{k}: {} -> {}",
                    a.get(k).unwrap_or(&none),
                    b.get(k).unwrap_or(&none)
                )
            })
            .collect()
    }

    /// `(key, default)` for every config key, sorted within each section.
    pub fn documented_keys() -> Vec<(String, String)> {
        let mut out = Vec::new();
        let value = toml::Value::try_from(RunConfig::default()).expect("config serializes");
        let optional = [
            ("schedule.direction", "increasing | decreasing"),
            ("schedule.cutoff_iter", "required by *_early, stepped_*, annealed_deterministic"),
            ("schedule.cycles", "3"),
        ];
        if let Some(top) = value.as_table() {
            for (section, table) in top {
                if let Some(t) = table.as_table() {
                    for (k, v) in t {
                        out.push((format!("{section}.{k}"), v.to_string()));
                    }
                }
                if section == "schedule" {
                    for (k, v) in optional {
                        out.push((k.to_string(), format!("(unset; {v})")));
                    }
                }
            }
        }
        out
    }
}

fn flatten(v: &serde_json::Value) -> BTreeMap<String, String> {
    fn walk(v: &serde_json::Value, prefix: String, out: &mut BTreeMap<String, String>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(child, key, out);
                }
            }
            serde_json::Value::Null => {}
            other => {
                out.insert(prefix, other.to_string());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(v, String::new(), &mut out);
    out
}

/// One row of an experiment matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub name: String,
    pub schedule: ScheduleSpec,
}

/// Matrix file: a base config path (relative to the matrix file), seeds,
/// and named schedule overrides.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    base: PathBuf,
    seeds: Vec<u64>,
    #[serde(rename = "cell")]
    cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentMatrix {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

impl ExperimentMatrix {
    pub fn new(base: RunConfig, seeds: Vec<u64>, cells: Vec<Cell>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &cells {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate matrix cell {}", c.name)));
            }
        }
        if seeds.is_empty() || cells.is_empty() {
            return Err(Error::Config("matrix needs at least one seed and one cell".into()));
        }
        Ok(Self { base, seeds, cells })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: MatrixFile = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let base_path = path.parent().unwrap_or(Path::new(".")).join(&file.base);
        Self::new(RunConfig::load(&base_path)?, file.seeds, file.cells)
    }

    /// Complete configs named `<cell>-s<seed>`, cell-major in matrix order.
    pub fn expand(&self) -> Result<Vec<(String, RunConfig)>> {
        let mut out = Vec::new();
        for cell in &self.cells {
            for &seed in &self.seeds {
                let mut cfg = self.base.clone();
                cfg.schedule = cell.schedule.clone();
                cfg.train.seed = seed;
                cfg.validate()
                    .map_err(|e| Error::Config(format!("cell {}: {e}", cell.name)))?;
                out.push((format!("{}-s{seed}", cell.name), cfg));
            }
        }
        Ok(out)
    }
}

/// Scheduler rows of the overfitting comparison.
pub fn overfitting_cells(p: f64, cutoff_iter: u64) -> Vec<Cell> {
    let spec = |kind, direction, cutoff, cycles| ScheduleSpec {
        kind,
        p_base: p,
        direction,
        cutoff_iter: cutoff,
        cycles,
    };
    vec![
        Cell {
            name: "no_dropout".into(),
            schedule: ScheduleSpec::constant(0.0),
        },
        Cell {
            name: "constant".into(),
            schedule: ScheduleSpec::constant(p),
        },
        Cell {
            name: "linear_increasing".into(),
            schedule: spec(ScheduleKind::Linear, Some(Direction::Increasing), None, None),
        },
        Cell {
            name: "early_linear_increasing".into(),
            schedule: spec(
                ScheduleKind::LinearEarly,
                Some(Direction::Increasing),
                Some(cutoff_iter),
                None,
            ),
        },
        Cell {
            name: "stepped_late".into(),
            schedule: spec(ScheduleKind::SteppedLate, None, Some(cutoff_iter), None),
        },
        Cell {
            name: "triangular".into(),
            schedule: spec(ScheduleKind::Triangular, None, None, Some(3)),
        },
    ]
}
