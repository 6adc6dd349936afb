//! Dropout and dropout-ratio schedules.
//!
//! # Scaling
//!
//! Training-mode dropout here is *inverted*: kept activations are multiplied
//! by `1 / (1 - p)`, so `E[dropout(x)] = x` for every `p`. The plain
//! `m * x` form (no rescale) makes the expected activation depend on `p`,
//! and every schedule below changes `p` during a run; with the rescale,
//! changing `p` changes only the noise, not the activation scale. Eval mode
//! is the exact identity.
//!
//! # Schedules
//!
//! A [`DropoutSchedule`] maps an iteration `t` in `[0, total_iters]` to a
//! ratio in `[0, p_base]`:
//!
//! | kind | ratio(t) |
//! |---|---|
//! | `constant` | `p_base` |
//! | `linear` | decreasing `p_base (1 - t/T)`; increasing `p_base t/T` |
//! | `linear_early` | decreasing `p_base max(0, 1 - t/c)`; increasing `p_base min(1, t/c)` |
//! | `stepped_early` | `p_base` for `t < c`, else 0 |
//! | `stepped_late` | 0 for `t < c`, else `p_base` |
//! | `triangular` | `cycles` equal triangle waves, each rising 0 → `p_base` over its first half and falling back to 0 |
//! | `annealed_deterministic` | `p_base max(0, 1 - t/c)`, the fraction of units still disabled |
//!
//! `T` is `total_iters`, `c` is `cutoff_iter`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{domain, Rng};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Linear,
    LinearEarly,
    SteppedEarly,
    SteppedLate,
    Triangular,
    AnnealedDeterministic,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 7] = [
        ScheduleKind::Constant,
        ScheduleKind::Linear,
        ScheduleKind::LinearEarly,
        ScheduleKind::SteppedEarly,
        ScheduleKind::SteppedLate,
        ScheduleKind::Triangular,
        ScheduleKind::AnnealedDeterministic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Linear => "linear",
            ScheduleKind::LinearEarly => "linear_early",
            ScheduleKind::SteppedEarly => "stepped_early",
            ScheduleKind::SteppedLate => "stepped_late",
            ScheduleKind::Triangular => "triangular",
            ScheduleKind::AnnealedDeterministic => "annealed_deterministic",
        }
    }

    fn needs_cutoff(self) -> bool {
        matches!(
            self,
            ScheduleKind::LinearEarly
                | ScheduleKind::SteppedEarly
                | ScheduleKind::SteppedLate
                | ScheduleKind::AnnealedDeterministic
        )
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("schedule.kind: unknown kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increasing,
    Decreasing,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "increasing" => Ok(Direction::Increasing),
            "decreasing" => Ok(Direction::Decreasing),
            _ => Err(Error::Config(format!("schedule.direction: unknown direction {s:?}"))),
        }
    }
}

/// Schedule as written in a run config; the iteration budget comes from
/// the training section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub p_base: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff_iter: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles: Option<u32>,
}

impl ScheduleSpec {
    pub fn constant(p_base: f64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            p_base,
            direction: None,
            cutoff_iter: None,
            cycles: None,
        }
    }

    /// Short human-readable descriptor, e.g. `linear_early(increasing, p=0.1, c=5000)`.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if let Some(d) = self.direction {
            parts.push(match d {
                Direction::Increasing => "increasing".to_string(),
                Direction::Decreasing => "decreasing".to_string(),
            });
        }
        parts.push(format!("p={}", self.p_base));
        if let Some(c) = self.cutoff_iter {
            parts.push(format!("c={c}"));
        }
        if let Some(n) = self.cycles {
            parts.push(format!("cycles={n}"));
        }
        format!("{}({})", self.kind.name(), parts.join(", "))
    }
}

/// Triangle cycles when `cycles` is unset.
pub const DEFAULT_CYCLES: u32 = 3;

/// A validated schedule bound to an iteration budget.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutSchedule {
    kind: ScheduleKind,
    p_base: f64,
    direction: Direction,
    cutoff_iter: u64,
    cycles: u32,
    total_iters: u64,
}

impl DropoutSchedule {
    pub fn new(spec: &ScheduleSpec, total_iters: u64) -> Result<Self> {
        let field = |name: &str, why: &str| Error::Config(format!("schedule.{name}: {why}"));
        if total_iters == 0 {
            return Err(field("total_iters", "must be positive"));
        }
        if !(0.0..=1.0).contains(&spec.p_base) {
            return Err(field("p_base", &format!("{} is outside [0, 1]", spec.p_base)));
        }
        let direction = match (spec.kind, spec.direction) {
            (ScheduleKind::Linear | ScheduleKind::LinearEarly, None) => {
                return Err(field(
                    "direction",
                    &format!("required for kind {}", spec.kind.name()),
                ))
            }
            (_, d) => d.unwrap_or(Direction::Decreasing),
        };
        let cutoff_iter = match (spec.kind.needs_cutoff(), spec.cutoff_iter) {
            (true, None) => {
                return Err(field(
                    "cutoff_iter",
                    &format!("required for kind {}", spec.kind.name()),
                ))
            }
            (_, Some(c)) if c > total_iters => {
                return Err(field(
                    "cutoff_iter",
                    &format!("{c} exceeds total_iters {total_iters}"),
                ))
            }
            (_, c) => c.unwrap_or(0),
        };
        let cycles = spec.cycles.unwrap_or(DEFAULT_CYCLES);
        if cycles == 0 {
            return Err(field("cycles", "must be positive"));
        }
        Ok(Self {
            kind: spec.kind,
            p_base: spec.p_base,
            direction,
            cutoff_iter,
            cycles,
            total_iters,
        })
    }

    pub fn constant(p_base: f64, total_iters: u64) -> Result<Self> {
        Self::new(&ScheduleSpec::constant(p_base), total_iters)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn p_base(&self) -> f64 {
        self.p_base
    }

    pub fn cutoff_iter(&self) -> u64 {
        self.cutoff_iter
    }

    pub fn total_iters(&self) -> u64 {
        self.total_iters
    }

    /// Dropout ratio at iteration `t`, `0 <= t <= total_iters`.
    pub fn ratio(&self, t: u64) -> Result<f64> {
        let total = self.total_iters;
        if t > total {
            return Err(Error::Domain(format!(
                "iteration {t} outside schedule range [0, {total}]"
            )));
        }
        let p = self.p_base;
        let c = self.cutoff_iter;
        let frac = |num: u64, den: u64| num as f64 / den as f64;
        Ok(match self.kind {
            ScheduleKind::Constant => p,
            ScheduleKind::Linear => match self.direction {
                Direction::Decreasing => p * frac(total - t, total),
                Direction::Increasing => p * frac(t, total),
            },
            ScheduleKind::LinearEarly => {
                let done = if c == 0 { 1.0 } else { frac(t.min(c), c) };
                match self.direction {
                    Direction::Decreasing => p * (1.0 - done),
                    Direction::Increasing => p * done,
                }
            }
            ScheduleKind::SteppedEarly => {
                if t < c {
                    p
                } else {
                    0.0
                }
            }
            ScheduleKind::SteppedLate => {
                if t < c {
                    0.0
                } else {
                    p
                }
            }
            ScheduleKind::Triangular => {
                // Position inside the current cycle, in units of total/cycles.
                let n = self.cycles as u128;
                let big = total as u128;
                let pos = (t as u128 * n) % big;
                let dist = (2 * pos).abs_diff(big);
                p * ((big - dist) as f64 / big as f64)
            }
            ScheduleKind::AnnealedDeterministic => {
                if c == 0 {
                    0.0
                } else {
                    p * frac(c - t.min(c), c)
                }
            }
        })
    }

    /// `(t, ratio)` at `points` evenly spaced iterations from 0 to
    /// `total_iters` inclusive (`t_i = floor(i * T / (points - 1))`).
    pub fn preview(&self, points: usize) -> Vec<(u64, f64)> {
        let total = self.total_iters as u128;
        let n = points.max(2) as u128;
        (0..n)
            .map(|i| {
                let t = (i * total / (n - 1)) as u64;
                (t, self.ratio(t).expect("preview stays in range"))
            })
            .collect()
    }
}

/// How a dropout site behaves in training mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DropoutMode {
    /// Fresh Bernoulli mask per sample, layer and step; inverted scaling.
    Stochastic,
    /// Deterministic curriculum over units: a fixed unit order, with a
    /// growing prefix enabled as training proceeds. No sampling.
    DeterministicAnnealed {
        cutoff_iter: u64,
        p_base: f64,
        /// Scale kept units by `d / enabled` (off by default).
        rescale: bool,
    },
    Disabled,
}

/// Per-site dropout state. `layer_id` selects the site's mask stream.
#[derive(Clone, Debug)]
pub struct DropoutLayerState {
    pub mode: DropoutMode,
    pub current_p: f64,
    pub layer_id: u64,
    /// Unit enable order; only populated in annealed mode.
    pub unit_order: Vec<usize>,
}

impl DropoutLayerState {
    pub fn stochastic(layer_id: u64) -> Self {
        Self {
            mode: DropoutMode::Stochastic,
            current_p: 0.0,
            layer_id,
            unit_order: Vec::new(),
        }
    }

    pub fn disabled(layer_id: u64) -> Self {
        Self {
            mode: DropoutMode::Disabled,
            ..Self::stochastic(layer_id)
        }
    }

    /// Annealed state over `units` features. The unit order is a fixed
    /// permutation drawn from `(seed, layer_id)`.
    pub fn deterministic_annealed(
        layer_id: u64,
        units: usize,
        cutoff_iter: u64,
        p_base: f64,
        seed: u64,
    ) -> Self {
        let unit_order =
            Rng::keyed(seed, &[domain::UNIT_ORDER, layer_id]).permutation(units);
        Self {
            mode: DropoutMode::DeterministicAnnealed {
                cutoff_iter,
                p_base,
                rescale: false,
            },
            current_p: 0.0,
            layer_id,
            unit_order,
        }
    }

    pub fn for_mode(mode: DropoutMode, layer_id: u64, units: usize, seed: u64) -> Self {
        match mode {
            DropoutMode::Stochastic => Self::stochastic(layer_id),
            DropoutMode::Disabled => Self::disabled(layer_id),
            DropoutMode::DeterministicAnnealed {
                cutoff_iter,
                p_base,
                rescale,
            } => {
                let mut s = Self::deterministic_annealed(layer_id, units, cutoff_iter, p_base, seed);
                s.mode = DropoutMode::DeterministicAnnealed {
                    cutoff_iter,
                    p_base,
                    rescale,
                };
                s
            }
        }
    }

    /// Number of enabled units at iteration `t` in annealed mode:
    /// `ceil(f(t) * d)` with `f(t) = 1 - p_base * max(0, 1 - t / cutoff)`,
    /// which is `min(1, t / cutoff)` for `p_base = 1`.
    pub fn enabled_units(&self, t: u64) -> usize {
        let d = self.unit_order.len();
        match self.mode {
            DropoutMode::DeterministicAnnealed {
                cutoff_iter,
                p_base,
                ..
            } => {
                if cutoff_iter == 0 || t >= cutoff_iter {
                    return d;
                }
                let off = p_base * (cutoff_iter - t) as f64 / cutoff_iter as f64;
                let k = ((1.0 - off) * d as f64 - 1e-9).ceil();
                (k.max(0.0) as usize).min(d)
            }
            _ => d,
        }
    }
}

/// Mask key: masks are a pure function of `(seed, layer, step, sample)`.
#[derive(Clone, Copy, Debug)]
pub struct MaskKey {
    pub seed: u64,
    pub step: u64,
}

/// Inverted dropout on `x`, treating axis 0 as the sample axis (tensors of
/// rank < 2 are one sample). Identity when `!training`, `p == 0`, or the
/// site is disabled; annealed sites dispatch to
/// [`apply_deterministic_annealed`].
pub fn apply_dropout(
    tape: &mut Tape,
    x: Var,
    p: f64,
    state: &mut DropoutLayerState,
    training: bool,
    key: MaskKey,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("dropout ratio {p} outside [0, 1)")));
    }
    if p == 1.0 {
        return Err(Error::Domain(
            "dropout ratio 1 would zero the whole layer".into(),
        ));
    }
    state.current_p = p;
    if !training {
        return Ok(x);
    }
    match state.mode {
        DropoutMode::Disabled => Ok(x),
        DropoutMode::DeterministicAnnealed { .. } => {
            apply_deterministic_annealed(tape, x, key.step, state)
        }
        DropoutMode::Stochastic => {
            if p == 0.0 {
                return Ok(x);
            }
            let shape = tape.shape(x).to_vec();
            let (samples, per) = if shape.len() < 2 {
                (1, numel(&shape))
            } else {
                (shape[0], numel(&shape[1..]))
            };
            let keep = 1.0 / (1.0 - p);
            let mut mask = Vec::with_capacity(samples * per);
            for s in 0..samples {
                let mut rng = Rng::keyed(key.seed, &[domain::MASK, state.layer_id, key.step, s as u64]);
                mask.extend((0..per).map(|_| if rng.uniform() < p { 0.0 } else { keep }));
            }
            let mask = tape.constant(Tensor::new(&shape, mask)?);
            tape.mul(x, mask)
        }
    }
}

/// Deterministic annealed dropout over the last axis of `x`: the first
/// [`DropoutLayerState::enabled_units`] entries of `unit_order` pass
/// through, the rest are zeroed.
pub fn apply_deterministic_annealed(
    tape: &mut Tape,
    x: Var,
    t: u64,
    state: &DropoutLayerState,
) -> Result<Var> {
    let DropoutMode::DeterministicAnnealed { rescale, .. } = state.mode else {
        return Err(Error::State(
            "apply_deterministic_annealed on a non-annealed layer".into(),
        ));
    };
    let d = *tape
        .shape(x)
        .last()
        .ok_or_else(|| Error::Shape("annealed dropout on a scalar".into()))?;
    if d != state.unit_order.len() {
        return Err(Error::Shape(format!(
            "annealed dropout over {} units applied to last axis of size {d}",
            state.unit_order.len()
        )));
    }
    let k = state.enabled_units(t);
    if k == d {
        return Ok(x);
    }
    let value = if rescale && k > 0 { d as f64 / k as f64 } else { 1.0 };
    let mut mask = vec![0.0; d];
    for &u in &state.unit_order[..k] {
        mask[u] = value;
    }
    let mask = tape.constant(Tensor::vector(mask));
    tape.mul(x, mask)
}
