//! WebAssembly bindings behind `www/index.html`.
//!
//! Every export takes and returns plain numbers or flat `f64` arrays so the
//! page needs no glue beyond the generated module.

use droplab::autograd::Tape;
use droplab::dropout::{apply_dropout, DropoutLayerState, DropoutSchedule, MaskKey, ScheduleSpec};
use droplab::gdv::gdv;
use droplab::{Rng, Tensor};
use wasm_bindgen::prelude::*;

/// Schedule curve as interleaved `[t0, p0, t1, p1, ...]`. `cutoff` and
/// `cycles` of 0 mean unset; `direction` may be empty.
#[wasm_bindgen]
pub fn schedule_curve(
    kind: &str,
    p_base: f64,
    direction: &str,
    cutoff: u32,
    cycles: u32,
    total_iters: u32,
    points: u32,
) -> Result<Vec<f64>, String> {
    let spec = ScheduleSpec {
        kind: kind.parse().map_err(|e: droplab::Error| e.to_string())?,
        p_base,
        direction: if direction.is_empty() {
            None
        } else {
            Some(direction.parse().map_err(|e: droplab::Error| e.to_string())?)
        },
        cutoff_iter: (cutoff > 0).then_some(cutoff as u64),
        cycles: (cycles > 0).then_some(cycles),
    };
    let schedule = DropoutSchedule::new(&spec, total_iters as u64).map_err(|e| e.to_string())?;
    Ok(schedule
        .preview(points as usize)
        .into_iter()
        .flat_map(|(t, p)| [t as f64, p])
        .collect())
}

/// Inverted dropout applied to an all-ones vector of length `n`: kept units
/// read `1 / (1 - p)`, dropped units read 0.
#[wasm_bindgen]
pub fn dropout_sample(n: u32, p: f64, seed: u32, step: u32) -> Result<Vec<f64>, String> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[n as usize]));
    let mut state = DropoutLayerState::stochastic(0);
    let key = MaskKey {
        seed: seed as u64,
        step: step as u64,
    };
    let y = apply_dropout(&mut tape, x, p, &mut state, true, key).map_err(|e| e.to_string())?;
    Ok(tape.value(y).data().to_vec())
}

/// `[zero_fraction, mean]` of [`dropout_sample`].
#[wasm_bindgen]
pub fn dropout_stats(n: u32, p: f64, seed: u32, step: u32) -> Result<Vec<f64>, String> {
    let y = dropout_sample(n, p, seed, step)?;
    let len = y.len().max(1) as f64;
    let zeros = y.iter().filter(|&&v| v == 0.0).count() as f64;
    Ok(vec![zeros / len, y.iter().sum::<f64>() / len])
}

/// GDV of `minibatches` synthetic gradients in `dim` dimensions, each a
/// shared direction plus isotropic noise of relative size `noise`.
#[wasm_bindgen]
pub fn gdv_synthetic(minibatches: u32, dim: u32, noise: f64, seed: u32) -> Result<f64, String> {
    let mut rng = Rng::new(seed as u64, 0);
    let shared: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let grads: Vec<Vec<f64>> = (0..minibatches)
        .map(|_| {
            shared
                .iter()
                .map(|s| s + noise * rng.normal())
                .collect()
        })
        .collect();
    gdv(&[grads], false).map(|v| v.gdv).map_err(|e| e.to_string())
}
