//! Central finite-difference gradient checking.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{self, ForwardOptions, ModelConfig, ModelParams};
use crate::rng::{domain, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so exact zeros on both sides
/// compare as absolute differences.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    /// `Err` naming the worst entry when the tolerance is breached.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::GradCheck(format!(
                "{}[{}]: analytic {:e} vs numeric {:e}, relative error {:e} >= {:e}",
                self.worst_param,
                self.worst_index,
                self.analytic,
                self.numeric,
                self.max_rel_error,
                self.tolerance
            )))
        }
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(DENOM_FLOOR)
}

/// Checks `build` (which must return a scalar) against central differences
/// with step `h` on every entry of every input.
pub fn grad_check<F>(
    names: &[String],
    inputs: &[Tensor],
    build: F,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if names.len() != inputs.len() {
        return Err(Error::Shape(format!(
            "{} names for {} inputs",
            names.len(),
            inputs.len()
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut work = inputs.to_vec();
    finite_differences(names, &mut work, &analytic, h, tolerance, |xs| eval(xs))
}

fn finite_differences(
    names: &[String],
    work: &mut [Tensor],
    analytic: &[Vec<f64>],
    h: f64,
    tolerance: f64,
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: names.first().cloned().unwrap_or_default(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tolerance,
    };
    for k in 0..work.len() {
        for i in 0..work[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k][i];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_param = names[k].clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Gradient check of the language-model loss on every parameter of a
/// freshly initialized model, on one random minibatch of `batch` sequences
/// of full context length, with dropout at p = 0.
pub fn grad_check_model(
    config: &ModelConfig,
    batch: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let params = ModelParams::init(config, seed)?;
    let seq = config.context_len;
    let mut rng = Rng::keyed(seed, &[domain::PROBE, 0]);
    let draw = |rng: &mut Rng| -> Vec<usize> {
        (0..batch * seq)
            .map(|_| rng.below(config.vocab_size as u64) as usize)
            .collect()
    };
    let tokens = draw(&mut rng);
    let targets = draw(&mut rng);
    grad_check_params(
        &params,
        &tokens,
        &targets,
        batch,
        seq,
        &ForwardOptions::train(0.0, 1, seed),
        tolerance,
    )
}

/// Gradient check of the loss at `params` on a given minibatch.
pub fn grad_check_params(
    params: &ModelParams,
    tokens: &[usize],
    targets: &[usize],
    batch: usize,
    seq: usize,
    opts: &ForwardOptions,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = model::loss_and_grads(params, tokens, targets, batch, seq, opts)?;
    let mut work = params.clone();
    let mut tensors = work.tensors().to_vec();
    let names = params.names().to_vec();
    finite_differences(
        &names,
        &mut tensors,
        &analytic,
        DEFAULT_STEP,
        tolerance,
        |xs| {
            work.tensors_mut().clone_from_slice(xs);
            let mut f = model::forward(&work, tokens, batch, seq, opts, false)?;
            let l = model::loss(&mut f.tape, f.logits, targets)?;
            f.tape.value(l).item()
        },
    )
}
