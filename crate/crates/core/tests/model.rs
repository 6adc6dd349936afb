use std::collections::BTreeSet;

use droplab::dropout::DropoutMode;
use droplab::gradcheck::{grad_check_model, grad_check_params};
use droplab::model::{
    cross_entropy, forward, DropoutSite, ForwardOptions, ModelConfig, ModelParams,
};
use droplab::{Rng, Tensor};

fn small(d: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        context_len: 6,
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        d_ff: 2 * d,
        ..ModelConfig::default()
    }
}

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed, 0);
    (0..n).map(|_| rng.below(vocab as u64) as usize).collect()
}

fn logits(params: &ModelParams, toks: &[usize], batch: usize, seq: usize, opts: &ForwardOptions) -> Tensor {
    let f = forward(params, toks, batch, seq, opts, false).unwrap();
    f.tape.value(f.logits).clone()
}

#[test]
fn loss_examples() {
    let uniform = Tensor::zeros(&[1, 4]);
    assert!((cross_entropy(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-15);

    let sharp = Tensor::new(&[1, 4], vec![0.0, 20.0, 0.0, 0.0]).unwrap();
    assert!(cross_entropy(&sharp, &[1]).unwrap() < 1e-6);

    // Row 1: softmax(1, 2, 3)[2]; row 2: softmax(0, ln 3, 0)[0] = 1/5.
    let rows = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 0.0, 3f64.ln(), 0.0]).unwrap();
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    let expected = (-(3f64.exp() / z).ln() - (0.2f64).ln()) / 2.0;
    assert!((cross_entropy(&rows, &[2, 0]).unwrap() - expected).abs() < 1e-14);

    assert!(cross_entropy(&rows, &[2]).is_err());
}

#[test]
fn output_shape_and_initial_loss() {
    let cfg = ModelConfig {
        context_len: 16,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, 3).unwrap();
    let toks = tokens(2 * 16, cfg.vocab_size, 1);
    let targets = tokens(2 * 16, cfg.vocab_size, 2);
    let mut f = forward(&params, &toks, 2, 16, &ForwardOptions::eval(), false).unwrap();
    assert_eq!(f.tape.shape(f.logits), &[2, 16, cfg.vocab_size]);
    let l = droplab::model::loss(&mut f.tape, f.logits, &targets).unwrap();
    let loss = f.tape.value(l).item().unwrap();
    let ln_v = (cfg.vocab_size as f64).ln();
    assert!((loss - ln_v).abs() < 0.05 * ln_v, "initial loss {loss} vs ln V {ln_v}");
}

#[test]
fn p_zero_training_matches_eval_bitwise() {
    let cfg = small(8, 2);
    let params = ModelParams::init(&cfg, 5).unwrap();
    let toks = tokens(12, cfg.vocab_size, 7);
    let eval = logits(&params, &toks, 2, 6, &ForwardOptions::eval());
    let train = logits(&params, &toks, 2, 6, &ForwardOptions::train(0.0, 17, 99));
    assert_eq!(eval, train);
    assert_eq!(eval, logits(&params, &toks, 2, 6, &ForwardOptions::eval()));
}

#[test]
fn dropout_changes_training_forward_only() {
    let cfg = ModelConfig {
        dropout_sites: [
            DropoutSite::EmbeddingOutput,
            DropoutSite::AttentionOutput,
            DropoutSite::MlpOutput,
        ]
        .into_iter()
        .collect(),
        ..small(8, 2)
    };
    let params = ModelParams::init(&cfg, 5).unwrap();
    let toks = tokens(12, cfg.vocab_size, 7);
    let eval = logits(&params, &toks, 2, 6, &ForwardOptions::eval());
    let train = logits(&params, &toks, 2, 6, &ForwardOptions::train(0.3, 1, 1));
    assert_ne!(eval, train);
    let replay = logits(&params, &toks, 2, 6, &ForwardOptions::train(0.3, 1, 1));
    assert_eq!(train, replay);
}

#[test]
fn empty_dropout_sites_make_training_equal_eval() {
    let cfg = ModelConfig {
        dropout_sites: BTreeSet::new(),
        ..small(8, 2)
    };
    let params = ModelParams::init(&cfg, 5).unwrap();
    let toks = tokens(12, cfg.vocab_size, 7);
    let eval = logits(&params, &toks, 2, 6, &ForwardOptions::eval());
    for p in [0.1, 0.5, 0.9] {
        assert_eq!(eval, logits(&params, &toks, 2, 6, &ForwardOptions::train(p, 3, 4)));
    }
}

#[test]
fn dropout_after_residual_is_a_different_placement() {
    let base = small(8, 1);
    let after = ModelConfig {
        attention_dropout_after_residual: true,
        ..base.clone()
    };
    let toks = tokens(6, base.vocab_size, 2);
    let opts = ForwardOptions::train(0.5, 1, 1);
    let a = logits(&ModelParams::init(&base, 1).unwrap(), &toks, 1, 6, &opts);
    let b = logits(&ModelParams::init(&after, 1).unwrap(), &toks, 1, 6, &opts);
    assert_ne!(a, b);
    let eval_a = logits(&ModelParams::init(&base, 1).unwrap(), &toks, 1, 6, &ForwardOptions::eval());
    let eval_b = logits(&ModelParams::init(&after, 1).unwrap(), &toks, 1, 6, &ForwardOptions::eval());
    assert_eq!(eval_a, eval_b);
}

#[test]
fn causality_probe() {
    let cfg = small(8, 2);
    let params = ModelParams::init(&cfg, 11).unwrap();
    let seq = 6;
    let v = cfg.vocab_size;
    let base = tokens(seq, v, 3);
    let reference = logits(&params, &base, 1, seq, &ForwardOptions::eval());
    for j in 0..seq {
        let mut probe = base.clone();
        probe[j] = (probe[j] + 1) % v;
        let out = logits(&params, &probe, 1, seq, &ForwardOptions::eval());
        assert_eq!(out.data()[..j * v], reference.data()[..j * v], "position {j} leaks backwards");
        assert_ne!(out.data()[j * v..(j + 1) * v], reference.data()[j * v..(j + 1) * v]);
    }
}

#[test]
fn annealed_mode_runs_through_the_model() {
    let cfg = small(8, 1);
    let params = ModelParams::init(&cfg, 1).unwrap();
    let toks = tokens(6, cfg.vocab_size, 2);
    let mode = DropoutMode::DeterministicAnnealed {
        cutoff_iter: 10,
        p_base: 1.0,
        rescale: false,
    };
    let at = |step| {
        let opts = ForwardOptions {
            mode,
            ..ForwardOptions::train(0.0, step, 4)
        };
        logits(&params, &toks, 1, 6, &opts)
    };
    let eval = logits(&params, &toks, 1, 6, &ForwardOptions::eval());
    assert_ne!(at(3), eval);
    assert_eq!(at(10), eval);
}

#[test]
fn two_layer_d32_full_gradient_check() {
    let cfg = ModelConfig {
        vocab_size: 11,
        context_len: 4,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let report = grad_check_model(&cfg, 2, 1, 1e-4).unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.checked, droplab::model::param_count(&cfg));
}

#[test]
fn gradient_check_holds_for_every_site_configuration() {
    let all = [
        DropoutSite::EmbeddingOutput,
        DropoutSite::AttentionOutput,
        DropoutSite::MlpOutput,
    ];
    for mask in 0..8u32 {
        let sites: BTreeSet<_> = all
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, s)| *s)
            .collect();
        let cfg = ModelConfig {
            dropout_sites: sites,
            tied_head: mask % 2 == 0,
            ..small(4, 1)
        };
        let report = grad_check_model(&cfg, 1, u64::from(mask), 1e-4).unwrap();
        assert!(report.passed(), "sites {mask:03b}: {report:?}");
    }
}

#[test]
fn gradient_check_with_active_dropout() {
    // Masks are a function of (seed, step), so the loss is a deterministic
    // function of the parameters and finite differences still apply.
    let cfg = ModelConfig {
        dropout_sites: [DropoutSite::EmbeddingOutput, DropoutSite::MlpOutput]
            .into_iter()
            .collect(),
        ..small(8, 1)
    };
    let params = ModelParams::init(&cfg, 2).unwrap();
    let toks = tokens(12, cfg.vocab_size, 4);
    let targets = tokens(12, cfg.vocab_size, 5);
    let opts = ForwardOptions::train(0.3, 9, 9);
    let report = grad_check_params(&params, &toks, &targets, 2, 6, &opts, 1e-4).unwrap();
    assert!(report.passed(), "{report:?}");
}
