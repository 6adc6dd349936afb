use droplab::optim::{adamw_step, lr_at, AdamHyper, LrSchedule, Optimizer, OptimizerKind};
use droplab::{Error, Tensor};

const HP: AdamHyper = AdamHyper {
    beta1: 0.9,
    beta2: 0.999,
    eps: 1e-8,
    weight_decay: 0.0,
};

#[test]
fn zero_grad_leaves_params_and_decays_moments() {
    let mut w = vec![0.5, -2.0];
    let mut m = vec![1.0, -1.0];
    let mut v = vec![4.0, 2.0];
    adamw_step(&mut w, &[0.0, 0.0], &mut m, &mut v, 5, 0.1, &AdamHyper { beta1: 0.5, beta2: 0.25, ..HP });
    assert_eq!(m, [0.5, -0.5]);
    assert_eq!(v, [1.0, 0.5]);
    // Moments persist, so parameters still move unless they are zero.
    let mut w0 = vec![0.5, -2.0];
    let mut m0 = vec![0.0, 0.0];
    let mut v0 = vec![0.0, 0.0];
    adamw_step(&mut w0, &[0.0, 0.0], &mut m0, &mut v0, 1, 0.1, &HP);
    assert_eq!(w0, [0.5, -2.0]);
    assert!(w.iter().all(|x| x.is_finite()));
}

#[test]
fn first_step_hand_value() {
    // Bias correction makes mhat = g and vhat = g^2 at step 1.
    let mut w = vec![1.0];
    let (mut m, mut v) = (vec![0.0], vec![0.0]);
    adamw_step(&mut w, &[1.0], &mut m, &mut v, 1, 0.1, &HP);
    let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    assert!((w[0] - expected).abs() < 1e-15);
    assert!((w[0] - 0.9).abs() < 1e-8);
}

#[test]
fn decoupled_decay_acts_alone() {
    let mut w = vec![2.0, -4.0];
    let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
    let hp = AdamHyper {
        weight_decay: 0.1,
        ..HP
    };
    adamw_step(&mut w, &[0.0, 0.0], &mut m, &mut v, 1, 0.01, &hp);
    assert_eq!(w, [2.0 * (1.0 - 0.01 * 0.1), -4.0 * (1.0 - 0.01 * 0.1)]);
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

#[test]
fn optimizer_decays_matrices_only() {
    let mut params = vec![Tensor::ones(&[2, 2]), Tensor::ones(&[2])];
    let hp = AdamHyper {
        weight_decay: 0.5,
        ..HP
    };
    let mut opt = Optimizer::new(OptimizerKind::Adamw, hp, 0.0, None, &params);
    let mut grads = vec![vec![0.0; 4], vec![0.0; 2]];
    opt.step(&names(2), &mut params, &mut grads, 1, 0.1).unwrap();
    assert!(params[0].data().iter().all(|&x| x == 0.95));
    assert!(params[1].data().iter().all(|&x| x == 1.0));
}

#[test]
fn non_finite_gradient_names_parameter_and_changes_nothing() {
    let mut params = vec![Tensor::ones(&[3]), Tensor::ones(&[2])];
    let before = params.clone();
    let mut opt = Optimizer::new(OptimizerKind::Adamw, HP, 0.0, None, &params);
    let mut grads = vec![vec![0.1; 3], vec![0.0, f64::NAN]];
    let names = vec!["h0.attn.bq".to_string(), "final.ln.b".to_string()];
    match opt.step(&names, &mut params, &mut grads, 7, 0.1) {
        Err(Error::NonFiniteGrad { param, step }) => {
            assert_eq!(param, "final.ln.b");
            assert_eq!(step, 7);
        }
        other => panic!("expected non-finite gradient error, got {other:?}"),
    }
    assert_eq!(params, before);
}

#[test]
fn gradient_clipping_bounds_global_norm() {
    let mut params = vec![Tensor::zeros(&[2])];
    let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, HP, 0.0, Some(1.0), &params);
    let mut grads = vec![vec![3.0, 4.0]];
    opt.step(&names(1), &mut params, &mut grads, 1, 1.0).unwrap();
    assert!((params[0].data()[0] + 0.6).abs() < 1e-15);
    assert!((params[0].data()[1] + 0.8).abs() < 1e-15);
}

#[test]
fn sgd_momentum_accumulates_velocity() {
    let mut params = vec![Tensor::zeros(&[1])];
    let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, HP, 0.5, None, &params);
    for step in 1..=2 {
        let mut grads = vec![vec![1.0]];
        opt.step(&names(1), &mut params, &mut grads, step, 0.1).unwrap();
    }
    // v1 = 1, v2 = 1.5; w = -0.1 - 0.15
    assert!((params[0].data()[0] + 0.25).abs() < 1e-15);
    assert!(opt.state.v.is_empty());
}

#[test]
fn lr_schedules() {
    assert_eq!(lr_at(LrSchedule::Constant, 0.1, 0.1, 0, 100, 50), 0.1);
    let cos = |t| lr_at(LrSchedule::Cosine, 1.0, 0.0, 0, 100, t);
    assert!((cos(50) - 0.5).abs() < 1e-12);
    assert!(cos(100).abs() < 1e-12);
    for t in 1..100 {
        assert!(cos(t + 1) <= cos(t));
    }
    let wc = |t| lr_at(LrSchedule::WarmupCosine, 2.0, 0.1, 4, 104, t);
    assert_eq!(wc(1), 0.5);
    assert_eq!(wc(4), 2.0);
    assert!((wc(104) - 0.2).abs() < 1e-12);
}
