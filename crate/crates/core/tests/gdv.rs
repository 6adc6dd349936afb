use std::path::Path;

use droplab::config::{GdvGrouping, InstrumentationConfig, RunConfig};
use droplab::data::Corpus;
use droplab::gdv::{gdv, gdv_probe_batches, layer_groups, probe_batches};
use droplab::model::{ModelConfig, ModelParams};
use droplab::Rng;
use proptest::prelude::*;

fn naive(per_layer: &[Vec<Vec<f64>>]) -> f64 {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let mut total = 0.0;
    for layer in per_layer {
        let units: Vec<Vec<f64>> = layer.iter().map(unit).collect();
        let g = units.len();
        for i in 0..g {
            for j in 0..g {
                if i != j {
                    total += units[i].iter().zip(&units[j]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
    let g = per_layer[0].len() as f64;
    total / (per_layer.len() as f64 * g * (g - 1.0))
}

fn random_instance(rng: &mut Rng) -> Vec<Vec<Vec<f64>>> {
    let layers = 1 + rng.below(4) as usize;
    let g = 2 + rng.below(6) as usize;
    (0..layers)
        .map(|_| {
            let n = 1 + rng.below(20) as usize;
            (0..g).map(|_| (0..n).map(|_| rng.normal()).collect()).collect()
        })
        .collect()
}

#[test]
fn closed_forms() {
    let same = vec![vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![0.5, 1.0]]];
    assert!((gdv(&same, false).unwrap().gdv - 1.0).abs() < 1e-12);
    let opposite = vec![vec![vec![1.0, -3.0], vec![-2.0, 6.0]]];
    assert!((gdv(&opposite, false).unwrap().gdv + 1.0).abs() < 1e-12);
    let basis = vec![vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]];
    assert!(gdv(&basis, false).unwrap().gdv.abs() < 1e-12);
    // Two aligned and one opposed: (2 * 1 + 4 * -1) / 6.
    let mixed = vec![vec![vec![1.0], vec![1.0], vec![-1.0]]];
    assert!((gdv(&mixed, false).unwrap().gdv + 1.0 / 3.0).abs() < 1e-12);
    // 45 degrees.
    let diag = vec![vec![vec![1.0, 0.0], vec![1.0, 1.0]]];
    assert!((gdv(&diag, false).unwrap().gdv - 0.5f64.sqrt()).abs() < 1e-12);
    // Layer mean: one aligned layer, one opposed layer.
    let two = vec![vec![vec![1.0], vec![2.0]], vec![vec![1.0], vec![-2.0]]];
    let v = gdv(&two, false).unwrap();
    assert_eq!(v.per_layer, [1.0, -1.0]);
    assert!(v.gdv.abs() < 1e-12);
}

#[test]
fn matches_naive_reference_on_random_instances() {
    let mut rng = Rng::new(11, 0);
    for _ in 0..100 {
        let inst = random_instance(&mut rng);
        let v = gdv(&inst, false).unwrap();
        assert!((v.gdv - naive(&inst)).abs() < 1e-12);
        let mean = v.per_layer.iter().sum::<f64>() / v.per_layer.len() as f64;
        assert!((v.gdv - mean).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn scale_and_permutation_invariant(seed in 0u64..10_000, scale in 1e-3f64..1e3) {
        let mut rng = Rng::new(seed, 1);
        let inst = random_instance(&mut rng);
        let base = gdv(&inst, false).unwrap().gdv;
        prop_assert!((-1.0..=1.0).contains(&base));
        let scaled: Vec<Vec<Vec<f64>>> = inst
            .iter()
            .map(|l| l.iter().enumerate().map(|(i, v)| v.iter().map(|x| x * scale * (i + 1) as f64).collect()).collect())
            .collect();
        prop_assert!((gdv(&scaled, false).unwrap().gdv - base).abs() < 1e-12);
        let mut permuted = inst.clone();
        for l in permuted.iter_mut() {
            l.reverse();
        }
        permuted.reverse();
        prop_assert!((gdv(&permuted, false).unwrap().gdv - base).abs() < 1e-12);
    }
}

#[test]
fn zero_gradient_is_an_error_unless_skipped() {
    let inst = vec![vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0]]];
    let err = gdv(&inst, false).unwrap_err();
    assert!(err.to_string().contains("zero norm"), "{err}");
    let v = gdv(&inst, true).unwrap();
    assert!((v.gdv - 1.0).abs() < 1e-12);
    assert!(gdv(&[vec![vec![1.0]]], false).is_err());
    assert!(gdv(&[vec![vec![0.0], vec![0.0]]], true).is_err());
}

fn small_model() -> ModelConfig {
    ModelConfig {
        context_len: 16,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        ..ModelConfig::default()
    }
}

fn corpus() -> Corpus {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../corpora/small");
    Corpus::from_dir(Path::new(dir)).unwrap()
}

#[test]
fn duplicated_minibatch_gives_one() {
    let params = ModelParams::init(&small_model(), 3).unwrap();
    let b = probe_batches(&corpus(), 16, 2, 1, 0).unwrap().remove(0);
    let snap = gdv_probe_batches(&params, &[b.clone(), b], 0.0, 0, 0, &InstrumentationConfig::default()).unwrap();
    assert!((snap.gdv - 1.0).abs() < 1e-12, "{}", snap.gdv);
    assert_eq!(snap.num_minibatches, 2);
}

#[test]
fn probe_reads_parameters_only() {
    let params = ModelParams::init(&small_model(), 3).unwrap();
    let before = params.digest();
    let batches = probe_batches(&corpus(), 16, 2, 4, 0).unwrap();
    let inst = InstrumentationConfig::default();
    let a = gdv_probe_batches(&params, &batches, 0.1, 0, 0, &inst).unwrap();
    assert_eq!(params.digest(), before);
    let b = gdv_probe_batches(&params, &batches, 0.1, 0, 0, &inst).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_layer.len(), 4);
    assert_eq!(
        a.per_layer.iter().map(|l| l.layer.as_str()).collect::<Vec<_>>(),
        ["embed", "h0", "h1", "final"]
    );
}

#[test]
fn grouping_flags() {
    let params = ModelParams::init(&small_model(), 3).unwrap();
    let names = params.names();
    let per_tensor = layer_groups(names, GdvGrouping::PerTensor, true);
    assert_eq!(per_tensor.len(), names.len());
    let no_embed = layer_groups(names, GdvGrouping::PerBlock, false);
    assert_eq!(no_embed.len(), 3);
    let covered: usize = layer_groups(names, GdvGrouping::PerBlock, true).iter().map(|(_, i)| i.len()).sum();
    assert_eq!(covered, names.len());
}

#[test]
fn desk_model_dropout_changes_gdv() {
    let cfg = RunConfig::default();
    let params = ModelParams::init(&cfg.model, 0).unwrap();
    let batches = probe_batches(&corpus(), cfg.model.context_len, 2, 4, 0).unwrap();
    let inst = InstrumentationConfig::default();
    let off = gdv_probe_batches(&params, &batches, 0.0, 0, 0, &inst).unwrap();
    let on = gdv_probe_batches(&params, &batches, 0.1, 0, 0, &inst).unwrap();
    eprintln!("random-init desk model: gdv off {:.6}, on {:.6}", off.gdv, on.gdv);
    assert_ne!(off.gdv, on.gdv);
    assert!((-1.0..=1.0).contains(&off.gdv) && (-1.0..=1.0).contains(&on.gdv));
}

#[test]
fn two_minibatches_suffice() {
    let params = ModelParams::init(&small_model(), 5).unwrap();
    let batches = probe_batches(&corpus(), 16, 2, 2, 9).unwrap();
    let snap = gdv_probe_batches(&params, &batches, 0.0, 0, 0, &InstrumentationConfig::default()).unwrap();
    assert!((-1.0..=1.0).contains(&snap.gdv));
    let one = probe_batches(&corpus(), 16, 2, 1, 9).unwrap();
    assert!(gdv_probe_batches(&params, &one, 0.0, 0, 0, &InstrumentationConfig::default()).is_err());
}
