use std::path::Path;

use droplab::config::{Cell, ExperimentMatrix, RunConfig};
use droplab::dropout::ScheduleSpec;
use droplab::Error;

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn parse_serialize_parse_is_identity() {
    let mut files: Vec<_> = std::fs::read_dir(configs_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.to_string_lossy().contains("matrix") && !p.to_string_lossy().contains("schedules"))
        .collect();
    files.sort();
    assert!(files.len() >= 3);
    for f in files {
        let cfg = RunConfig::load(&f).unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg, "{}", f.display());
        assert_eq!(again.to_toml(), cfg.to_toml());
    }
    let d = RunConfig::default();
    assert_eq!(RunConfig::from_toml(&d.to_toml()).unwrap(), d);
    assert_eq!(RunConfig::from_toml("").unwrap(), d);
}

#[test]
fn hash_ignores_key_order() {
    let a = "[train]\nlr = 0.001\nseed = 4\n[model]\nd_model = 64\nn_heads = 2\n";
    let b = "[model]\nn_heads = 2\nd_model = 64\n\n[train]\nseed = 4\nlr = 1e-3\n";
    let ca = RunConfig::from_toml(a).unwrap();
    let cb = RunConfig::from_toml(b).unwrap();
    assert_eq!(ca.hash(), cb.hash());
    assert_ne!(ca.hash(), RunConfig::default().hash());
}

#[test]
fn every_unknown_key_is_listed() {
    let text = "bogus = 1\n[train]\nlr = 0.1\nlearning_rate = 0.1\n[model]\nwidth = 3\n[extra]\nx = 1\n";
    match RunConfig::from_toml(text) {
        Err(Error::UnknownKeys(keys)) => {
            assert_eq!(keys, ["bogus", "extra", "model.width", "train.learning_rate"]);
        }
        other => panic!("expected unknown keys, got {other:?}"),
    }
}

#[test]
fn invalid_schedule_names_the_field() {
    let text = "[schedule]\nkind = \"stepped_early\"\np_base = 0.1\n";
    let err = RunConfig::from_toml(text).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("schedule.cutoff_iter"), "{err}");
}

#[test]
fn diff_lists_changed_leaves() {
    let a = RunConfig::default();
    let mut b = a.clone();
    b.train.lr = 1e-3;
    b.schedule.cutoff_iter = Some(7);
    let diff = b.diff(&a);
    assert_eq!(diff.len(), 2, "{diff:?}");
    assert!(diff.iter().any(|d| d.starts_with("train.lr: 0.001 -> 0.0003")));
    assert!(diff.iter().any(|d| d.starts_with("schedule.cutoff_iter: 7 -> (unset)")));
}

#[test]
fn documented_keys_cover_the_default_file() {
    let keys: Vec<String> = RunConfig::documented_keys().into_iter().map(|(k, _)| k).collect();
    let toml = RunConfig::default().to_toml();
    let mut section = String::new();
    for line in toml.lines() {
        if let Some(s) = line.strip_prefix('[') {
            section = s.trim_end_matches(']').to_string();
        } else if let Some((k, _)) = line.split_once(" = ") {
            let full = format!("{section}.{k}");
            assert!(keys.contains(&full), "{full} undocumented");
        }
    }
    for k in ["schedule.direction", "schedule.cutoff_iter", "schedule.cycles"] {
        assert!(keys.contains(&k.to_string()));
    }
}

#[test]
fn shipped_matrices_expand() {
    let m = ExperimentMatrix::load(&configs_dir().join("overfit-scaled-matrix.toml")).unwrap();
    let runs = m.expand().unwrap();
    assert_eq!(runs.len(), 18);
    assert_eq!(runs[0].0, "no_dropout-s0");
    assert_eq!(runs[17].0, "triangular-s2");
    assert_eq!(runs[4].1.train.seed, 1);
    let full = ExperimentMatrix::load(&configs_dir().join("desk-matrix.toml")).unwrap();
    assert_eq!(full.expand().unwrap().len(), 18);
    assert_eq!(
        ExperimentMatrix::load(&configs_dir().join("underfit-schedules.toml"))
            .unwrap()
            .expand()
            .unwrap()
            .len(),
        5
    );
}

#[test]
fn matrix_rejects_duplicates() {
    let cell = Cell {
        name: "a".into(),
        schedule: ScheduleSpec::constant(0.0),
    };
    assert!(ExperimentMatrix::new(RunConfig::default(), vec![0], vec![cell.clone(), cell]).is_err());
}
