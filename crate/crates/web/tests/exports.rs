use droplab_web::{dropout_sample, dropout_stats, gdv_synthetic, schedule_curve};

#[test]
fn curve_is_interleaved_and_exact() {
    let c = schedule_curve("triangular", 0.1, "", 0, 3, 30000, 1000).unwrap();
    assert_eq!(c.len(), 2000);
    assert_eq!((c[0], c[1]), (0.0, 0.0));
    assert_eq!(c[1998], 30000.0);
    let lin = schedule_curve("linear", 0.1, "decreasing", 0, 0, 30000, 3).unwrap();
    assert_eq!(lin, [0.0, 0.1, 15000.0, 0.05, 30000.0, 0.0]);
}

#[test]
fn bad_curve_input_names_the_field() {
    assert!(schedule_curve("wobbly", 0.1, "", 0, 0, 100, 10).unwrap_err().contains("schedule.kind"));
    assert!(schedule_curve("linear", 0.1, "sideways", 0, 0, 100, 10).unwrap_err().contains("schedule.direction"));
    assert!(schedule_curve("stepped_late", 0.1, "", 0, 0, 100, 10).unwrap_err().contains("cutoff_iter"));
}

#[test]
fn dropout_sample_is_inverted_and_replayable() {
    let y = dropout_sample(1000, 0.2, 1, 1).unwrap();
    assert!(y.iter().all(|&v| v == 0.0 || v == 1.25));
    assert_eq!(y, dropout_sample(1000, 0.2, 1, 1).unwrap());
    assert_ne!(y, dropout_sample(1000, 0.2, 1, 2).unwrap());
    let s = dropout_stats(100_000, 0.1, 3, 1).unwrap();
    assert!((s[0] - 0.1).abs() < 0.005 && (s[1] - 1.0).abs() < 0.01, "{s:?}");
    assert!(dropout_sample(10, 1.0, 0, 0).is_err());
}

#[test]
fn synthetic_gdv_falls_with_noise() {
    let quiet = gdv_synthetic(8, 64, 0.0, 1).unwrap();
    let mid = gdv_synthetic(8, 64, 1.0, 1).unwrap();
    let loud = gdv_synthetic(8, 64, 10.0, 1).unwrap();
    assert!((quiet - 1.0).abs() < 1e-12);
    assert!(quiet > mid && mid > loud, "{quiet} {mid} {loud}");
    assert!(gdv_synthetic(1, 64, 1.0, 1).is_err());
}
