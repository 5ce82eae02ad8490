//! The committed five-image fixture against constants worked out by hand in
//! `fixtures/fddb/README.md`.

use facedet::eval::{self, ellipse_to_box, parse_fddb_annotations, parse_fddb_detections, EvalReport};
use facedet::geometry::BBox;

const DISCRETE: [(usize, f64, f64); 9] = [
    (0, 1.0 / 8.0, 0.95),
    (0, 3.0 / 8.0, 0.9),
    (0, 4.0 / 8.0, 0.8),
    (0, 5.0 / 8.0, 0.7),
    (1, 5.0 / 8.0, 0.55),
    (2, 5.0 / 8.0, 0.5),
    (2, 6.0 / 8.0, 0.3),
    (3, 6.0 / 8.0, 0.25),
    (4, 6.0 / 8.0, 0.2),
];

const CONTINUOUS: [(usize, f64); 9] = [
    (0, 1.0 / 8.0),
    (0, 2.75 / 8.0),
    (0, 3.5 / 8.0),
    (0, 4.125 / 8.0),
    (1, 4.125 / 8.0),
    (2, 4.125 / 8.0),
    (2, 5.0 / 8.0),
    (3, 5.0 / 8.0),
    (4, 5.0 / 8.0),
];

const AP: f64 = 0.71875;

fn fixture(fp_at: usize) -> EvalReport {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/fddb");
    let ann = parse_fddb_annotations(&std::fs::read_to_string(format!("{dir}/ellipses.txt")).unwrap()).unwrap();
    let mut dets = parse_fddb_detections(&std::fs::read_to_string(format!("{dir}/detections.txt")).unwrap()).unwrap();
    let (mut d, mut g) = (Vec::new(), Vec::new());
    for (key, es) in ann {
        g.push(es.iter().map(ellipse_to_box).collect::<Vec<BBox>>());
        d.push(dets.remove(&key).unwrap_or_default());
    }
    assert!(dets.is_empty());
    eval::evaluate(&d, &g, 0.5, fp_at).unwrap()
}

#[test]
fn roc_points_are_exact() {
    let r = fixture(2000);
    let got: Vec<(usize, f64, f64)> = r
        .discrete
        .iter()
        .map(|p| (p.false_positives, p.true_positive_rate, p.score))
        .collect();
    assert_eq!(got, DISCRETE);
    let got: Vec<(usize, f64)> = r.continuous.iter().map(|p| (p.false_positives, p.true_positive_rate)).collect();
    assert_eq!(got, CONTINUOUS);
}

#[test]
fn ap_is_exact() {
    let r = fixture(2000);
    assert_eq!(r.summary.average_precision, AP);
    assert_eq!(r.summary.max_recall, 0.75);
    assert_eq!(r.summary.ground_truths, 8);
    assert_eq!(r.summary.detections, 10);
}

#[test]
fn discrete_dominates_continuous() {
    let r = fixture(2000);
    for (d, c) in r.discrete.iter().zip(&r.continuous) {
        assert_eq!(d.false_positives, c.false_positives);
        assert!(d.true_positive_rate >= c.true_positive_rate);
    }
}

#[test]
fn tpr_at_configurable_fp() {
    let r = fixture(2000);
    assert_eq!(r.summary.fp_at, 2000);
    assert_eq!(r.summary.discrete_tpr_at_fp, 0.75);
    assert_eq!(r.summary.continuous_tpr_at_fp, 0.625);
    let r = fixture(1);
    assert_eq!(r.summary.discrete_tpr_at_fp, 0.625);
    assert_eq!(r.summary.continuous_tpr_at_fp, 4.125 / 8.0);
    let r = fixture(0);
    assert_eq!(r.summary.discrete_tpr_at_fp, 0.625);
}
