//! Evaluation plumbing against a perfect oracle: feeding the ground truth
//! back as the prediction must score 1.0 on every metric, through the same
//! CSV writer the CLI uses.

use hfd_core::metrics::{write_eval_csv, ConfusionMatrix, MetricSummary};
use hfd_core::synthdata::{generate_dataset, GenConfig};

#[test]
fn identity_predictor_scores_one_everywhere() {
    let cfg = GenConfig {
        seed: 4,
        num_classes: 5,
        ..GenConfig::default()
    };
    let samples = generate_dataset(&cfg, 6).unwrap();
    let mut cm = ConfusionMatrix::new(5);
    for s in &samples {
        cm.accumulate(&s.mask, &s.mask).unwrap();
    }
    let summary = MetricSummary::from_matrix(&cm, true).unwrap();
    assert_eq!(summary.accuracy, 1.0);
    assert_eq!(summary.mean_iou, 1.0);
    assert_eq!(summary.f1, 1.0);

    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("metrics.csv");
    write_eval_csv(&csv_path, &cm, true).unwrap();
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let summary_row = csv.lines().last().unwrap();
    assert_eq!(summary_row, "summary,1.000000,1.000000,1.000000");
    assert!(csv.lines().count() >= 2 + 5, "one row per class plus header and summary");
}
