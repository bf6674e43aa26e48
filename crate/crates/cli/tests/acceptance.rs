//! Acceptance suite. Each test covers one release criterion at its stated
//! tolerance and prints one `[criterion N] PASS` line; run with
//! `cargo test -p hfd-cli --test acceptance -- --nocapture` to see them.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use rand::Rng;

use hfd_core::gradcheck;
use hfd_core::hfam::feature_align;
use hfd_core::hfdm::{distillation_loss, tsoftmax};
use hfd_core::layers::{seeded_rng, uniform_tensor};
use hfd_core::metrics::ConfusionMatrix;
use hfd_core::model::{Block, ModelConfig};
use hfd_core::synthdata::{generate_dataset, write_manifest, GenConfig};
use hfd_core::tensor::{ops, Tensor};
use hfd_core::trainer::{
    ablate, checkpoint, train_student, train_teacher, AblateConfig, Suite, TrainConfig,
};

fn hfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hfd"))
        .args(args)
        .output()
        .expect("spawn hfd")
}

// -------------------------------------------------------------------------
// 1. gradient suite
// -------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let reports = gradcheck::run_suite().unwrap();
    let elapsed = t0.elapsed();

    let required = [
        "conv2d",
        "batchnorm",
        "sigmoid",
        "tsoftmax",
        "feature_align_features",
        "feature_align_offsets",
        "bilinear_interpolate",
        "cross_entropy",
        "focal_loss_standard",
        "focal_loss_literal",
        "distillation_loss",
        "total_loss",
    ];
    for name in required {
        let report = reports
            .iter()
            .find(|r| r.name == name)
            .unwrap_or_else(|| panic!("suite is missing {name}"));
        assert!(
            report.instances >= 10,
            "{name}: only {} instances",
            report.instances
        );
    }
    for r in &reports {
        assert!(
            r.max_rel_err < 1e-4,
            "{}: max relative error {:.3e}",
            r.name,
            r.max_rel_err
        );
    }
    assert!(
        elapsed.as_secs() < 120,
        "gradient suite took {elapsed:?}, budget is 2 minutes"
    );
    println!(
        "[criterion 1] PASS: {} ops under 1e-4 at f64 in {elapsed:.2?}",
        reports.len()
    );
}

// -------------------------------------------------------------------------
// 2. alignment kernel vs the double-sum oracle
// -------------------------------------------------------------------------

/// Direct evaluation of the element-level alignment as the full double sum
/// over every source position with the triangular kernel.
fn brute_force_align(x: &Tensor<f64>, off: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let d1 = off.data()[i * w + j];
                let d2 = off.data()[hw + i * w + j];
                let mut acc = 0.0;
                for hh in 0..h {
                    for ww in 0..w {
                        let kr = (1.0 - (i as f64 + d1 - hh as f64).abs()).max(0.0);
                        let kc = (1.0 - (j as f64 + d2 - ww as f64).abs()).max(0.0);
                        acc += x.data()[ch * hw + hh * w + ww] * kr * kc;
                    }
                }
                out[ch * hw + i * w + j] = acc;
            }
        }
    }
    out
}

#[test]
fn criterion_2_alignment_oracle_equivalence() {
    let mut rng = seeded_rng(0xA11C, 0);
    for instance in 0..200 {
        let x = uniform_tensor::<f64>(&mut rng, vec![2, 5, 5], 3.0);
        let off_data: Vec<f64> = (0..2 * 25)
            .map(|_| rng.random::<f64>() * 6.0 - 3.0)
            .collect();
        let off = Tensor::from_vec(vec![2, 5, 5], off_data).unwrap();
        let fast = feature_align(&x, &off).unwrap();
        let slow = brute_force_align(&x, &off);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!(
                (a - b).abs() < 1e-6,
                "instance {instance}: {a} vs oracle {b}"
            );
        }
    }
    // zero offsets reproduce the input exactly
    let x = uniform_tensor::<f64>(&mut rng, vec![3, 5, 5], 3.0);
    let zero = Tensor::zeros(vec![2, 5, 5]);
    assert_eq!(feature_align(&x, &zero).unwrap().data(), x.data());
    println!("[criterion 2] PASS: 200 random instances within 1e-6; zero offsets exact");
}

// -------------------------------------------------------------------------
// 3. tempered softmax and distillation-loss properties
// -------------------------------------------------------------------------

#[test]
fn criterion_3_distillation_properties() {
    let mut rng = seeded_rng(0xD157, 0);

    // normalization within 1e-6 across the temperature set
    for t in [1.0, 5.0, 10.0, 50.0] {
        let q = uniform_tensor::<f64>(&mut rng, vec![5, 4, 4], 4.0);
        let probs = tsoftmax(&q, t).unwrap();
        for p in 0..16 {
            let total: f64 = (0..5).map(|c| probs.data()[c * 16 + p]).sum();
            assert!((total - 1.0).abs() < 1e-6, "T={t}: pixel sums to {total}");
        }
    }

    // T=1 equals the plain softmax of the sigmoid-normalized maps
    let q = uniform_tensor::<f64>(&mut rng, vec![4, 3, 3], 3.0);
    let a = tsoftmax(&q, 1.0).unwrap();
    let b = ops::channel_softmax(&ops::sigmoid(&q).unwrap()).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }

    // matched constant maps: L_D = (H·W/C)·ln C
    let (c, h, w) = (4, 6, 5);
    let q = Tensor::<f64>::full(vec![c, h, w], -0.3);
    let ld = distillation_loss(&q, &q, 5.0).unwrap().item();
    let expect = (h * w) as f64 / c as f64 * (c as f64).ln();
    assert!((ld - expect).abs() < 1e-6, "{ld} vs {expect}");

    // Gibbs floor on 100 random 2×4×4 instances
    for _ in 0..100 {
        let q_t = uniform_tensor::<f64>(&mut rng, vec![2, 4, 4], 3.0);
        let q_s = uniform_tensor::<f64>(&mut rng, vec![2, 4, 4], 3.0);
        let t_probs = tsoftmax(&q_t, 5.0).unwrap();
        let entropy: f64 = t_probs.data().iter().map(|&p| -p * p.ln()).sum();
        let floor = entropy / 2.0;
        let cross = distillation_loss(&q_t, &q_s, 5.0).unwrap().item();
        assert!(cross >= floor - 1e-9, "{cross} below the Gibbs floor {floor}");
        let matched = distillation_loss(&q_t, &q_t, 5.0).unwrap().item();
        assert!((matched - floor).abs() < 1e-9);
    }
    println!("[criterion 3] PASS: normalization, T=1 reduction, closed form, Gibbs floor");
}

// -------------------------------------------------------------------------
// 4. metrics vs a per-pixel oracle
// -------------------------------------------------------------------------

#[test]
fn criterion_4_metrics_oracle() {
    let mut rng = seeded_rng(0x3E7A, 0);
    for instance in 0..100 {
        let classes = 2 + (instance % 4);
        let n = 16 * 16;
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..classes) as u8).collect();
        let truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..classes) as u8).collect();

        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&pred, &truth).unwrap();

        // naive per-pixel double loop
        let mut counts = vec![0u64; classes * classes];
        for i in 0..n {
            counts[truth[i] as usize * classes + pred[i] as usize] += 1;
        }
        for t in 0..classes {
            for p in 0..classes {
                assert_eq!(cm.count(t, p), counts[t * classes + p], "exact counts");
            }
        }

        let correct: u64 = (0..classes).map(|c| counts[c * classes + c]).sum();
        let acc = correct as f64 / n as f64;
        let mut ious = Vec::new();
        let mut f1s = Vec::new();
        for c in 0..classes {
            let row: u64 = (0..classes).map(|j| counts[c * classes + j]).sum();
            let col: u64 = (0..classes).map(|i| counts[i * classes + c]).sum();
            if row + col == 0 {
                continue;
            }
            let tp = counts[c * classes + c];
            ious.push(tp as f64 / (row + col - tp) as f64);
            f1s.push(2.0 * tp as f64 / (row + col) as f64);
        }
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;

        assert!((cm.pixel_accuracy().unwrap() - acc).abs() < 1e-12);
        assert!((cm.mean_iou(true).unwrap() - miou).abs() < 1e-12);
        assert!((cm.f1(true).unwrap() - f1).abs() < 1e-12);
    }

    // the worked example
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&[0; 50], &[0; 50]).unwrap();
    cm.accumulate(&[1; 10], &[0; 10]).unwrap();
    cm.accumulate(&[0; 10], &[1; 10]).unwrap();
    cm.accumulate(&[1; 30], &[1; 30]).unwrap();
    assert_eq!(cm.pixel_accuracy().unwrap(), 0.8);
    assert!((cm.mean_iou(true).unwrap() - 0.65714).abs() < 1e-5);
    assert!((cm.f1(true).unwrap() - 0.79167).abs() < 1e-5);
    println!("[criterion 4] PASS: 100 instances exact / within 1e-12; worked example agrees");
}

// -------------------------------------------------------------------------
// 5. end-to-end distillation benefit
// -------------------------------------------------------------------------

#[test]
fn criterion_5_component_ablation_ordering() {
    let t0 = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let cfg = AblateConfig::standard_binary();
    assert_eq!(cfg.gen.seed, 42);
    assert_eq!(cfg.train_count, 200);
    assert_eq!(cfg.test_count, 50);
    assert_eq!(cfg.gen.image_size, 64);
    assert!(cfg.seeds.len() >= 3);

    let report = ablate(Suite::Components, &cfg, out.path()).unwrap();
    let elapsed = t0.elapsed();

    let miou = |name: &str| -> f64 {
        report
            .rows
            .iter()
            .find(|r| r.config == name)
            .unwrap_or_else(|| panic!("missing row {name}"))
            .miou_mean()
    };
    let (backbone, hfdm, hfam, full) =
        (miou("backbone"), miou("hfdm"), miou("hfam"), miou("full"));
    println!(
        "  components mIoU: backbone {backbone:.4}, +HFDM {hfdm:.4}, +HFAM {hfam:.4}, full {full:.4} ({elapsed:.0?})"
    );
    assert!(
        full >= backbone + 0.01,
        "full {full:.4} must exceed backbone {backbone:.4} by 0.01"
    );
    assert!(hfdm >= backbone, "+HFDM {hfdm:.4} below backbone {backbone:.4}");
    assert!(hfam >= backbone, "+HFAM {hfam:.4} below backbone {backbone:.4}");
    assert!(
        elapsed.as_secs() < 30 * 60,
        "suite took {elapsed:?}, budget is 30 minutes"
    );
    println!("[criterion 5] PASS: full ≥ backbone+0.01 and both single additions ≥ backbone");
}

// -------------------------------------------------------------------------
// 6. temperature harness structure
// -------------------------------------------------------------------------

#[test]
fn criterion_6_temperature_rows() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = AblateConfig::standard_binary();
    // structure is what matters here: shrink the runs, keep the seed set
    cfg.gen.image_size = 32;
    cfg.train_count = 32;
    cfg.test_count = 16;
    cfg.train.teacher_epochs = 2;
    cfg.train.student_epochs = 2;

    let report = ablate(Suite::Temperature, &cfg, out.path()).unwrap();
    let configs: Vec<&str> = report.rows.iter().map(|r| r.config.as_str()).collect();
    assert_eq!(configs, ["T=1", "T=5", "T=10", "T=50"]);
    for row in &report.rows {
        assert_eq!(row.miou.len(), cfg.seeds.len());
        for (&acc, (&miou, &f1)) in row.acc.iter().zip(row.miou.iter().zip(&row.f1)) {
            assert!(acc.is_finite() && miou.is_finite() && f1.is_finite());
        }
    }
    let csv = std::fs::read_to_string(&report.csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4, "header plus exactly four rows");
    println!("[criterion 6] PASS: rows exactly T ∈ {{1, 5, 10, 50}} with finite metrics");
}

// -------------------------------------------------------------------------
// 7. determinism and formats
// -------------------------------------------------------------------------

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((
                    p.strip_prefix(dir).unwrap().to_string_lossy().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn criterion_7_determinism_and_formats() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = GenConfig {
        seed: 6,
        image_size: 32,
        ..GenConfig::default()
    };
    let samples = generate_dataset(&gen, 16).unwrap();
    let manifest = write_manifest(&samples, &data).unwrap();

    // identical seeded runs: checkpoints, logs, and masks byte-identical
    let run = |tag: &str| {
        let out = dir.path().join(tag);
        let r = hfd(&[
            "train-teacher",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "4",
            "--epochs",
            "2",
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        let infer_out = dir.path().join(format!("{tag}_masks"));
        let r = hfd(&[
            "infer",
            "--checkpoint",
            out.join("teacher.ckpt").to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            infer_out.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        (tree_bytes(&out), tree_bytes(&infer_out))
    };
    let (run_a, masks_a) = run("a");
    let (run_b, masks_b) = run("b");
    assert_eq!(run_a, run_b, "checkpoints and logs must repeat byte-exactly");
    assert_eq!(masks_a, masks_b, "predicted masks must repeat byte-exactly");

    // PGM round-trip: write∘read∘write is byte-exact
    let p1 = dir.path().join("rt1.pgm");
    let p2 = dir.path().join("rt2.pgm");
    hfd_core::synthdata::write_pgm(&p1, 32, 32, &samples[0].sar).unwrap();
    let (w, h, back) = hfd_core::synthdata::read_pgm(&p1).unwrap();
    hfd_core::synthdata::write_pgm(&p2, w, h, &back).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    // checkpoint round-trip byte-exact, corrupt CRC rejected
    let ckpt = dir.path().join("a").join("teacher.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    let mut model = checkpoint::load_model::<f32>(&ckpt).unwrap();
    assert_eq!(checkpoint::model_checkpoint_bytes(&mut model), bytes);
    let mut corrupt = bytes.clone();
    let at = corrupt.len() / 3;
    corrupt[at] ^= 0x40;
    let err = checkpoint::parse_checkpoint::<f32>(&corrupt).unwrap_err();
    assert!(err.to_string().contains("CRC"), "{err}");
    println!("[criterion 7] PASS: byte-identical reruns; PGM and checkpoint round-trips exact; CRC enforced");
}

// -------------------------------------------------------------------------
// 8. frozen-teacher contract
// -------------------------------------------------------------------------

#[test]
fn criterion_8_frozen_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig {
        seed: 8,
        image_size: 32,
        ..GenConfig::default()
    };
    let samples = generate_dataset(&gen, 16).unwrap();
    let manifest = write_manifest(&samples, &dir.path().join("data")).unwrap();
    let arch = ModelConfig::full(2);

    let mut tcfg = TrainConfig::default();
    tcfg.seed = 51;
    tcfg.teacher_epochs = 2;
    let teacher =
        train_teacher::<f32>(&manifest, &dir.path().join("teacher"), &tcfg, &arch).unwrap();
    let teacher_before = std::fs::read(&teacher.checkpoint).unwrap();

    let mut scfg = TrainConfig::default();
    scfg.seed = 52;
    scfg.student_epochs = 2;
    train_student::<f32>(
        &manifest,
        Some(&teacher.checkpoint),
        &dir.path().join("student"),
        &scfg,
        &arch,
        &[Block::D3],
    )
    .unwrap();
    assert_eq!(
        teacher_before,
        std::fs::read(&teacher.checkpoint).unwrap(),
        "teacher bytes changed during student training"
    );

    // λ=0 with a teacher is bit-identical to the no-teacher baseline
    let mut zcfg = scfg.clone();
    zcfg.loss.lambda = 0.0;
    let with_teacher = train_student::<f32>(
        &manifest,
        Some(&teacher.checkpoint),
        &dir.path().join("lambda0"),
        &zcfg,
        &arch,
        &[Block::D3],
    )
    .unwrap();
    let baseline = train_student::<f32>(
        &manifest,
        None,
        &dir.path().join("baseline"),
        &zcfg,
        &arch,
        &[Block::D3],
    )
    .unwrap();
    assert_eq!(
        std::fs::read(&with_teacher.checkpoint).unwrap(),
        std::fs::read(&baseline.checkpoint).unwrap()
    );
    assert_eq!(
        std::fs::read(&with_teacher.log).unwrap(),
        std::fs::read(&baseline.log).unwrap()
    );
    println!("[criterion 8] PASS: teacher bytes frozen; λ=0 run ≡ no-teacher baseline");
}
