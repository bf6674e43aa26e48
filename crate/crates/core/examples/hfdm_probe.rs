//! Focused probe of the backbone-only vs +HFDM gap across seeds, with
//! configurable teacher/student epochs and λ.

use hfd_core::metrics::MetricSummary;
use hfd_core::model::{Block, ModelConfig};
use hfd_core::synthdata::{generate_scene, write_manifest, GenConfig};
use hfd_core::trainer::{
    checkpoint, evaluate_model, train_student, train_teacher, InputKind, TrainConfig,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let teacher_ep: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let student_ep: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lambda: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(25.0);
    let seeds: Vec<u64> = args
        .get(4)
        .map(|s| s.split(',').map(|t| t.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1, 2, 3]);

    let gen = GenConfig {
        seed: 42,
        ..GenConfig::default()
    };
    let dir = std::env::temp_dir().join(format!("hfdm_probe_{teacher_ep}_{student_ep}_{lambda}"));
    let train: Vec<_> = (0..200).map(|i| generate_scene(&gen, i).unwrap()).collect();
    let test: Vec<_> = (0..50).map(|i| generate_scene(&gen, 200 + i).unwrap()).collect();
    let manifest = write_manifest(&train, &dir.join("data")).unwrap();
    let arch = ModelConfig::backbone_only(2);

    for seed in seeds {
        let mut tcfg = TrainConfig::default();
        tcfg.seed = seed * 1000 + 7;
        tcfg.teacher_epochs = teacher_ep;
        let teacher = train_teacher::<f32>(
            &manifest,
            &dir.join(format!("teacher_s{seed}")),
            &tcfg,
            &arch,
        )
        .unwrap();

        let mut result = Vec::new();
        for (name, use_teacher) in [("backbone", false), ("hfdm", true)] {
            let mut scfg = TrainConfig::default();
            scfg.seed = seed * 1000 + 13;
            scfg.student_epochs = student_ep;
            scfg.loss.lambda = if use_teacher { lambda } else { 0.0 };
            let out = train_student::<f32>(
                &manifest,
                use_teacher.then_some(teacher.checkpoint.as_path()),
                &dir.join(format!("{name}_s{seed}")),
                &scfg,
                &arch,
                &[Block::D3],
            )
            .unwrap();
            let model = checkpoint::load_model::<f32>(&out.checkpoint).unwrap();
            let cm = evaluate_model(&model, &test, InputKind::Sar, 8).unwrap();
            let m = MetricSummary::from_matrix(&cm, true).unwrap();
            result.push((name, m.mean_iou, out.best_miou));
        }
        println!(
            "seed {seed}: teacher train {:.4} | {} test {:.4} (train {:.4}) | {} test {:.4} (train {:.4}) | gap {:+.4}",
            teacher.best_miou,
            result[0].0, result[0].1, result[0].2,
            result[1].0, result[1].1, result[1].2,
            result[1].1 - result[0].1
        );
    }
}
