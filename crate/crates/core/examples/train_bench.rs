//! Times one teacher epoch on the standard synthetic set; handy when
//! sizing epoch budgets for the ablation suites.

use std::time::Instant;

use hfd_core::model::ModelConfig;
use hfd_core::synthdata::{generate_dataset, write_manifest, GenConfig};
use hfd_core::trainer::{train_teacher, TrainConfig};

fn main() {
    let dir = std::env::temp_dir().join("hfd_train_bench");
    let gen = GenConfig {
        seed: 42,
        ..GenConfig::default()
    };
    let t0 = Instant::now();
    let samples = generate_dataset(&gen, 200).expect("generate");
    let manifest = write_manifest(&samples, &dir.join("data")).expect("write");
    println!("generate+write 200 scenes: {:.2?}", t0.elapsed());

    let mut cfg = TrainConfig::default();
    cfg.teacher_epochs = 2;
    cfg.seed = 7;
    let t1 = Instant::now();
    let outcome = train_teacher::<f32>(&manifest, &dir.join("run"), &cfg, &ModelConfig::full(2))
        .expect("train");
    let dt = t1.elapsed();
    println!(
        "2 epochs (50 steps + 2 eval sweeps): {:.2?}  ({:.2?}/epoch), mIoU {:.4}",
        dt,
        dt / 2,
        outcome.best_miou
    );
}
