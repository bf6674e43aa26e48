//! One-seed probe of the components suite; prints per-row held-out metrics
//! so epoch budgets and data difficulty can be sized quickly.

use std::time::Instant;

use hfd_core::trainer::{ablate, AblateConfig, Suite};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let teacher_ep: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let student_ep: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let seeds: Vec<u64> = args
        .get(3)
        .map(|s| s.split(',').map(|t| t.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1]);

    let mut cfg = AblateConfig::standard_binary();
    cfg.train.teacher_epochs = teacher_ep;
    cfg.train.student_epochs = student_ep;
    cfg.seeds = seeds;
    let out = std::env::temp_dir().join(format!("hfd_probe_{teacher_ep}_{student_ep}"));
    let t0 = Instant::now();
    let report = ablate(Suite::Components, &cfg, &out).expect("ablate");
    println!("elapsed {:.1?}", t0.elapsed());
    for row in &report.rows {
        println!(
            "{:10} acc {:?} miou {:?} f1 {:?}",
            row.config, row.acc, row.miou, row.f1
        );
    }
}
