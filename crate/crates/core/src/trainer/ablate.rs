//! Ablation harnesses: architecture components, block configurations, and
//! the temperature sweep. Every suite trains on one fixed synthetic dataset
//! and reports held-out Acc/mIoU/F1 as mean ± sd over its seed set.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::MetricSummary;
use crate::model::{Block, ModelConfig};
use crate::scalar::Scalar;
use crate::synthdata::{generate_scene, write_manifest, GenConfig, SceneSample};
use crate::trainer::{
    checkpoint, config::Precision, evaluate_model, train_student, train_teacher, InputKind,
    TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Components,
    Blocks,
    Temperature,
}

pub const SUITE_NAMES: [&str; 3] = ["components", "blocks", "temperature"];

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Suite::Components),
            "blocks" => Ok(Suite::Blocks),
            "temperature" => Ok(Suite::Temperature),
            other => Err(Error::invalid(
                "ablate",
                format!("unknown suite {other:?}; valid suites: {}", SUITE_NAMES.join(", ")),
            )),
        }
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Suite::Components => "components",
            Suite::Blocks => "blocks",
            Suite::Temperature => "temperature",
        })
    }
}

#[derive(Clone, Debug)]
pub struct AblateConfig {
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub train_count: usize,
    pub test_count: usize,
    pub seeds: Vec<u64>,
}

impl AblateConfig {
    /// The standard binary benchmark: dataset seed 42, 200 train / 50 test
    /// scenes at 64×64, three training seeds. Epochs are trimmed so the
    /// whole components suite stays within a desk-scale time budget.
    pub fn standard_binary() -> Self {
        let mut train = TrainConfig::default();
        train.teacher_epochs = 10;
        train.student_epochs = 12;
        AblateConfig {
            train,
            gen: GenConfig {
                seed: 42,
                ..GenConfig::default()
            },
            train_count: 200,
            test_count: 50,
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct RowResult {
    pub config: String,
    pub acc: Vec<f64>,
    pub miou: Vec<f64>,
    pub f1: Vec<f64>,
}

impl RowResult {
    pub fn miou_mean(&self) -> f64 {
        mean(&self.miou)
    }
}

#[derive(Debug)]
pub struct AblateReport {
    pub csv: PathBuf,
    pub rows: Vec<RowResult>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Splitmix-style seed derivation so the teacher and student of one run,
/// and runs of different rows, never share an initialization stream.
fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt)
        .wrapping_add(0x243F_6A88_85A3_08D3);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct RowSpec {
    name: String,
    arch: ModelConfig,
    distill: Vec<Block>,
    /// (λ, T) override for the temperature sweep.
    loss_override: Option<(f64, f64)>,
}

fn aggregate_signature(arch: &ModelConfig) -> String {
    arch.aggregate
        .iter()
        .map(|b| b.to_string())
        .collect::<Vec<_>>()
        .join("+")
}

fn suite_rows(suite: Suite, num_classes: usize, base_loss_lambda: f64) -> Vec<RowSpec> {
    match suite {
        Suite::Components => vec![
            RowSpec {
                name: "backbone".into(),
                arch: ModelConfig::backbone_only(num_classes),
                distill: vec![],
                loss_override: None,
            },
            RowSpec {
                name: "hfdm".into(),
                arch: ModelConfig::backbone_only(num_classes),
                distill: vec![Block::D3],
                loss_override: None,
            },
            RowSpec {
                name: "hfam".into(),
                arch: ModelConfig::full(num_classes),
                distill: vec![],
                loss_override: None,
            },
            RowSpec {
                name: "full".into(),
                arch: ModelConfig::full(num_classes),
                distill: vec![Block::D3],
                loss_override: None,
            },
        ],
        Suite::Blocks => {
            let mk = |name: &str, aggregate: Vec<Block>, distill: Vec<Block>| RowSpec {
                name: name.into(),
                arch: ModelConfig {
                    num_classes,
                    aggregate,
                },
                distill,
                loss_override: None,
            };
            vec![
                mk("d1+d2", vec![Block::D1, Block::D2], vec![Block::D2]),
                mk("d1+d3", vec![Block::D1, Block::D3], vec![Block::D3]),
                mk(
                    "d1+d2+d3",
                    vec![Block::D1, Block::D2, Block::D3],
                    vec![Block::D1, Block::D3],
                ),
                mk("d2+d3", vec![Block::D2, Block::D3], vec![Block::D3]),
            ]
        }
        Suite::Temperature => {
            let _ = base_loss_lambda;
            [1.0f64, 5.0, 10.0, 50.0]
                .iter()
                .map(|&t| RowSpec {
                    name: format!("T={t}"),
                    arch: ModelConfig::full(num_classes),
                    distill: vec![Block::D3],
                    // λ follows the λ = T² recipe across the sweep.
                    loss_override: Some((t * t, t)),
                })
                .collect()
        }
    }
}

/// Runs one ablation suite and writes its results CSV under `out_dir`.
/// Teachers are trained once per (seed, architecture) and shared across the
/// rows that need them.
pub fn ablate(suite: Suite, cfg: &AblateConfig, out_dir: &Path) -> Result<AblateReport> {
    match cfg.train.precision {
        Precision::F32 => ablate_impl::<f32>(suite, cfg, out_dir),
        Precision::F64 => ablate_impl::<f64>(suite, cfg, out_dir),
    }
}

fn ablate_impl<S: Scalar>(
    suite: Suite,
    cfg: &AblateConfig,
    out_dir: &Path,
) -> Result<AblateReport> {
    cfg.train.validate()?;
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("ablate", "seed set must not be empty"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Fixed dataset: train scenes at indices 0.., held-out scenes after.
    let train_samples: Vec<SceneSample> = (0..cfg.train_count)
        .map(|i| generate_scene(&cfg.gen, i))
        .collect::<Result<_>>()?;
    let test_samples: Vec<SceneSample> = (0..cfg.test_count)
        .map(|i| generate_scene(&cfg.gen, cfg.train_count + i))
        .collect::<Result<_>>()?;
    let train_manifest = write_manifest(&train_samples, &out_dir.join("data_train"))?;
    write_manifest(&test_samples, &out_dir.join("data_test"))?;

    let rows = suite_rows(suite, cfg.gen.num_classes, cfg.train.loss.lambda);
    let runs_dir = out_dir.join("runs").join(suite.to_string());
    let mut teacher_cache: HashMap<(u64, String), PathBuf> = HashMap::new();
    let mut results: Vec<RowResult> = rows
        .iter()
        .map(|r| RowResult {
            config: r.name.clone(),
            acc: vec![],
            miou: vec![],
            f1: vec![],
        })
        .collect();

    for &seed in &cfg.seeds {
        for (row_idx, row) in rows.iter().enumerate() {
            let needs_teacher = !row.distill.is_empty();
            let teacher_ckpt = if needs_teacher {
                let sig = aggregate_signature(&row.arch);
                match teacher_cache.get(&(seed, sig.clone())) {
                    Some(path) => Some(path.clone()),
                    None => {
                        let dir = runs_dir.join(format!("teacher_{sig}_s{seed}"));
                        let mut tcfg = cfg.train.clone();
                        tcfg.seed = derive_seed(seed, 0x7EAC);
                        let outcome =
                            train_teacher::<S>(&train_manifest, &dir, &tcfg, &row.arch)?;
                        teacher_cache.insert((seed, sig), outcome.checkpoint.clone());
                        Some(outcome.checkpoint)
                    }
                }
            } else {
                None
            };

            let dir = runs_dir.join(format!("{}_s{seed}", row.name.replace('=', "")));
            let mut scfg = cfg.train.clone();
            scfg.seed = derive_seed(seed, 0x57DD);
            if let Some((lambda, temperature)) = row.loss_override {
                scfg.loss.lambda = lambda;
                scfg.loss.temperature = temperature;
            }
            if teacher_ckpt.is_none() {
                scfg.loss.lambda = 0.0;
            }
            let outcome = train_student::<S>(
                &train_manifest,
                teacher_ckpt.as_deref(),
                &dir,
                &scfg,
                &row.arch,
                &row.distill,
            )?;

            let student = checkpoint::load_model::<S>(&outcome.checkpoint)?;
            let cm = evaluate_model(&student, &test_samples, InputKind::Sar, cfg.train.batch_size)?;
            let summary = MetricSummary::from_matrix(&cm, true)?;
            results[row_idx].acc.push(summary.accuracy);
            results[row_idx].miou.push(summary.mean_iou);
            results[row_idx].f1.push(summary.f1);
        }
    }

    let mut csv = String::new();
    if suite == Suite::Blocks {
        csv.push_str(
            "# aggregation fuses the listed blocks pairwise left to right; chains not ending at d3 add a 1x1 class projection\n",
        );
        csv.push_str("# distillation sums one loss term per listed block\n");
    }
    csv.push_str("suite,config,seeds,acc_mean,acc_sd,miou_mean,miou_sd,f1_mean,f1_sd\n");
    for row in &results {
        let _ = writeln!(
            csv,
            "{suite},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.config,
            row.acc.len(),
            mean(&row.acc),
            sd(&row.acc),
            mean(&row.miou),
            sd(&row.miou),
            mean(&row.f1),
            sd(&row.f1),
        );
    }
    let csv_path = out_dir.join(format!("ablate_{suite}.csv"));
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(AblateReport {
        csv: csv_path,
        rows: results,
    })
}
