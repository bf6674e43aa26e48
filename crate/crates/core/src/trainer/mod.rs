//! Two-stage optimization: the teacher trains on EO scenes with the basic
//! segmentation loss, then freezes; the student trains on SAR scenes under
//! the segmentation loss plus λ times the distillation loss against the
//! teacher's feature stacks. Runs are deterministic: the seed fixes
//! initialization, shuffling, and therefore every logged number and
//! checkpoint byte.

pub mod ablate;
pub mod adam;
pub mod checkpoint;
pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

pub use ablate::{ablate, AblateConfig, Suite};
pub use adam::{adam_step, AdamParams, AdamState};
pub use config::{Precision, TrainConfig};

use crate::error::{Error, Result};
use crate::hfdm;
use crate::layers::{seeded_rng, Mode};
use crate::losses;
use crate::metrics::ConfusionMatrix;
use crate::model::{Block, ModelConfig, ModelOutput, SegModel};
use crate::scalar::Scalar;
use crate::synthdata::{load_manifest, SceneSample};
use crate::tensor::{Tape, Tensor};

/// ChaCha streams reserved for training (sample generation uses low stream
/// numbers).
const INIT_STREAM: u64 = 0xF0A0_0001;
const SHUFFLE_STREAM: u64 = 0xF0A0_0002;

/// Which image of a sample feeds the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Eo,
    Sar,
}

/// Polynomial learning-rate decay: lr0 · (1 − iter/max_iter)^power, stepped
/// per iteration.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::invalid(
            "poly_lr",
            format!("iter {iter} exceeds max_iter {max_iter}"),
        ));
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EpochLoss {
    pub l_c: f64,
    pub l_f: f64,
    pub l_d: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_miou: f64,
    pub best_epoch: usize,
    pub epoch_losses: Vec<EpochLoss>,
    pub epoch_miou: Vec<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub miou_log: PathBuf,
}

/// Stage one: minimize the basic segmentation loss on EO inputs; the best
/// train-mIoU checkpoint is kept.
pub fn train_teacher<S: Scalar>(
    manifest: &Path,
    out_dir: &Path,
    cfg: &TrainConfig,
    arch: &ModelConfig,
) -> Result<TrainOutcome> {
    let samples = load_manifest(manifest)?;
    run_stage::<S>(StageSpec {
        samples: &samples,
        input: InputKind::Eo,
        teacher: None,
        distill: &[],
        epochs: cfg.teacher_epochs,
        ckpt_name: "teacher.ckpt",
        out_dir,
        cfg,
        arch,
    })
}

/// Stage two: the teacher is fixed; the student minimizes
/// seg_loss + λ·distillation on SAR inputs while the teacher sees the
/// paired EO images. With no teacher or λ = 0 the distillation path is
/// skipped entirely, so such a run is bit-identical to a plain baseline.
pub fn train_student<S: Scalar>(
    manifest: &Path,
    teacher_ckpt: Option<&Path>,
    out_dir: &Path,
    cfg: &TrainConfig,
    arch: &ModelConfig,
    distill: &[Block],
) -> Result<TrainOutcome> {
    let samples = load_manifest(manifest)?;
    let teacher = match teacher_ckpt {
        Some(path) => {
            let teacher = checkpoint::load_model::<S>(path)?;
            if teacher.num_classes() != arch.num_classes {
                return Err(Error::Checkpoint(format!(
                    "teacher has {} classes, student architecture expects {}",
                    teacher.num_classes(),
                    arch.num_classes
                )));
            }
            Some(teacher)
        }
        None => None,
    };
    let teacher = if cfg.loss.lambda > 0.0 { teacher } else { None };
    run_stage::<S>(StageSpec {
        samples: &samples,
        input: InputKind::Sar,
        teacher,
        distill,
        epochs: cfg.student_epochs,
        ckpt_name: "student.ckpt",
        out_dir,
        cfg,
        arch,
    })
}

struct StageSpec<'a, S: Scalar> {
    samples: &'a [SceneSample],
    input: InputKind,
    teacher: Option<SegModel<S>>,
    distill: &'a [Block],
    epochs: usize,
    ckpt_name: &'a str,
    out_dir: &'a Path,
    cfg: &'a TrainConfig,
    arch: &'a ModelConfig,
}

fn pick_block<'m, S: Scalar>(out: &'m ModelOutput<S>, block: Block) -> &'m Tensor<S> {
    match block {
        Block::D1 => &out.blocks.d1,
        Block::D2 => &out.blocks.d2,
        Block::D3 => &out.blocks.d3,
    }
}

fn build_batch<S: Scalar>(
    samples: &[SceneSample],
    idxs: &[usize],
    input: InputKind,
) -> (Tensor<S>, Vec<u8>) {
    let size = samples[idxs[0]].size;
    let mut data = Vec::with_capacity(idxs.len() * size * size);
    let mut labels = Vec::with_capacity(idxs.len() * size * size);
    for &i in idxs {
        let s = &samples[i];
        let img = match input {
            InputKind::Eo => &s.eo,
            InputKind::Sar => &s.sar,
        };
        data.extend(img.iter().map(|&v| S::of(v as f64)));
        labels.extend_from_slice(&s.mask);
    }
    let x = Tensor::from_vec(vec![idxs.len(), 1, size, size], data)
        .expect("batch dimensions are consistent");
    (x, labels)
}

fn run_stage<S: Scalar>(spec: StageSpec<'_, S>) -> Result<TrainOutcome> {
    let cfg = spec.cfg;
    cfg.validate()?;
    if spec.samples.is_empty() {
        return Err(Error::invalid("train", "dataset is empty"));
    }
    let batch = cfg.batch_size;
    let steps_per_epoch = spec.samples.len() / batch;
    if steps_per_epoch == 0 {
        return Err(Error::invalid(
            "train",
            format!(
                "dataset of {} samples is smaller than one batch of {}",
                spec.samples.len(),
                batch
            ),
        ));
    }
    std::fs::create_dir_all(spec.out_dir).map_err(|e| Error::io(spec.out_dir, e))?;

    let mut rng = seeded_rng(cfg.seed, INIT_STREAM);
    let mut model = SegModel::<S>::init(&mut rng, spec.arch);

    let mut param_names = Vec::new();
    model.visit_params(&mut |name, t| param_names.push((name, t.numel())));
    let mut adam_states: Vec<AdamState<S>> = param_names
        .iter()
        .map(|(_, numel)| AdamState::new(*numel))
        .collect();
    let hyper = AdamParams {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };

    let distilling =
        spec.teacher.is_some() && cfg.loss.lambda > 0.0 && !spec.distill.is_empty();
    let lambda = S::of(cfg.loss.lambda);

    let max_iter = spec.epochs * steps_per_epoch;
    let mut shuffle_rng = seeded_rng(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..spec.samples.len()).collect();

    let mut global_step = 0usize;
    let mut best_miou = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_bytes: Option<Vec<u8>> = None;
    let mut epoch_losses = Vec::with_capacity(spec.epochs);
    let mut epoch_miou = Vec::with_capacity(spec.epochs);
    let mut log = String::from("epoch,step,lr,l_c,l_f,l_d,total\n");
    let mut miou_log = String::from("epoch,miou\n");
    let mut diagnostics = String::new();
    hfdm::take_clamp_events();

    for epoch in 0..spec.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = EpochLoss::default();
        let mut last_lr = 0.0;
        for step in 0..steps_per_epoch {
            let idxs = &order[step * batch..(step + 1) * batch];
            let (x, labels) = build_batch::<S>(spec.samples, idxs, spec.input);
            let lr = poly_lr(global_step, max_iter, cfg.lr0, cfg.poly_power)?;
            last_lr = lr;

            let tape = Tape::<S>::new();
            model.visit_params(&mut |_, t| *t = tape.var(t));

            let out = model.forward(&x, Mode::Train)?;
            let ce = losses::cross_entropy(&out.logits, &labels)?;
            let focal = losses::focal_loss(&out.logits, &labels, &cfg.loss)?;
            let mut total = crate::tensor::ops::add(&ce, &focal)?;
            let mut ld_value = 0.0;
            if distilling {
                let teacher = spec.teacher.as_ref().expect("distilling implies teacher");
                let (x_eo, _) = build_batch::<S>(spec.samples, idxs, InputKind::Eo);
                let t_out = teacher.forward(&x_eo, Mode::Eval)?;
                let mut ld_sum: Option<Tensor<S>> = None;
                for &block in spec.distill {
                    let term = hfdm::distillation_loss(
                        pick_block(&t_out, block),
                        pick_block(&out, block),
                        cfg.loss.temperature,
                    )?;
                    ld_sum = Some(match ld_sum {
                        Some(acc) => crate::tensor::ops::add(&acc, &term)?,
                        None => term,
                    });
                }
                let ld = ld_sum.expect("distill blocks are non-empty");
                ld_value = ld.item().as_f64();
                total = crate::tensor::ops::add(
                    &total,
                    &crate::tensor::ops::affine(&ld, lambda, S::zero())?,
                )?;
            }

            let total_value = total.item().as_f64();
            if !total_value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, step {step}"),
                });
            }
            tape.backward(&total)?;

            let mut idx = 0usize;
            let mut update_err = None;
            model.visit_params(&mut |name, t| {
                if update_err.is_some() {
                    return;
                }
                let grad = tape.grad(t);
                let zeros;
                let gref: &[S] = match &grad {
                    Some(g) => g.data(),
                    None => {
                        zeros = vec![S::zero(); t.numel()];
                        &zeros
                    }
                };
                if let Err(e) = adam_step(t, gref, &mut adam_states[idx], &hyper, lr, &name) {
                    update_err = Some(e);
                }
                idx += 1;
            });
            if let Some(e) = update_err {
                return Err(e);
            }

            sums.l_c += ce.item().as_f64();
            sums.l_f += focal.item().as_f64();
            sums.l_d += ld_value;
            sums.total += total_value;
            global_step += 1;
        }

        let n = steps_per_epoch as f64;
        let avg = EpochLoss {
            l_c: sums.l_c / n,
            l_f: sums.l_f / n,
            l_d: sums.l_d / n,
            total: sums.total / n,
        };
        let clamps = hfdm::take_clamp_events();
        if clamps > 0 {
            let _ = writeln!(diagnostics, "epoch {epoch}: {clamps} clamped log arguments");
        }

        let cm = evaluate_model(&model, spec.samples, spec.input, batch)?;
        let miou = cm.mean_iou(true)?;
        let _ = writeln!(
            log,
            "{epoch},{global_step},{last_lr:e},{:.6},{:.6},{:.6},{:.6}",
            avg.l_c, avg.l_f, avg.l_d, avg.total
        );
        let _ = writeln!(miou_log, "{epoch},{miou:.6}");
        epoch_losses.push(avg);
        epoch_miou.push(miou);
        if miou > best_miou {
            best_miou = miou;
            best_epoch = epoch;
            best_bytes = Some(checkpoint::model_checkpoint_bytes(&mut model));
        }
    }

    let ckpt_path = spec.out_dir.join(spec.ckpt_name);
    std::fs::write(&ckpt_path, best_bytes.expect("at least one epoch ran"))
        .map_err(|e| Error::io(&ckpt_path, e))?;
    let log_path = spec.out_dir.join("train_log.csv");
    std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    let miou_path = spec.out_dir.join("train_miou.csv");
    std::fs::write(&miou_path, miou_log).map_err(|e| Error::io(&miou_path, e))?;
    if !diagnostics.is_empty() {
        let diag_path = spec.out_dir.join("diagnostics.txt");
        std::fs::write(&diag_path, diagnostics).map_err(|e| Error::io(&diag_path, e))?;
    }

    Ok(TrainOutcome {
        best_miou,
        best_epoch,
        epoch_losses,
        epoch_miou,
        checkpoint: ckpt_path,
        log: log_path,
        miou_log: miou_path,
    })
}

/// Per-pixel argmax of the class logits; ties resolve to the lowest index.
fn argmax_masks<S: Scalar>(logits: &Tensor<S>) -> Vec<u8> {
    let (bsz, k, hw) = (logits.dim(0), logits.dim(1), logits.dim(2) * logits.dim(3));
    let mut out = vec![0u8; bsz * hw];
    let data = logits.data();
    for b in 0..bsz {
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_v = data[b * k * hw + p];
            for c in 1..k {
                let v = data[(b * k + c) * hw + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[b * hw + p] = best as u8;
        }
    }
    out
}

/// Eval-mode sweep over a sample list, accumulating the confusion matrix.
pub fn evaluate_model<S: Scalar>(
    model: &SegModel<S>,
    samples: &[SceneSample],
    input: InputKind,
    batch: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    let idxs: Vec<usize> = (0..samples.len()).collect();
    for chunk in idxs.chunks(batch.max(1)) {
        let (x, labels) = build_batch::<S>(samples, chunk, input);
        let out = model.forward(&x, Mode::Eval)?;
        let pred = argmax_masks(&out.logits);
        cm.accumulate(&pred, &labels)?;
    }
    Ok(cm)
}

/// Predicted class-index mask for one image.
pub fn predict_mask<S: Scalar>(model: &SegModel<S>, image: &[f32], size: usize) -> Result<Vec<u8>> {
    if image.len() != size * size {
        return Err(Error::invalid(
            "predict",
            format!("image has {} pixels, expected {}", image.len(), size * size),
        ));
    }
    let data: Vec<S> = image.iter().map(|&v| S::of(v as f64)).collect();
    let x = Tensor::from_vec(vec![1, 1, size, size], data)?;
    let out = model.forward(&x, Mode::Eval)?;
    Ok(argmax_masks(&out.logits))
}
