//! Narrows down backward-pass cost: backbone alone, with the fusion head,
//! and with each loss term.

use std::time::Instant;

use hfd_core::backbone::backbone_forward;
use hfd_core::layers::{seeded_rng, uniform_tensor, Mode};
use hfd_core::losses::{self, LossConfig};
use hfd_core::model::{ModelConfig, SegModel};
use hfd_core::tensor::{ops, Tape};

fn main() {
    let mut rng = seeded_rng(1, 0);
    let mut model = SegModel::<f32>::init(&mut rng, &ModelConfig::full(2));
    let x = uniform_tensor::<f32>(&mut rng, vec![8, 1, 64, 64], 0.5);
    let labels: Vec<u8> = (0..8 * 64 * 64).map(|i| (i % 2) as u8).collect();
    let cfg = LossConfig::default();
    let reps = 20;

    let time = |label: &str, f: &mut dyn FnMut()| {
        let t0 = Instant::now();
        for _ in 0..reps {
            f();
        }
        println!("{label:28} {:7.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
    };

    time("backbone fwd+bwd (sum q)", &mut || {
        let tape = Tape::<f32>::new();
        model.visit_params(&mut |_, t| *t = tape.var(t));
        let (_, q) = backbone_forward(&x, &model.backbone, Mode::Train).unwrap();
        let loss = ops::sum(&q).unwrap();
        tape.backward(&loss).unwrap();
        std::hint::black_box(loss.item());
        model.visit_params(&mut |_, t| *t = t.detach());
    });
    time("model fwd+bwd (sum logits)", &mut || {
        let tape = Tape::<f32>::new();
        model.visit_params(&mut |_, t| *t = tape.var(t));
        let out = model.forward(&x, Mode::Train).unwrap();
        let loss = ops::sum(&out.logits).unwrap();
        tape.backward(&loss).unwrap();
        std::hint::black_box(loss.item());
        model.visit_params(&mut |_, t| *t = t.detach());
    });
    time("model fwd+bwd (ce)", &mut || {
        let tape = Tape::<f32>::new();
        model.visit_params(&mut |_, t| *t = tape.var(t));
        let out = model.forward(&x, Mode::Train).unwrap();
        let loss = losses::cross_entropy(&out.logits, &labels).unwrap();
        tape.backward(&loss).unwrap();
        std::hint::black_box(loss.item());
        model.visit_params(&mut |_, t| *t = t.detach());
    });
    time("model fwd+bwd (seg_loss)", &mut || {
        let tape = Tape::<f32>::new();
        model.visit_params(&mut |_, t| *t = tape.var(t));
        let out = model.forward(&x, Mode::Train).unwrap();
        let loss = losses::seg_loss(&out.logits, &labels, &cfg).unwrap();
        tape.backward(&loss).unwrap();
        std::hint::black_box(loss.item());
        model.visit_params(&mut |_, t| *t = t.detach());
    });
}
