//! Times the phases of one training step on the full model so optimization
//! effort lands where the time actually goes.

use std::time::Instant;

use hfd_core::layers::{seeded_rng, uniform_tensor, Mode};
use hfd_core::losses::{self, LossConfig};
use hfd_core::model::{ModelConfig, SegModel};
use hfd_core::tensor::Tape;

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
        println!("{label:24} {:7.2} ms", t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
    };

    time("eval forward", &mut || {
        std::hint::black_box(model.forward(&x, Mode::Eval).unwrap().logits.data()[0]);
    });
    time("train forward (tape)", &mut || {
        let tape = Tape::<f32>::new();
        model.visit_params(&mut |_, t| *t = tape.var(t));
        let out = model.forward(&x, Mode::Train).unwrap();
        std::hint::black_box(out.logits.data()[0]);
        model.visit_params(&mut |_, t| *t = t.detach());
    });
    time("forward+loss+backward", &mut || {
        let tape = Tape::<f32>::new();
        model.visit_params(&mut |_, t| *t = tape.var(t));
        let out = model.forward(&x, Mode::Train).unwrap();
        let loss = losses::seg_loss(&out.logits, &labels, &cfg).unwrap();
        tape.backward(&loss).unwrap();
        std::hint::black_box(loss.item());
        model.visit_params(&mut |_, t| *t = t.detach());
    });
}
