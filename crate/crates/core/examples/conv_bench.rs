//! Micro-benchmark of the convolution forward/backward kernels at the
//! backbone's hottest shape (the D2 block).

use std::time::Instant;

use hfd_core::layers::{conv2d, seeded_rng, uniform_tensor, Conv2dParams};
use hfd_core::tensor::{ops, Tape};

fn main() {
    let mut rng = seeded_rng(1, 0);
    let x0 = uniform_tensor::<f32>(&mut rng, vec![8, 48, 32, 32], 1.0);
    let w = uniform_tensor::<f32>(&mut rng, vec![32, 48, 3, 3], 0.1);
    let b = uniform_tensor::<f32>(&mut rng, vec![32], 0.0);
    let params = Conv2dParams::new(w, b, 1, 1).unwrap();

    let reps = 30;
    let macs = 8.0 * 32.0 * 48.0 * 9.0 * 32.0 * 32.0;

    let t0 = Instant::now();
    for _ in 0..reps {
        let y = conv2d(&x0, &params).unwrap();
        std::hint::black_box(y.data()[0]);
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "forward : {:7.2} ms  {:6.2} GFLOP/s",
        fwd * 1e3,
        2.0 * macs / fwd / 1e9
    );

    let t1 = Instant::now();
    for _ in 0..reps {
        let tape = Tape::<f32>::new();
        let x = tape.var(&x0);
        let y = conv2d(&x, &params).unwrap();
        let loss = ops::sum(&y).unwrap();
        tape.backward(&loss).unwrap();
        std::hint::black_box(tape.grad(&x).unwrap().data()[0]);
    }
    let both = t1.elapsed().as_secs_f64() / reps as f64;
    println!(
        "fwd+bwd : {:7.2} ms  {:6.2} GFLOP/s (3x forward work)",
        both * 1e3,
        6.0 * macs / both / 1e9
    );
}
