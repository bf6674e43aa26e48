//! Per-layer conv timings across the backbone's shapes.

use std::time::Instant;

use hfd_core::layers::{conv2d, seeded_rng, uniform_tensor, Conv2dParams};
use hfd_core::tensor::{ops, Tape};

fn main() {
    let mut rng = seeded_rng(1, 0);
    let shapes: Vec<(&str, Vec<usize>, usize, usize, usize)> = vec![
        ("enc1 1->16 s2 @64", vec![8, 1, 64, 64], 16, 2, 1),
        ("enc2 16->32 s2 @32", vec![8, 16, 32, 32], 32, 2, 1),
        ("enc3 32->64 s2 @16", vec![8, 32, 16, 16], 64, 2, 1),
        ("dec1 96->32 s1 @16", vec![8, 96, 16, 16], 32, 1, 1),
        ("dec2 48->32 s1 @32", vec![8, 48, 32, 32], 32, 1, 1),
        ("dec3 32->2  s1 @32", vec![8, 32, 32, 32], 2, 1, 1),
    ];
    let reps = 30;
    for (name, xs, cout, stride, pad) in shapes {
        let cin = xs[1];
        let x0 = uniform_tensor::<f32>(&mut rng, xs.clone(), 1.0);
        let w = uniform_tensor::<f32>(&mut rng, vec![cout, cin, 3, 3], 0.1);
        let b = uniform_tensor::<f32>(&mut rng, vec![cout], 0.0);
        let p = Conv2dParams::new(w, b, stride, pad).unwrap();
        let oh = (xs[2] + 2 * pad - 3) / stride + 1;
        let macs = (xs[0] * cout * cin * 9 * oh * oh) as f64;

        let t0 = Instant::now();
        for _ in 0..reps {
            let tape = Tape::<f32>::new();
            let x = tape.var(&x0);
            let wv = tape.var(&p.weight);
            let pp = Conv2dParams::new(wv, p.bias.clone(), stride, pad).unwrap();
            let y = conv2d(&x, &pp).unwrap();
            let loss = ops::sum(&y).unwrap();
            tape.backward(&loss).unwrap();
            std::hint::black_box(loss.item());
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        println!(
            "{name:20} {:7.2} ms   {:6.2} GFLOP/s",
            dt * 1e3,
            6.0 * macs / dt / 1e9
        );
    }
}
