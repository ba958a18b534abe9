use ndarray::{Array1, Array3};
use revfp_core::nn::*;
use std::time::Instant;

fn main() {
    let model = build_model::<f32>(1, 40, 1997, TargetMode::Volume, &ArchConfig::default(), 1).unwrap();
    let x = Array3::from_shape_fn((1, 40, 1997), |(_, b, t)| ((b * 7 + t) % 13) as f32 * 0.1 - 0.6);
    for _ in 0..3 {
        let (out, cache) = model.forward(&x, Mode::Train, 1);
        let (_, dout) = loss_and_grad(&out, &Array1::from_vec(vec![0.3f32]));
        let _ = model.backward(&cache, dout, 1e-4);
    }
    let n = 20;
    let t0 = Instant::now();
    for i in 0..n {
        let (out, cache) = model.forward(&x, Mode::Train, i);
        let (_, dout) = loss_and_grad(&out, &Array1::from_vec(vec![0.3f32]));
        let g = model.backward(&cache, dout, 1e-4);
        std::hint::black_box(&g);
    }
    let both = t0.elapsed().as_secs_f64() / n as f64;
    println!("forward+backward {:.1} ms ({:.1} samp/s single-thread)", both*1e3, 1.0/both);
}
