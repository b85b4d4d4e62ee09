// Ad-hoc timing of the forward-path pieces (not part of the example suite).
use sansaw::kmeans::kmeans_1d;
use sansaw::nn::Conv2d;
use sansaw::rng::SeededRng;
use sansaw::san::{self, SanConfig, SanState};
use sansaw::tensor::Tensor;
use std::time::Instant;

fn main() {
    let mut rng = SeededRng::new(1);
    let vals: Vec<f32> = (0..4096).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    let t0 = Instant::now();
    for _ in 0..100 {
        let _ = kmeans_1d(&vals, 5, 50);
    }
    println!("kmeans 4096x100: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);

    let f = Tensor::<f32>::uniform(&[1, 16, 64, 64], 0.0, 1.0, &mut rng).unwrap();
    let state = SanState::<f32>::new(16, 4, &mut rng).unwrap();
    let cfg = SanConfig::default();
    let t0 = Instant::now();
    for _ in 0..100 {
        let _ = san::forward(&f, &state, &cfg, None, false).unwrap();
    }
    println!("san fwd x100: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);

    let conv = Conv2d::<f32>::new_he(16, 16, 3, &mut rng).unwrap();
    let t0 = Instant::now();
    for _ in 0..100 {
        let _ = conv.forward(&f).unwrap();
    }
    println!("conv 16->16 x100: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);

    let f64v = f.to_f64();
    let t0 = Instant::now();
    for _ in 0..100 {
        let mut m: Vec<f64> = f64v.data()[..4096].to_vec();
        m.sort_unstable_by(f64::total_cmp);
        std::hint::black_box(&m);
    }
    println!("f64 sort 4096 x100: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);
}
