// scratch benchmark, not part of the repo
use std::time::Instant;
use veinseg::tensor::*;

fn bench_gemm(m: usize, k: usize, n: usize, reps: usize) -> f64 {
    let a = vec![1.0f32; m * k];
    let b = vec![1.0f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        gemm(m, k, n, 1.0, &a, false, &b, false, 0.0, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64();
    (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9
}

fn main() {
    for (m, k, n) in [(256usize, 4608usize, 2048usize), (128, 1728, 8192), (64, 585, 32768), (512, 2304, 512)] {
        let gf = bench_gemm(m, k, n, 5);
        println!("gemm {}x{}x{}: {:.1} GFLOP/s", m, k, n, gf);
    }

    // conv5-like layer: batch 8, 512->256 3x3 at 16x16
    let geom = ConvGeometry::new((3, 3), 1, 1, 1);
    let input = Tensor::<f32>::filled(vec![8, 512, 16, 16], 0.5);
    let weight = Tensor::<f32>::filled(vec![256, 512, 3, 3], 0.01);
    let bias = Tensor::<f32>::zeros(vec![256]);
    let t0 = Instant::now();
    let reps = 5;
    for _ in 0..reps {
        let out = conv2d_forward(&input, &weight, Some(&bias), &geom).unwrap();
        std::hint::black_box(&out);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let flops = 2.0 * 8.0 * 256.0 * 512.0 * 9.0 * 256.0;
    println!("conv 512->256@16x16 b8 fwd: {:.1} ms, {:.1} GFLOP/s", dt * 1e3, flops / dt / 1e9);

    let go = Tensor::<f32>::filled(vec![8, 256, 16, 16], 0.1);
    let t0 = Instant::now();
    for _ in 0..reps {
        let g = conv2d_backward(&input, &weight, &geom, &go).unwrap();
        std::hint::black_box(&g);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("conv backward: {:.1} ms, {:.1} GFLOP/s", dt * 1e3, 2.0 * flops / dt / 1e9);

    // grouped conv: 128->128, C=32 at 16x16
    let geom_g = ConvGeometry::new((3, 3), 1, 1, 32);
    let input_g = Tensor::<f32>::filled(vec![8, 128, 16, 16], 0.5);
    let weight_g = Tensor::<f32>::filled(vec![128, 4, 3, 3], 0.01);
    let t0 = Instant::now();
    for _ in 0..50 {
        let out = conv2d_forward(&input_g, &weight_g, None, &geom_g).unwrap();
        std::hint::black_box(&out);
    }
    println!("grouped conv fwd x50: {:.1} ms", t0.elapsed().as_secs_f64() * 1e3);
}
