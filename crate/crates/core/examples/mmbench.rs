use crlab_core::numerics::{Matrix, RngState};
use std::time::Instant;

fn main() {
    let mut rng = RngState::new(1);
    let a = Matrix::from_vec(224, 64, (0..224 * 64).map(|_| rng.normal()).collect()).unwrap();
    let b = Matrix::from_vec(64, 64, (0..64 * 64).map(|_| rng.normal()).collect()).unwrap();
    let reps = 2000;
    let t = Instant::now();
    let mut acc = 0.0;
    for _ in 0..reps {
        let c = a.matmul(&b).unwrap();
        acc += c.data()[0];
    }
    let el = t.elapsed().as_secs_f64();
    let flops = 2.0 * 224.0 * 64.0 * 64.0 * reps as f64;
    println!("matmul: {:.2} GFLOP/s ({acc})", flops / el / 1e9);

    let t = Instant::now();
    let mut acc = 0.0;
    for _ in 0..reps {
        let c = a.transposed_matmul(&a).unwrap();
        acc += c.data()[0];
    }
    let el = t.elapsed().as_secs_f64();
    let flops = 2.0 * 224.0 * 64.0 * 64.0 * reps as f64;
    println!("transposed_matmul: {:.2} GFLOP/s ({acc})", flops / el / 1e9);

    let t = Instant::now();
    let mut acc = 0.0;
    for _ in 0..reps {
        let c = a.matmul_transposed(&b).unwrap();
        acc += c.data()[0];
    }
    let el = t.elapsed().as_secs_f64();
    let flops = 2.0 * 224.0 * 64.0 * 64.0 * reps as f64;
    println!("matmul_transposed: {:.2} GFLOP/s ({acc})", flops / el / 1e9);
}
