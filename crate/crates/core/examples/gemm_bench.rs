use ndarray::Array2;
use std::time::Instant;

fn main() {
    for &(m, k, n) in &[(16384usize, 288usize, 32usize), (4096, 288, 64), (1024, 576, 128), (2048, 2048, 2048)] {
        let a = Array2::<f32>::from_elem((m, k), 1.0f32);
        let b = Array2::<f32>::from_elem((k, n), 0.5f32);
        let t0 = Instant::now();
        let mut reps = 0;
        let mut acc = 0.0f32;
        while t0.elapsed().as_secs_f64() < 1.0 {
            let c = a.dot(&b);
            acc += c[[0, 0]];
            reps += 1;
        }
        let secs = t0.elapsed().as_secs_f64();
        let flops = 2.0 * m as f64 * k as f64 * n as f64 * reps as f64;
        println!("f32 {}x{}x{}: {:.2} GFLOPS ({} reps, acc {})", m, k, n, flops / secs / 1e9, reps, acc);
    }
    let m = 1024; let k = 1024; let n = 1024;
    let a = Array2::<f64>::from_elem((m, k), 1.0f64);
    let b = Array2::<f64>::from_elem((k, n), 0.5f64);
    let t0 = Instant::now();
    let mut reps = 0;
    while t0.elapsed().as_secs_f64() < 1.0 { let c = a.dot(&b); std::hint::black_box(&c); reps += 1; }
    let secs = t0.elapsed().as_secs_f64();
    println!("f64 1024^3: {:.2} GFLOPS", 2.0 * (m * k * n * reps) as f64 / secs / 1e9);
}
