// Per-kernel throughput probe (internals exposed for the bench below).
use reglab::rng::RngStream;
use reglab::tensor::bench_kernels;
use std::time::Instant;

fn main() {
    let mut rng = RngStream::new(1, "bench");
    for (m, k, n) in [(2112usize, 64usize, 192usize), (2112, 128, 64), (33, 33, 16)] {
        let a: Vec<f64> = (0..m * k).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let g: Vec<f64> = (0..m * n).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let flops = 2 * m * k * n;
        let reps = (1_500_000_000 / flops).max(3);
        let mut da = vec![0.0; m * k];
        let mut db = vec![0.0; k * n];
        let mut c = vec![0.0; m * n];
        let t0 = Instant::now();
        for _ in 0..reps { bench_kernels::gemm(m, k, n, &a, &b, &mut c); }
        let t_g = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        for _ in 0..reps { bench_kernels::gemm_nt(m, k, n, &g, &b, &mut da); }
        let t_nt = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        for _ in 0..reps { bench_kernels::gemm_tn(m, k, n, &a, &g, &mut db); }
        let t_tn = t0.elapsed().as_secs_f64();
        let gfs = |t: f64| (flops * reps) as f64 / t / 1e9;
        println!("[{m}x{k}x{n}] gemm {:.2} | gemm_nt {:.2} | gemm_tn {:.2} GF/s", gfs(t_g), gfs(t_nt), gfs(t_tn));
    }
}
