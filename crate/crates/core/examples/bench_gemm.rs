// Rough throughput probe for the raw kernels at training shapes.
use reglab::tensor::Tensor;
use reglab::rng::RngStream;
use std::time::Instant;

fn main() {
    let mut rng = RngStream::new(1, "bench");
    let sizes = [(2112usize, 64usize, 192usize), (2112, 64, 128), (2112, 128, 64), (33, 33, 16)];
    for (m, k, n) in sizes {
        let a = Tensor::param(&[m, k], (0..m * k).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap();
        let b = Tensor::param(&[k, n], (0..k * n).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap();
        let reps = (2_000_000_000 / (2 * m * k * n)).max(3);
        let t0 = Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            let c = a.matmul(&b).unwrap();
            sink += c.data()[0];
        }
        let fwd = t0.elapsed().as_secs_f64();
        let gf = (2 * m * k * n * reps) as f64 / fwd / 1e9;
        // forward+backward through the graph
        let t0 = Instant::now();
        let reps2 = (reps / 3).max(2);
        for _ in 0..reps2 {
            let c = a.matmul(&b).unwrap().sum_all();
            c.backward().unwrap();
            a.zero_grad(); b.zero_grad();
            sink += c.item();
        }
        let both = t0.elapsed().as_secs_f64();
        let gf2 = (3 * 2 * m * k * n * reps2) as f64 / both / 1e9;
        println!("[{m}x{k}x{n}] fwd {gf:.2} GF/s | fwd+bwd {gf2:.2} GF/s (sink {sink:.1})");
    }
}
