//! Deterministic counter-based random streams.
//!
//! Every stochastic choice in the workbench (weight init, anchor picks,
//! register noise, episode sampling, ...) draws from an [`RngStream`]
//! keyed by a 64-bit seed and a purpose label. A stream is a pure
//! function of `(seed, label, draw index)`: the underlying generator is
//! splitmix64 applied to `base + index * GAMMA`, so the i-th draw can be
//! reproduced without replaying the stream and identical draws come out
//! on every platform. Gaussians use Box-Muller on top of the uniform
//! stream, two uniforms per normal.

/// splitmix64 increment (golden-ratio based odd constant).
const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A seeded, labelled stream of reproducible random values.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    base: u64,
    counter: u64,
}

impl RngStream {
    /// Stream identified by `(seed, label)`, positioned at draw 0.
    pub fn new(seed: u64, label: &str) -> Self {
        let base = mix64(seed ^ fnv1a(label.as_bytes()));
        RngStream {
            seed,
            label: label.to_string(),
            base,
            counter: 0,
        }
    }

    /// Derive an independent child stream. Children with distinct
    /// `(label, index)` pairs are decorrelated from each other and from
    /// the parent; the parent's draw position is not consumed.
    pub fn fork(&self, label: &str, index: u64) -> RngStream {
        let child_seed = mix64(
            self.base
                ^ fnv1a(label.as_bytes()).wrapping_add(index.wrapping_mul(GAMMA)),
        );
        let mut child = RngStream::new(child_seed, label);
        child.seed = self.seed;
        child
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of u64 draws consumed so far.
    pub fn draws(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = mix64(self.base.wrapping_add(self.counter.wrapping_mul(GAMMA)));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    ///
    /// Uses 128-bit multiply-shift; the modulo bias is < 2^-64 and
    /// irrelevant for the small `n` used here.
    pub fn next_index(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_index requires n > 0");
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch).
    ///
    /// Consumes exactly two uniforms so the i-th gaussian is a function
    /// of uniform draws (2i, 2i+1) regardless of batching.
    pub fn next_gaussian(&mut self) -> f64 {
        // (0, 1] so ln never sees zero.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fill a buffer with i.i.d. N(0, sigma^2) draws.
    pub fn fill_gaussian(&mut self, out: &mut [f64], sigma: f64) {
        for v in out.iter_mut() {
            *v = sigma * self.next_gaussian();
        }
    }

    /// Sample `k` distinct indices from [0, n) uniformly without
    /// replacement (partial Fisher-Yates), returned in draw order.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n} without replacement");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }
}
