//! Counter-based random numbers with a fixed, platform-independent definition.
//!
//! Draw `n` of a stream with key `k` is `mix(k + (n + 1) * GOLDEN)`, where
//! `mix` is the SplitMix64 finalizer. Gaussians use Box–Muller on two
//! consecutive draws `(u1, u2)`: lane 0 is `r cos(2πu2)`, lane 1 is
//! `r sin(2πu2)` with `r = sqrt(-2 ln u1)`, `u1 ∈ (0, 1]`.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
    spare_gaussian: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng {
            key: mix(seed),
            counter: 0,
            spare_gaussian: None,
        }
    }

    /// An independent stream derived from this generator's key (not its position).
    pub fn fork(&self, stream: u64) -> Self {
        CounterRng {
            key: mix(self.key ^ mix(stream.wrapping_add(1).wrapping_mul(GOLDEN))),
            counter: 0,
            spare_gaussian: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`.
    fn next_open_f64(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "bound must be positive");
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        let u1 = self.next_open_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gaussian = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Fisher–Yates.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
