//! Counter-based deterministic random number generation.
//!
//! Every draw is a pure function of `(seed, counter)`, so identical states
//! replay identical streams across runs and platforms. The counter advances
//! by one per raw draw, which makes the state trivially serializable.

/// Stream tags keeping the independent random consumers apart.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SYNTH: u64 = 4;
}

/// Deterministic RNG state. Cheap to copy and to fork into substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, counter: 0 }
    }

    /// Restore a state previously captured (e.g. from a checkpoint).
    pub fn restore(seed: u64, counter: u64) -> Self {
        RngState { seed, counter }
    }

    /// Derive an independent stream keyed by `tags`, without advancing `self`.
    pub fn fork(&self, tags: &[u64]) -> RngState {
        let mut s = mix(self.seed ^ GOLDEN);
        for &t in tags {
            s = mix(s.wrapping_add(GOLDEN) ^ mix(t));
        }
        RngState::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)) ^ GOLDEN);
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller. Consumes two raw draws.
    pub fn normal(&mut self) -> f64 {
        // Guard the log argument away from zero.
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u1 = u1.max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
