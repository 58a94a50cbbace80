//! Counter-based deterministic RNG.
//!
//! Output is a pure function of (seed, stream, counter): no hidden state,
//! so dropout decisions and noise draws are reproducible regardless of
//! evaluation order or thread schedule. Streams are derived by hashing
//! labels, which keeps independent consumers (dropout, init, noise, ...)
//! statistically decoupled without coordination.

/// Stateless RNG key. Every draw is determined by the three fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    pub seed: u64,
    pub stream: u64,
    pub counter: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const STREAM_MUL: u64 = 0xd6e8_feb8_6659_fd93;
const COUNTER_MUL: u64 = 0xca9b_64dc_dcf9_4e29;

// splitmix64 finalizer; full 64-bit avalanche.
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl RngKey {
    pub fn new(seed: u64) -> RngKey {
        RngKey { seed, stream: 0, counter: 0 }
    }

    /// Derives a child stream from a label; the counter carries over.
    pub fn substream(&self, label: &str) -> RngKey {
        RngKey {
            seed: self.seed,
            stream: mix64(self.stream ^ fnv1a(label.as_bytes())),
            counter: self.counter,
        }
    }

    /// Derives a child stream from a numeric label; the counter carries over.
    pub fn substream_u64(&self, label: u64) -> RngKey {
        RngKey {
            seed: self.seed,
            stream: mix64(self.stream ^ mix64(label ^ GOLDEN)),
            counter: self.counter,
        }
    }

    /// Same stream at a given counter.
    pub fn at(&self, counter: u64) -> RngKey {
        RngKey { counter, ..*self }
    }

    fn raw(&self, salt: u64) -> u64 {
        let mut h = mix64(self.seed ^ GOLDEN);
        h = mix64(h ^ self.stream.wrapping_mul(STREAM_MUL));
        h = mix64(h ^ self.counter.wrapping_mul(COUNTER_MUL));
        mix64(h ^ salt)
    }

    /// Uniform draw in [0, 1) with 53 random mantissa bits.
    pub fn uniform(&self) -> f64 {
        (self.raw(0) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box-Muller over two internal uniforms).
    pub fn normal(&self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.raw(1) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.raw(2) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in [0, n) via widening multiply.
    pub fn index(&self, n: usize) -> usize {
        assert!(n > 0, "index bound must be positive");
        ((self.raw(3) as u128 * n as u128) >> 64) as usize
    }
}
