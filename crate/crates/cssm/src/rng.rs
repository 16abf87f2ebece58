//! Counter-based RNG with a fixed, portable algorithm.
//!
//! Corpora and training runs must be reproducible byte-for-byte from seeds on
//! any platform, so the generator is pinned to splitmix64 applied to a
//! (seed, stream, counter) triple rather than delegated to a library whose
//! algorithm may change between versions. The full state is four u64 words,
//! which is exactly what the checkpoint format stores.

/// Deterministic counter-based generator.
///
/// `output(i) = mix(seed ^ mix(stream), counter)` — jumping to any counter
/// value is O(1), and independent streams never collide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
    stream: u64,
    counter: u64,
    /// Cached second Box-Muller output (f64 bits; 0 = empty).
    spare: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream derived from the same seed; used to decouple e.g.
    /// object placement from nuisance injection so one can be toggled without
    /// shifting the other.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        CounterRng {
            seed,
            stream,
            counter: 0,
            spare: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let base = self.seed ^ splitmix64(self.stream.wrapping_mul(GOLDEN) ^ GOLDEN);
        let out = splitmix64(base.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        // Modulo bias is irrelevant at the n << 2^64 scales used here.
        self.next_u64() % n.max(1)
    }

    /// Standard normal via Box-Muller; caches the paired draw.
    pub fn gaussian(&mut self) -> f64 {
        if self.spare != 0 {
            let v = f64::from_bits(self.spare);
            self.spare = 0;
            return v;
        }
        let u1 = (1.0 - self.next_f64()).max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        let z0 = r * theta.cos();
        let z1 = r * theta.sin();
        self.spare = z1.to_bits();
        z0
    }

    /// Full state as stored in checkpoints.
    pub fn state(&self) -> [u64; 4] {
        [self.seed, self.stream, self.counter, self.spare]
    }

    pub fn from_state(s: [u64; 4]) -> Self {
        CounterRng {
            seed: s[0],
            stream: s[1],
            counter: s[2],
            spare: s[3],
        }
    }
}
