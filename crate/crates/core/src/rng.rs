//! Deterministic random numbers: SplitMix64 core, Box-Muller gaussians, and
//! the seed-derivation scheme used to give every dataset item and training
//! step its own independent stream.
//!
//! The whole crate's reproducibility contract rests on this module: the
//! state is a single `u64`, so it serializes exactly, and derived streams
//! depend only on (master seed, stream index), never on consumption order.

/// SplitMix64 generator. Passes through all 2^64 states; zero is a valid seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Raw state, for exact persistence.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn from_state(state: u64) -> Self {
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift bounding; bias is < 2^-64 * n, irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call so the
    /// state stays a single u64 (no cached spare value to persist).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        // 1 - u1 is in (0, 1], so the log is finite.
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bool(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }
}

/// Independent stream seed for item/step `stream` under `master`.
///
/// One SplitMix64 scramble of the xored pair; streams with different indices
/// land in unrelated regions of the state space.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut r = Rng::new(master ^ stream.wrapping_mul(0xA24B_AED4_963E_E407));
    r.next_u64()
}
