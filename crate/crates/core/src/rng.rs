//! Counter-based deterministic random number generation.
//!
//! All randomness in this crate flows through [`CounterRng`], a counter-mode
//! SplitMix64 generator. The construction is fully specified so that any
//! implementation, in any language, reproduces identical streams bit for bit:
//!
//! ```text
//! mix(z):   z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//!           z ^= z >> 27; z *= 0x94D049BB133111EB;
//!           z ^= z >> 31;                       (all mod 2^64)
//! base      = mix(seed * GAMMA) ^ mix(stream)
//! value(i)  = mix(base + (i + 1) * GAMMA)       with GAMMA = 0x9E3779B97F4A7C15
//! ```
//!
//! `value(i)` is a pure function of `(seed, stream, i)`, so sub-streams can be
//! consumed sequentially or addressed randomly; sharded work reproduces the
//! single-threaded stream exactly. Derived values:
//!
//! * uniform in `[0, 1)`: top 53 bits, `(value >> 11) * 2^-53`;
//! * standard Gaussian: Box-Muller on two consecutive uniforms, with the first
//!   shifted into `(0, 1]` to avoid `ln(0)`; both outputs of each pair are
//!   consumed in order.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-mode generator; see the module docs for the exact
/// construction.
#[derive(Debug, Clone)]
pub struct CounterRng {
    base: u64,
    counter: u64,
    pending_gaussian: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            base: mix(seed.wrapping_mul(GAMMA)) ^ mix(stream),
            counter: 0,
            pending_gaussian: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix(self.base.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard Gaussian draw (Box-Muller; pairs are buffered).
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(g) = self.pending_gaussian.take() {
            return g;
        }
        // Shift u1 into (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.pending_gaussian = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.next_gaussian();
        }
    }
}
