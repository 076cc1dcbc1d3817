//! Portable pseudo-random stream used for every seeded decision in the crate.
//!
//! The generator is xoshiro256** (Blackman & Vigna), with its 256-bit state
//! expanded from a single `u64` seed by four successive SplitMix64 outputs.
//! Derived draws are defined here so other implementations can reproduce the
//! exact same streams:
//!
//! * `below(n)`: rejection sampling. Draw `x = next_u64()` until
//!   `x >= (2^64 - n) mod n`, then return `x mod n`.
//! * `unit_f64()`: `(next_u64() >> 11) * 2^-53`, uniform in `[0, 1)`.
//! * `range_f32(lo, hi)`: `lo + unit_f64() * (hi - lo)` evaluated in `f64`,
//!   rounded to `f32` and clamped into `[lo, hi]`.

#[derive(Debug, Clone)]
pub struct FaultRng {
    state: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl FaultRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        FaultRng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform integer in `0..n`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range_f32(&mut self, lo: f32, hi: f32) -> f32 {
        let v = (lo as f64 + self.unit_f64() * (hi as f64 - lo as f64)) as f32;
        v.clamp(lo, hi)
    }
}
