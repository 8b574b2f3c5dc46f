//! Pinned pseudo-random generator.
//!
//! Every random choice in the workbench (weight init, column sampling, data
//! synthesis, shuffling) goes through this generator, so a run is
//! reproducible bit-for-bit on any platform: SplitMix64 expands the seed into
//! xoshiro256** state, uniforms take the top 53 bits, and normals come from
//! Box-Muller with the second member of each pair cached.

use std::f64::consts::PI;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// One SplitMix64 step: advances `state` and returns the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// First SplitMix64 output for a given state, used to derive child seeds.
pub fn mix_seed(seed: u64) -> u64 {
    let mut s = seed;
    splitmix64(&mut s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    state: [u64; 4],
    pending_gaussian: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        debug_assert!(state.iter().any(|&w| w != 0));
        Rng {
            state,
            pending_gaussian: None,
        }
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

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n` as `floor(uniform * n)`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be nonempty");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal via Box-Muller. Uniforms are consumed in pairs; the
    /// sine member is held back and returned by the next call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.pending_gaussian.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.pending_gaussian = Some(radius * theta.sin());
        radius * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        let n = items.len();
        for i in 0..n.saturating_sub(1) {
            let j = i + self.index(n - i);
            items.swap(i, j);
        }
    }

    #[cfg(test)]
    pub(crate) fn raw_state(&self) -> [u64; 4] {
        self.state
    }
}
