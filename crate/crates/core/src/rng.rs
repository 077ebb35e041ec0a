//! Counter-based SplitMix64 generator.
//!
//! The stream is fully determined by a 64-bit `key` and a 64-bit `counter`:
//!
//! ```text
//! GOLDEN   = 0x9E3779B97F4A7C15
//! mix(z)   : z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//!            z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!            z ^ (z >> 31)                       (wrapping u64 arithmetic)
//! next_u64 : counter += 1; mix(key + counter * GOLDEN)
//! ```
//!
//! With `key = seed` this reproduces the classic SplitMix64 sequence. Child
//! streams use `key' = mix(key ^ ((id + 1) * 0xD1B54A32D192ED03))`, so stream
//! derivation never depends on how many values the parent has produced.
//!
//! * `uniform()` = `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * `below(n)` = high 64 bits of `next_u64 * n` (128-bit product).
//! * `normal()` is Box–Muller: `u1 = 1 - uniform()`, `u2 = uniform()`,
//!   `r = sqrt(-2 ln u1)`; it returns `r cos(2π u2)` and caches
//!   `r sin(2π u2)` for the next call.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_MUL: u64 = 0xD1B5_4A32_D192_ED03;

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { key: seed, counter: 0, spare_normal: None }
    }

    /// Independent child stream; does not advance `self`.
    pub fn substream(&self, id: u64) -> Self {
        Self::new(mix64(self.key ^ id.wrapping_add(1).wrapping_mul(STREAM_MUL)))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Fisher–Yates shuffle driven by `below`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            p.swap(i, j);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_splitmix64() {
        // Reference values of SplitMix64 seeded with 1234567.
        let mut r = CounterRng::new(1234567);
        assert_eq!(r.next_u64(), 6457827717110365317);
        assert_eq!(r.next_u64(), 3203168211198807973);
        assert_eq!(r.next_u64(), 9817491932198370423);
    }

    #[test]
    fn substreams_are_stable_and_distinct() {
        let mut parent = CounterRng::new(7);
        let a = parent.substream(3).next_u64();
        parent.next_u64();
        assert_eq!(parent.substream(3).next_u64(), a);
        assert_ne!(parent.substream(4).next_u64(), a);
    }

    #[test]
    fn uniform_range_and_normal_moments() {
        let mut r = CounterRng::new(42);
        let n = 200_000;
        let xs = r.normals(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(5) < 5);
        }
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = CounterRng::new(1).permutation(10);
        p.sort_unstable();
        assert_eq!(p, (0..10).collect::<Vec<_>>());
    }
}
