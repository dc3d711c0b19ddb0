//! Counter-based random streams.
//!
//! Every Monte Carlo cell owns a stream that is a pure function of
//! `(seed, cell_index, counter)`, so the order in which cells are visited,
//! and by which thread, never changes a result.
//!
//! The generator is SplitMix64 evaluated at an explicit counter: the
//! `n`-th output of stream `key` is `mix64(key + (n + 1) * GAMMA)`. Normal
//! variates use the Box–Muller transform on pairs of 53-bit uniforms in
//! `(0, 1)`; each pair of uniforms yields two normals (cosine then sine).

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 / Stafford "Mix13" finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the stream key of one cell from the run seed.
#[inline]
pub fn stream_key(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(GAMMA)))
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, index: u64) -> Self {
        Self {
            key: stream_key(seed, index),
            counter: 0,
        }
    }

    /// Output `n` of the stream, independent of any state.
    #[inline]
    pub fn at(key: u64, n: u64) -> u64 {
        mix64(key.wrapping_add(n.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = Self::at(self.key, self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }

    /// Uniform in the open interval (0, 1).
    #[inline]
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Two independent standard normals.
    #[inline]
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (radius * c, radius * s)
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_a_function_of_key_and_counter() {
        let mut a = CounterRng::new(7, 42);
        let key = stream_key(7, 42);
        for n in 0..16 {
            assert_eq!(a.next_u64(), CounterRng::at(key, n));
        }
        assert_eq!(a.counter(), 16);
    }

    #[test]
    fn distinct_cells_get_distinct_streams() {
        let a: Vec<u64> = {
            let mut r = CounterRng::new(1, 0);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = CounterRng::new(1, 1);
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_ne!(a, b);
    }

    #[test]
    fn uniforms_stay_open() {
        let mut r = CounterRng::new(0, 0);
        for _ in 0..10_000 {
            let u = r.next_open01();
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = CounterRng::new(3, 9);
        let n = 200_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n / 2 {
            let (a, b) = r.next_normal_pair();
            s1 += a + b;
            s2 += a * a + b * b;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }
}
