//! Counter-based deterministic randomness.
//!
//! Every draw is a pure function of (seed, label, counter), so parallel
//! execution order can never change a result and streams are identical
//! across platforms (integer arithmetic only).

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A keyed counter stream: `u64_at(i)` is SplitMix64 output `i` of a
/// stream derived from the seed and a label (e.g. a tensor name).
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, label: &str) -> Self {
        CounterRng {
            key: mix(seed ^ mix(fnv1a(label.as_bytes()))),
        }
    }

    /// Independent substream `s` of this stream.
    pub fn substream(&self, s: u64) -> CounterRng {
        CounterRng {
            key: mix(self.key ^ mix(s.wrapping_mul(GOLDEN).wrapping_add(1))),
        }
    }

    pub fn u64_at(&self, counter: u64) -> u64 {
        mix(self.key.wrapping_add(counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform_at(&self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Approximately standard normal via a 12-uniform Irwin–Hall sum.
    /// Uses counters [12·i, 12·i+12); basic arithmetic only.
    pub fn normal_at(&self, i: u64) -> f64 {
        let base = i.wrapping_mul(12);
        let mut s = 0.0;
        for d in 0..12 {
            s += self.uniform_at(base.wrapping_add(d));
        }
        s - 6.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = CounterRng::new(42, "layers.0.weight");
        let b = CounterRng::new(42, "layers.0.weight");
        let c = CounterRng::new(42, "layers.1.weight");
        let d = CounterRng::new(43, "layers.0.weight");
        for i in 0..64 {
            assert_eq!(a.u64_at(i), b.u64_at(i));
            assert_ne!(a.u64_at(i), c.u64_at(i));
            assert_ne!(a.u64_at(i), d.u64_at(i));
        }
    }

    #[test]
    fn uniform_range_and_mean() {
        let rng = CounterRng::new(7, "u");
        let n = 100_000u64;
        let mut sum = 0.0;
        for i in 0..n {
            let u = rng.uniform_at(i);
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let rng = CounterRng::new(11, "n");
        let n = 50_000u64;
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..n {
            let x = rng.normal_at(i);
            m1 += x;
            m2 += x * x;
        }
        m1 /= n as f64;
        m2 /= n as f64;
        assert!(m1.abs() < 0.02, "mean {m1}");
        assert!((m2 - 1.0).abs() < 0.03, "var {m2}");
    }

    #[test]
    fn substreams_do_not_collide() {
        let rng = CounterRng::new(5, "t");
        let s0 = rng.substream(0);
        let s1 = rng.substream(1);
        assert_ne!(s0.u64_at(0), s1.u64_at(0));
        assert_ne!(rng.u64_at(0), s0.u64_at(0));
    }
}
