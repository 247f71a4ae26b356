//! Counter-based random numbers.
//!
//! Every random quantity in a simulation is a pure function of a
//! [`StreamKey`] and a 128-bit counter, so results do not depend on
//! evaluation order or thread count. The block function is Philox4x32-10.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline(always)]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream identifier for device-to-device draws of a mapped network instance.
pub const D2D_STREAM: u64 = 0;

/// First stream identifier used for per-inference cycle-to-cycle draws.
pub const C2C_STREAM_BASE: u64 = 1 << 32;

/// A `(seed, stream)` pair reduced to a Philox key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    seed: u64,
    stream: u64,
    key: [u32; 2],
}

impl StreamKey {
    pub fn new(seed: u64, stream: u64) -> Self {
        let k = splitmix64(seed ^ splitmix64(stream));
        StreamKey {
            seed,
            stream,
            key: [k as u32, (k >> 32) as u32],
        }
    }

    /// Key for device-to-device sampling under `seed`.
    pub fn device(seed: u64) -> Self {
        Self::new(seed, D2D_STREAM)
    }

    /// Key for the read noise of inference number `item` under `seed`.
    pub fn reads(seed: u64, item: u64) -> Self {
        Self::new(seed, C2C_STREAM_BASE.wrapping_add(item))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    #[inline]
    pub fn block(&self, counter: [u32; 4]) -> [u32; 4] {
        philox4x32_10(counter, self.key)
    }

    /// Standard normal deviate at `counter`.
    #[inline]
    pub fn normal(&self, counter: [u32; 4]) -> f64 {
        let b = self.block(counter);
        box_muller(b)
    }

    /// Uniform deviate in `[0, 1)` at `counter`.
    #[inline]
    pub fn uniform(&self, counter: [u32; 4]) -> f64 {
        let b = self.block(counter);
        unit_f64(b[0], b[1])
    }
}

#[inline(always)]
fn unit_f64(hi: u32, lo: u32) -> f64 {
    let bits = ((u64::from(hi) << 32) | u64::from(lo)) >> 11;
    bits as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline(always)]
fn box_muller(b: [u32; 4]) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1 = 1.0 - unit_f64(b[0], b[1]);
    let u2 = unit_f64(b[2], b[3]);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Sequential generator walking the counter space of one key.
///
/// Used where draws are naturally ordered (weight init, shuffling, random
/// test vectors); the sequence is still a pure function of `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: StreamKey,
    counter: u64,
    buf: [u32; 4],
    used: usize,
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        CounterRng {
            key: StreamKey::new(seed, stream),
            counter: 0,
            buf: [0; 4],
            used: 4,
        }
    }

    pub fn next_u32(&mut self) -> u32 {
        if self.used == 4 {
            let c = self.counter;
            self.buf = self.key.block([c as u32, (c >> 32) as u32, 0, 0]);
            self.counter += 1;
            self.used = 0;
        }
        let v = self.buf[self.used];
        self.used += 1;
        v
    }

    pub fn next_u64(&mut self) -> u64 {
        (u64::from(self.next_u32()) << 32) | u64::from(self.next_u32())
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire's widening multiply with rejection.
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Uniform trit, or uniform sign when `binary`.
    pub fn trit(&mut self, binary: bool) -> i8 {
        if binary {
            if self.next_u32() & 1 == 1 {
                1
            } else {
                -1
            }
        } else {
            self.below(3) as i8 - 1
        }
    }

    pub fn normal(&mut self) -> f64 {
        let b = [
            self.next_u32(),
            self.next_u32(),
            self.next_u32(),
            self.next_u32(),
        ];
        box_muller(b)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0; 4], [0; 2]),
            [0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344],
                [0xa4093822, 0x299f31d0]
            ),
            [0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1]
        );
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a = StreamKey::new(7, 0);
        let b = StreamKey::new(7, 1);
        let c = StreamKey::new(8, 0);
        assert_ne!(a.block([0; 4]), b.block([0; 4]));
        assert_ne!(a.block([0; 4]), c.block([0; 4]));
        assert_eq!(a.normal([1, 2, 3, 4]), StreamKey::new(7, 0).normal([1, 2, 3, 4]));
        assert_ne!(StreamKey::device(3), StreamKey::reads(3, 0));
    }

    #[test]
    fn normal_moments() {
        let key = StreamKey::new(42, 9);
        let n = 200_000u32;
        let (mut s, mut s2) = (0.0, 0.0);
        for i in 0..n {
            let z = key.normal([i, 0, 0, 0]);
            assert!(z.is_finite());
            s += z;
            s2 += z * z;
        }
        let mean = s / f64::from(n);
        let var = s2 / f64::from(n) - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.015, "var {var}");
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut rng = CounterRng::new(1, 2);
        let mut seen = [0usize; 3];
        for _ in 0..3000 {
            let t = rng.trit(false);
            seen[(t + 1) as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 900 && c < 1100), "{seen:?}");
        for _ in 0..100 {
            assert!(rng.trit(true) != 0);
            assert!(rng.below(17) < 17);
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: alloc::vec::Vec<u32> = (0..100).collect();
        CounterRng::new(5, 5).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<alloc::vec::Vec<_>>());
        assert_ne!(v, sorted);
    }
}
