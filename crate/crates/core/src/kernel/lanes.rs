//! 16-lane integer primitives mirroring one 512-bit register of 32-bit lanes.

/// 16 unsigned 32-bit lanes; arithmetic is modular.
pub type Lane16 = [u32; 16];

/// Inclusive prefix sum via the shift-add doubling schedule.
///
/// Offsets 1, 2, 4, 8: after the four rounds lane `i` holds the modular sum
/// of lanes `0..=i`, identical to a scalar scan for every input.
pub fn prefix_sum16(v: Lane16) -> Lane16 {
    let mut s = v;
    for offset in [1usize, 2, 4, 8] {
        let mut shifted = [0u32; 16];
        shifted[offset..16].copy_from_slice(&s[..16 - offset]);
        for i in 0..16 {
            s[i] = s[i].wrapping_add(shifted[i]);
        }
    }
    s
}

/// Per-lane popcount of 16 metadata words.
pub fn row_popcounts(metadata: &[u32; 16]) -> Lane16 {
    let mut out = [0u32; 16];
    for (lane, &word) in out.iter_mut().zip(metadata.iter()) {
        *lane = word.count_ones();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scalar_prefix(v: &Lane16) -> Lane16 {
        let mut out = [0u32; 16];
        let mut acc = 0u32;
        for i in 0..16 {
            acc = acc.wrapping_add(v[i]);
            out[i] = acc;
        }
        out
    }

    #[test]
    fn zeros_and_ones() {
        assert_eq!(prefix_sum16([0; 16]), [0; 16]);
        let expect: Lane16 = std::array::from_fn(|i| i as u32 + 1);
        assert_eq!(prefix_sum16([1; 16]), expect);
    }

    #[test]
    fn random_lanes_match_scalar_scan() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..1000 {
            let v: Lane16 = std::array::from_fn(|_| rng.gen());
            assert_eq!(prefix_sum16(v), scalar_prefix(&v));
        }
    }

    #[test]
    fn popcounts_match_scalar() {
        assert_eq!(row_popcounts(&[0; 16]), [0; 16]);
        assert_eq!(row_popcounts(&[u32::MAX; 16]), [32; 16]);
        let mut rng = StdRng::seed_from_u64(43);
        for _ in 0..200 {
            let words: [u32; 16] = std::array::from_fn(|_| rng.gen());
            let counts = row_popcounts(&words);
            for i in 0..16 {
                assert_eq!(counts[i], words[i].count_ones());
            }
        }
    }
}
