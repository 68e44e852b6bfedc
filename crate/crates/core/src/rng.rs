//! Deterministic seed-stream derivation.
//!
//! Every random choice in the pipeline draws from its own named stream,
//! derived from the run's master seed by hashing a string tag plus integer
//! indices. Streams are therefore independent of evaluation order and of how
//! work is scheduled across threads: the stream for, say, the option shuffle
//! of trial (class 3, N=8, template 17) is the same whether that trial is
//! generated first or last.
//!
//! The derivation is a fixed FNV-1a/splitmix64 combination, frozen by unit
//! tests so that artifacts stay reproducible across releases.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// splitmix64 finalizer; diffuses every input bit across the output.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` for the stream named by `tag` and
/// `indices`. Different tags or indices yield (with overwhelming probability)
/// unrelated streams.
pub fn derive(base: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(base);
    for byte in tag.as_bytes() {
        h = (h ^ u64::from(*byte)).wrapping_mul(FNV_PRIME);
    }
    for &ix in indices {
        h = splitmix64(h ^ ix.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    splitmix64(h)
}

/// A ChaCha8 generator seeded with `seed`. ChaCha8 is stable across platforms
/// and `rand_chacha` releases, unlike `StdRng`'s unspecified algorithm.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shorthand: derive a child seed and open a generator on it.
pub fn stream(base: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    seeded_rng(derive(base, tag, indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn distinct_tags_and_indices_decorrelate() {
        let a = derive(7, "template", &[0, 1]);
        let b = derive(7, "template", &[1, 0]);
        let c = derive(7, "options", &[0, 1]);
        let d = derive(8, "template", &[0, 1]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn derivation_is_frozen() {
        // Pinned values: a change here silently breaks every stored artifact,
        // so the algorithm is locked by these literals.
        assert_eq!(derive(0, "corpus", &[]), 0x1fe3_9711_8bf9_1d35);
        assert_eq!(derive(2026, "bootstrap", &[41]), 0x7781_e34e_75b5_da57);
    }

    #[test]
    fn streams_are_reproducible() {
        let mut r1 = stream(99, "probe", &[4, 2]);
        let mut r2 = stream(99, "probe", &[4, 2]);
        for _ in 0..16 {
            assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
        }
    }
}
