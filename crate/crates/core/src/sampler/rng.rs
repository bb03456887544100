//! Counter-based random streams.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(seed, iteration, subject, phase)`, so results do not depend on thread
//! scheduling or on the order in which subjects are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Phase {
    Init = 1,
    TransformedTemplate = 2,
    Template = 3,
    Forward = 4,
    Reverse = 5,
    BetaSigma = 6,
    Alpha = 7,
    Rho = 8,
    BaselineWeights = 9,
    BaselineTransform = 10,
    BaselineSigma = 11,
    Synth = 12,
    Audit = 13,
    Scale = 14,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, iteration: u64, subject: usize, phase: Phase) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ iteration);
    h = splitmix64(h ^ subject as u64);
    h = splitmix64(h ^ phase as u64);
    for chunk in key.chunks_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, 3, 1, Phase::Forward).random();
        let b: u64 = stream(7, 3, 1, Phase::Forward).random();
        assert_eq!(a, b);
        let others = [
            stream(8, 3, 1, Phase::Forward).random::<u64>(),
            stream(7, 4, 1, Phase::Forward).random::<u64>(),
            stream(7, 3, 2, Phase::Forward).random::<u64>(),
            stream(7, 3, 1, Phase::Reverse).random::<u64>(),
        ];
        assert!(others.iter().all(|&o| o != a));
    }
}
