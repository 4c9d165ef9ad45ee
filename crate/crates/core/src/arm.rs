//! Randomization arms.
//!
//! Draw `i` of a seeded generator is a pure function of `(seed, i)`: the
//! ChaCha8 stream is positioned at word `2 i` and one 64-bit word is read,
//! so any draw can be replayed without replaying its predecessors.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Display,
    Suppress,
}

/// Uniform `[0, 1)` value of draw `index`.
pub fn draw(seed: u64, index: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(rng::derive_seed(seed, "arm", 0));
    r.set_word_pos(2 * index as u128);
    rng::unit_f64(r.next_u64())
}

/// Suppress with probability `p`.
pub fn assign_arm(seed: u64, index: u64, p: f64) -> Arm {
    if draw(seed, index) < p {
        Arm::Suppress
    } else {
        Arm::Display
    }
}

/// Sequential assigner handing out consecutive draw indices.
#[derive(Debug, Clone)]
pub struct ArmSequence {
    seed: u64,
    p: f64,
    next: u64,
}

impl ArmSequence {
    pub fn new(seed: u64, p: f64) -> Self {
        Self { seed, p: p.clamp(0.0, 1.0), next: 0 }
    }

    pub fn resume(seed: u64, p: f64, next: u64) -> Self {
        Self { next, ..Self::new(seed, p) }
    }

    pub fn next_index(&self) -> u64 {
        self.next
    }

    /// The next arm and the draw index that produced it.
    pub fn assign(&mut self) -> (Arm, u64) {
        let i = self.next;
        self.next += 1;
        (assign_arm(self.seed, i, self.p), i)
    }
}
