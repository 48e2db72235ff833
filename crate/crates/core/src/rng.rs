// Copyright 2026 Cogflow Contributors
// SPDX-License-Identifier: Apache-2.0

//! Counter-based random streams.
//!
//! Every random quantity in a simulation is addressed by
//! `(master seed, particle, stream kind, event index)`. The first three
//! select a ChaCha8 key; the event index selects the ChaCha stream (nonce).
//! A draw therefore never depends on how many draws other particles, other
//! streams, or other events consumed, which makes ensembles independent of
//! worker count and keeps jump epochs independent of jump targets.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which part of the probability space a stream serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    /// Renewal epochs (waiting times, per-tick Bernoulli draws).
    Time = 1,
    /// Jump targets.
    Space = 2,
    /// Initial positions.
    Initial = 3,
    /// Brownian increments of the thread model.
    Path = 4,
    /// Generator switching of the thread model.
    Switch = 5,
}

/// SplitMix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One independent family of generators, indexed by event number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventStream {
    key: [u64; 4],
}

impl EventStream {
    pub fn new(master_seed: u64, index: u64, kind: StreamKind) -> Self {
        let mut state = mix64(master_seed ^ 0x6a09_e667_f3bc_c908);
        state = mix64(state ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        state = mix64(state ^ (kind as u64).wrapping_mul(0xd1b5_4a32_d192_ed03));
        let mut key = [0u64; 4];
        for (i, k) in key.iter_mut().enumerate() {
            *k = mix64(state.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        }
        Self { key }
    }

    /// Generator dedicated to one event.
    pub fn event(&self, event: u64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        for (chunk, k) in seed.chunks_exact_mut(8).zip(self.key) {
            chunk.copy_from_slice(&k.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(event);
        rng
    }
}

/// The time and space streams of one particle, plus its initial-position
/// stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    pub time: EventStream,
    pub space: EventStream,
    pub initial: EventStream,
}

impl RngStreams {
    pub fn for_particle(master_seed: u64, particle: u64) -> Self {
        Self {
            time: EventStream::new(master_seed, particle, StreamKind::Time),
            space: EventStream::new(master_seed, particle, StreamKind::Space),
            initial: EventStream::new(master_seed, particle, StreamKind::Initial),
        }
    }
}

/// Offset separating per-tick events of the discrete model from the
/// waiting-time events of the continuous model on the same time stream.
pub const TICK_EVENT_BASE: u64 = 1 << 62;
