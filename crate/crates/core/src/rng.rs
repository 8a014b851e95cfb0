//! Counter-based random substreams.
//!
//! Every random draw in the library comes from a ChaCha8 generator keyed by a
//! 64-bit seed and addressed by a 64-bit stream id, so results do not depend
//! on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags folded into stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Stage1 = 1,
    Stage2 = 2,
    Extension = 3,
    Calibration = 4,
    Integration = 5,
}

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for `(replicate, purpose, index)`; the index is a group or block
/// number below 2^24.
pub fn stream_id(replicate: u64, purpose: Purpose, index: u32) -> u64 {
    debug_assert!(index < 1 << 24);
    (replicate << 32) | ((purpose as u64) << 24) | u64::from(index & 0x00ff_ffff)
}

/// Derives an independent 64-bit seed for a sub-computation.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    substream(seed, stream).next_u64()
}
