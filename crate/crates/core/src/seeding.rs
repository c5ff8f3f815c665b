//! Every stochastic component draws from a ChaCha stream derived from the
//! single run seed, so results do not depend on thread scheduling or on the
//! order in which components are constructed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-separated stream identifiers for the pipeline's random consumers.
pub mod streams {
    pub const SPLIT: u64 = 0x5350_4c49_0000_0000;
    pub const INIT: u64 = 0x494e_4954_0000_0000;
    pub const SHUFFLE: u64 = 0x5348_5546_0000_0000;
    pub const AUGMENT: u64 = 0x4155_474d_0000_0000;
    pub const SYNTH: u64 = 0x5359_4e54_0000_0000;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// splitmix64 finalizer, used to fold several indices into one stream id.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
