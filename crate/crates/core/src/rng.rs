//! Seed splitting. Every random consumer derives its own stream from the
//! root seed so that adding draws in one component never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams used by a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Corpus,
    TestCorpus,
    Init,
    Shuffle,
    Perturbation,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Corpus => 0x636f_7270,
            Stream::TestCorpus => 0x7465_7374,
            Stream::Init => 0x696e_6974,
            Stream::Shuffle => 0x7368_7566,
            Stream::Perturbation => 0x7065_7274,
        }
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: Stream) -> u64 {
    mix(root ^ mix(stream.tag()))
}

pub fn stream_rng(root: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream))
}
