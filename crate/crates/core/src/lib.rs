//! Directed-graph embeddings with dual amplitude/phase encoders.

pub mod cli;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod objective;
pub mod oracles;
pub mod tensor;
pub mod trainer;

pub use error::{DuplexError, Result};

/// Mixes a base seed with a path of tags (epoch, layer, ...) into an
/// independent stream seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}
