//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, stream_id)`; every draw is a pure
//! function of that pair and the draw index, so per-node sequences do not
//! depend on which thread runs the node or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use super::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

/// Purposes that get disjoint stream families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Minibatch = 1,
    NoiseW = 2,
    NoisePsi = 3,
    NodeShift = 4,
    Partition = 5,
    Synthetic = 6,
    Init = 7,
    Trial = 8,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Stream for a `(purpose, node, iteration)` triple.
    pub fn derive(seed: u64, purpose: Purpose, node: u64, iteration: u64) -> Self {
        let id = splitmix(splitmix(splitmix(purpose as u64) ^ node) ^ iteration);
        Self {
            seed,
            stream_id: id,
        }
    }

    /// Fresh generator positioned at draw index 0 of this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// `n` i.i.d. normal draws from the start of `stream`.
pub fn gaussian_sample(stream: &RngStream, n: usize, mean: f64, std: f64) -> Vector {
    assert!(
        std >= 0.0 && std.is_finite(),
        "std must be finite and nonnegative"
    );
    let normal = Normal::new(mean, std).expect("valid normal parameters");
    let mut rng = stream.rng();
    Vector::from_fn(n, |_| normal.sample(&mut rng))
}
