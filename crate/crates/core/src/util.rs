use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tensor};

pub(crate) type Rng = ChaCha8Rng;

/// Independent generator for one named consumer, so enabling or disabling a
/// component never shifts another component's random stream.
pub(crate) fn stream_rng(seed: u64, tag: &str) -> Rng {
    // FNV-1a over the tag
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Tensor with i.i.d. `N(0, std^2)` entries.
pub(crate) fn normal_tensor(rng: &mut Rng, shape: impl Into<Vec<usize>>, std: Real) -> Tensor {
    let d = Normal::new(0.0, std as f64).expect("finite std");
    Tensor::from_fn(shape, |_| d.sample(rng) as Real)
}
