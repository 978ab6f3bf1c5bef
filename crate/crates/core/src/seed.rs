//! Named sub-seeds and seeded noise.
//!
//! Every random stream in the crate is derived from one run seed plus a
//! stable name, so no component holds hidden global RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Real, Tensor};

/// Derives an independent seed for the stream called `name`.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the parent seed by splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ splitmix64(h))
}

/// Sub-seed indexed by an integer, e.g. a step or epoch counter.
pub fn indexed_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(sub_seed(seed, name).wrapping_add(splitmix64(index)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Source of standard-normal noise tensors drawn in request order.
pub struct Noise {
    rng: ChaCha8Rng,
}

impl Noise {
    pub fn new(seed: u64) -> Self {
        Noise { rng: rng(seed) }
    }

    pub fn standard_normal<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut self.rng);
                T::from_f64(v).expect("finite draw")
            })
            .collect();
        Tensor::from_vec(shape, data).expect("consistent shape")
    }
}
