//! Deterministic parameter initialization.
//!
//! Each named parameter draws from its own stream derived from
//! (run seed, parameter name), so adding or removing unrelated parameters
//! never shifts another parameter's initial values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// FNV-1a, fixed here so name hashing never depends on the std hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub struct ParamInit {
    seed: u64,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit { seed }
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a(name.as_bytes()).to_le_bytes());
        key[16..24].copy_from_slice(&fnv1a(b"param-init").to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    /// Fan-in-scaled uniform with unit output variance:
    /// U(-sqrt(3/fan_in), sqrt(3/fan_in)).
    pub fn uniform_fan_in<E: Element>(
        &self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
    ) -> Result<Tensor<E>> {
        self.uniform_bound(name, shape, (3.0 / fan_in.max(1) as f64).sqrt())
    }

    /// Fan-in-scaled uniform with relu gain:
    /// U(-sqrt(6/fan_in), sqrt(6/fan_in)). Keeps activation variance
    /// roughly constant through conv + relu stacks.
    pub fn uniform_fan_in_relu<E: Element>(
        &self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
    ) -> Result<Tensor<E>> {
        self.uniform_bound(name, shape, (6.0 / fan_in.max(1) as f64).sqrt())
    }

    fn uniform_bound<E: Element>(
        &self,
        name: &str,
        shape: &[usize],
        bound: f64,
    ) -> Result<Tensor<E>> {
        let mut rng = self.stream(name);
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n)
            .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        Tensor::param(shape, data)
    }
}
