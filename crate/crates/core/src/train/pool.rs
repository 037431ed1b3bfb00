use alloc::vec::Vec;

use rand::Rng;

use crate::datamodel::Example;

/// Replay buffer of generated images and the masks they were conditioned on.
#[derive(Clone, Debug, Default)]
pub struct ImagePool {
    pub capacity: usize,
    pub buffer: Vec<Example>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, buffer: Vec::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }
}

/// Until the pool is full, fresh images are stored and returned as is.
/// Afterwards each fresh image, with probability 0.5, is swapped for a
/// random stored one, which is returned in its place.
pub fn pool_sample<R: Rng + ?Sized>(pool: &mut ImagePool, fresh: Vec<Example>, rng: &mut R) -> Vec<Example> {
    if pool.capacity == 0 {
        return fresh;
    }
    fresh
        .into_iter()
        .map(|ex| {
            if pool.buffer.len() < pool.capacity {
                pool.buffer.push(ex.clone());
                ex
            } else if rng.random_bool(0.5) {
                let i = rng.random_range(0..pool.buffer.len());
                core::mem::replace(&mut pool.buffer[i], ex)
            } else {
                ex
            }
        })
        .collect()
}
