//! Deterministic weight initialization.
//!
//! Weights are drawn from ChaCha8 keyed with `seed_from_u64(seed)`. Each
//! parameter tensor reads its own stream, numbered by construction order.
//! Uniform variates take the top 53 bits of `next_u64` scaled by 2^-53, and
//! pairs `(u1, u2)` become normal variates by Box-Muller:
//! `sqrt(-2 ln(1 - u1)) * cos(2π u2)` followed by the matching `sin` term.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvParams;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

const UNIT: f64 = 1.0 / (1u64 << 53) as f64;

/// `count` samples of `N(0, std²)` from stream `stream` of `seed`.
pub fn normal_samples(seed: u64, stream: u64, count: usize, std: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut out = Vec::with_capacity(count + 1);
    while out.len() < count {
        let u1 = (rng.next_u64() >> 11) as f64 * UNIT;
        let u2 = (rng.next_u64() >> 11) as f64 * UNIT;
        let radius = (-2.0 * (1.0 - u1).ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        out.push(std * radius * angle.cos());
        out.push(std * radius * angle.sin());
    }
    out.truncate(count);
    out
}

/// Hands out consecutive streams to successive parameter tensors.
#[derive(Debug)]
pub struct WeightInit {
    seed: u64,
    std: f64,
    next_stream: u64,
}

impl WeightInit {
    pub fn new(seed: u64, std: f64) -> Self {
        Self {
            seed,
            std,
            next_stream: 0,
        }
    }

    /// Normal weights, zero bias.
    pub fn conv<T: Scalar>(&mut self, c_out: usize, c_in: usize, k: usize) -> Result<ConvParams<T>> {
        let shape = [c_out, c_in, k, k];
        let values = normal_samples(self.seed, self.next_stream, shape.iter().product(), self.std);
        self.next_stream += 1;
        let weights = Tensor::from_vec(shape, values.into_iter().map(T::from_f64).collect())?;
        ConvParams::new(weights, vec![T::zero(); c_out])
    }
}
