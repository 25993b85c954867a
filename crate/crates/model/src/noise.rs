//! Linear-ramp latent noise.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const NOISE_LEN: usize = 200;

/// 200 values on a straight line between two endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseVector {
    values: Vec<f64>,
}

impl NoiseVector {
    pub fn from_endpoints(a: f64, b: f64) -> Self {
        let step = (b - a) / (NOISE_LEN - 1) as f64;
        let mut values: Vec<f64> = (0..NOISE_LEN).map(|i| a + step * i as f64).collect();
        values[NOISE_LEN - 1] = b;
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Folds the ramp into `channels × (200 / channels)`, row-major, so each
    /// channel holds a contiguous stretch of the ramp.
    pub fn to_channels(&self, seq_len: usize) -> Array2<f64> {
        let channels = NOISE_LEN / seq_len;
        Array2::from_shape_fn((channels, seq_len), |(c, t)| self.values[c * seq_len + t])
    }
}

/// Draws both endpoints from U[0, 1].
pub fn make_noise<R: Rng + ?Sized>(rng: &mut R) -> NoiseVector {
    let a = rng.random::<f64>();
    let b = rng.random::<f64>();
    NoiseVector::from_endpoints(a, b)
}
