//! Owned parameter arrays and seeded initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor};

/// A named-by-position, shaped array of model weights living outside any
/// graph. Episodes bind it onto a graph as a leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn filled(shape: &[usize], value: f64) -> Self {
        Param {
            shape: shape.to_vec(),
            values: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        Param {
            shape: shape.to_vec(),
            values: (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn bind(&self, graph: &Graph, requires_grad: bool) -> Result<Tensor> {
        graph.tensor(&self.shape, self.values.clone(), requires_grad)
    }
}

/// Independent deterministic stream `stream` of generator `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
