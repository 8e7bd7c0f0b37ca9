#![allow(dead_code)]

use foregan::diffcore::{Tape, Tensor, Var};
use foregan::inversion::LatentGenerator;
use foregan::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `G(z) = a ⊙ z + b`, recorded as a dense layer with a diagonal weight.
pub struct ElementwiseLinear {
    pub a: Vec<f32>,
    pub b: Vec<f32>,
    weight: Tensor,
    bias: Tensor,
}

impl ElementwiseLinear {
    pub fn new(a: Vec<f32>, b: Vec<f32>) -> Self {
        let n = a.len();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = a[i];
        }
        Self {
            weight: Tensor::new(&[n, n], w).unwrap(),
            bias: Tensor::new(&[n], b.clone()).unwrap(),
            a,
            b,
        }
    }

    /// Coefficients with `|a| ∈ [0.5, 2]` and `b ∈ [-0.5, 0.5]`.
    pub fn random(rng: &mut ChaCha8Rng, n: usize) -> Self {
        let a = (0..n)
            .map(|_| {
                let m = rng.random_range(0.5f32..2.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let b = (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        Self::new(a, b)
    }

    pub fn apply(&self, z: &[f32]) -> Tensor {
        let v = z
            .iter()
            .zip(&self.a)
            .zip(&self.b)
            .map(|((z, a), b)| a * z + b)
            .collect();
        Tensor::new(&[1, z.len()], v).unwrap()
    }
}

impl LatentGenerator for ElementwiseLinear {
    fn latent_dim(&self) -> usize {
        self.a.len()
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![1, self.a.len()]
    }

    fn forward<'a>(&'a self, tape: &mut Tape<'a>, z: Var) -> Result<Var> {
        let w = tape.borrowed(&self.weight, false);
        let b = tape.borrowed(&self.bias, false);
        tape.dense(z, w, b)
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}
