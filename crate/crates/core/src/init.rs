//! Deterministic parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::{LayerNormParams, LinearParams, LN_EPS};
use crate::tensor::{Float, Tensor};

/// How fresh parameters are filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Every scalar zero, including layer-norm scales. Cheap; used for
    /// shape-only work such as counting.
    Zeros,
    /// Linear weights from a normal truncated at ±2 std; zero biases;
    /// `gamma = 1`, `beta = 0`.
    TruncNormal { std: f64 },
    /// Every scalar random, biases and layer-norm affines included.
    /// Exercises all parameter paths in gradient checks.
    Dense { std: f64 },
}

impl InitScheme {
    /// Weight initialization used for model presets.
    pub const DEFAULT: InitScheme = InitScheme::TruncNormal { std: 0.02 };
}

/// Seeded source of initial parameters.
pub struct Initializer {
    scheme: InitScheme,
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(scheme: InitScheme, seed: u64) -> Self {
        Initializer {
            scheme,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn scheme(&self) -> InitScheme {
        self.scheme
    }

    fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z: f64 = self.rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    fn fill<T: Float>(&mut self, shape: &[usize], f: impl Fn(&mut Self) -> f64) -> Result<Tensor<T>> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(f(self))).collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn linear<T: Float>(&mut self, d_in: usize, d_out: usize) -> Result<LinearParams<T>> {
        match self.scheme {
            InitScheme::Zeros => LinearParams::zeros(d_in, d_out),
            InitScheme::TruncNormal { std } => LinearParams::new(
                self.fill(&[d_in, d_out], |s| s.trunc_normal(std))?,
                Tensor::zeros([d_out])?,
            ),
            InitScheme::Dense { std } => LinearParams::new(
                self.fill(&[d_in, d_out], |s| s.trunc_normal(std))?,
                self.fill(&[d_out], |s| s.trunc_normal(std))?,
            ),
        }
    }

    pub fn layer_norm<T: Float>(&mut self, c: usize) -> Result<LayerNormParams<T>> {
        match self.scheme {
            InitScheme::Zeros => LayerNormParams::new(Tensor::zeros([c])?, Tensor::zeros([c])?, LN_EPS),
            InitScheme::TruncNormal { .. } => LayerNormParams::identity(c, LN_EPS),
            InitScheme::Dense { std } => LayerNormParams::new(
                self.fill(&[c], |s| 1.0 + s.trunc_normal(std))?,
                self.fill(&[c], |s| s.trunc_normal(std))?,
                LN_EPS,
            ),
        }
    }
}
