//! Evaluation backends for block code.
//!
//! Blocks are written once against [`Graph`] and can then be run eagerly
//! ([`Eager`]), recorded for differentiation ([`crate::autograd::Tape`]) or
//! walked for exact cost accounting ([`crate::cost::CostGraph`]).

use crate::error::{Error, Result};
use crate::nn;
use crate::rearrange::RearrangeSpec;
use crate::tensor::{self, Float, Tensor};

pub trait Graph<T: Float> {
    type Value: Clone;

    /// Introduces a model parameter.
    fn param(&self, t: &Tensor<T>) -> Self::Value;

    /// Introduces a non-parameter input.
    fn input(&self, t: &Tensor<T>) -> Self::Value;

    fn shape(&self, v: &Self::Value) -> Vec<usize>;

    fn reshape(&self, v: &Self::Value, shape: &[usize]) -> Result<Self::Value>;

    fn add(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn matmul(&self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn linear(&self, x: &Self::Value, weight: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;

    fn layer_norm(&self, x: &Self::Value, gamma: &Self::Value, beta: &Self::Value, eps: f64) -> Result<Self::Value>;

    fn gelu(&self, x: &Self::Value) -> Result<Self::Value>;

    fn rearrange(&self, x: &Self::Value, spec: &RearrangeSpec) -> Result<Self::Value>;

    fn concat(&self, xs: &[Self::Value], axis: usize) -> Result<Self::Value>;

    fn unfold(&self, x: &Self::Value, kernel: usize, stride: usize, padding: usize) -> Result<Self::Value>;

    fn global_avg_pool(&self, x: &Self::Value) -> Result<Self::Value>;

    fn bicubic_resize(&self, x: &Self::Value, out_h: usize, out_w: usize) -> Result<Self::Value>;

    /// Marks the start of a named sub-computation. Only cost accounting
    /// uses this.
    fn enter(&self, _name: &str) {}

    fn exit(&self) {}
}

/// Immediate evaluation on tensors.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Float> Graph<T> for Eager {
    type Value = Tensor<T>;

    fn param(&self, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }

    fn input(&self, t: &Tensor<T>) -> Tensor<T> {
        t.clone()
    }

    fn shape(&self, v: &Tensor<T>) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn reshape(&self, v: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
        v.reshape(shape.to_vec())
    }

    fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::add(a, b)
    }

    fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::matmul(a, b)
    }

    fn linear(&self, x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        nn::linear_parts(x, weight, bias)
    }

    fn layer_norm(&self, x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        nn::layer_norm_parts(x, gamma, beta, eps)
    }

    fn gelu(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nn::gelu(x)
    }

    fn rearrange(&self, x: &Tensor<T>, spec: &RearrangeSpec) -> Result<Tensor<T>> {
        spec.apply(x)
    }

    fn concat(&self, xs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        tensor::concat(xs, axis)
    }

    fn unfold(&self, x: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
        tensor::unfold(x, kernel, stride, padding)
    }

    fn global_avg_pool(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        nn::global_avg_pool(x)
    }

    fn bicubic_resize(&self, x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        nn::bicubic_resize(x, out_h, out_w)
    }
}

/// Checks that `v` has exactly `rank` axes and returns its shape.
pub(crate) fn shape_of<T: Float, G: Graph<T>>(
    g: &G,
    op: &'static str,
    v: &G::Value,
    rank: usize,
) -> Result<Vec<usize>> {
    let s = g.shape(v);
    if s.len() != rank {
        return Err(Error::invalid(op, format!("expected rank {rank}, got shape {s:?}")));
    }
    Ok(s)
}

/// Runs `f` inside a named scope.
pub(crate) fn scoped<T: Float, G: Graph<T>, R>(g: &G, name: &str, f: impl FnOnce() -> R) -> R {
    g.enter(name);
    let out = f();
    g.exit();
    out
}
