//! Tape-based reverse-mode differentiation and a finite-difference checker.
//!
//! A [`Tape`] records every operation issued through its [`Graph`]
//! implementation together with the forward value. Nodes only reference
//! earlier nodes, so the tape is a topologically ordered DAG and
//! [`Tape::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{self, NormStats};
use crate::par;
use crate::params::Parameters;
use crate::rearrange::{RearrangeSpec, ResolvedRearrange};
use crate::tensor::{self, Float, Tensor, UnfoldGeometry};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub type Derivative<T> = Arc<dyn Fn(T) -> T + Send + Sync>;

enum Op<T> {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        stats: NormStats<T>,
        beta: Var,
    },
    Map {
        x: Var,
        name: &'static str,
        derivative: Option<Derivative<T>>,
    },
    Rearrange {
        x: Var,
        plan: ResolvedRearrange,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
        sizes: Vec<usize>,
    },
    Unfold {
        x: Var,
        geometry: UnfoldGeometry,
    },
    Pool {
        x: Var,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
    /// Forward only; backward reports it as unregistered.
    Bicubic,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Map { name, .. } => name,
            Op::Rearrange { .. } => "rearrange",
            Op::Concat { .. } => "concat",
            Op::Unfold { .. } => "unfold",
            Op::Pool { .. } => "global_avg_pool",
            Op::Sum(_) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Bicubic => "bicubic_resize",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recorded operation graph of one forward pass.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamKey, Var>>,
}

type ParamKey = (usize, Vec<usize>);

fn param_key<T: Float>(t: &Tensor<T>) -> ParamKey {
    (t.storage_id(), t.shape().to_vec())
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
        }
    }

    fn push(&self, op: Op<T>, value: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var(nodes.len() - 1)
    }

    /// Records a fresh leaf.
    pub fn var(&self, t: &Tensor<T>) -> Var {
        self.push(Op::Leaf, t.clone())
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Elementwise `f`. Without a `derivative` the node can be evaluated but
    /// not differentiated.
    pub fn map_unary(
        &self,
        x: Var,
        name: &'static str,
        f: impl Fn(T) -> T + Send + Sync,
        derivative: Option<Derivative<T>>,
    ) -> Result<Var> {
        let value = tensor::map_unary(&self.value(x), f)?;
        Ok(self.push(Op::Map { x, name, derivative }, value))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum())?;
        Ok(self.push(Op::Sum(x), value))
    }

    /// `Σ x ⊙ weights` for a constant `weights` of the same shape.
    pub fn weighted_sum(&self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        let prod = tensor::zip_with("weighted_sum", &xv, weights, |a, b| a * b)?;
        let value = Tensor::scalar(prod.sum())?;
        Ok(self.push(
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
            value,
        ))
    }

    /// Differentiates the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.0].value.shape().to_vec();
        if nodes[output.0].value.len() != 1 {
            return Err(Error::NotScalar(out_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[output.0] = Some(Tensor::ones(out_shape)?);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            let mut contributions: Vec<(Var, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {}
                Op::Reshape(x) => contributions.push((*x, g.reshape(val(*x).shape().to_vec())?)),
                Op::Add(a, b) => {
                    contributions.push((*a, g.clone()));
                    contributions.push((*b, g.clone()));
                }
                Op::MatMul(a, b) => {
                    let ga = tensor::matmul(&g, &tensor::transpose(val(*b))?)?;
                    let gb = tensor::matmul(&tensor::transpose(val(*a))?, &g)?;
                    contributions.push((*a, ga));
                    contributions.push((*b, gb));
                }
                Op::Linear { x, weight, bias } => {
                    let w = val(*weight);
                    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
                    let sites = g.len() / d_out;
                    let g2 = g.reshape([sites, d_out])?;
                    let x2 = val(*x).reshape([sites, d_in])?;
                    let gx = tensor::matmul(&g2, &tensor::transpose(w)?)?;
                    contributions.push((*x, gx.reshape(val(*x).shape().to_vec())?));
                    contributions.push((*weight, tensor::matmul(&tensor::transpose(&x2)?, &g2)?));
                    contributions.push((*bias, column_sums(&g2)?));
                }
                Op::LayerNorm { x, gamma, stats, beta } => {
                    let (gx, gg, gb) = layer_norm_adjoint(&g, val(*gamma), stats)?;
                    contributions.push((*x, gx.reshape(val(*x).shape().to_vec())?));
                    contributions.push((*gamma, gg));
                    contributions.push((*beta, gb));
                }
                Op::Map { x, name, derivative } => {
                    let d = derivative.as_ref().ok_or(Error::UnregisteredOp(name))?;
                    let xv = val(*x);
                    let gx = tensor::zip_with("map_unary_adjoint", &g, xv, |gi, xi| gi * d(xi))?;
                    contributions.push((*x, gx));
                }
                Op::Rearrange { x, plan } => contributions.push((*x, plan.inverse().apply(&g)?)),
                Op::Concat { xs, axis, sizes } => {
                    for (x, part) in xs.iter().zip(tensor::split(&g, *axis, sizes)?) {
                        contributions.push((*x, part));
                    }
                }
                Op::Unfold { x, geometry } => contributions.push((*x, tensor::fold(&g, geometry)?)),
                Op::Pool { x } => {
                    let shape = val(*x).shape().to_vec();
                    let (tokens, c) = (shape[0], shape[1]);
                    let n = T::from_f64(tokens as f64);
                    let gd = g.data();
                    let gx = Tensor::from_fn(shape, |i| gd[i % c] / n)?;
                    contributions.push((*x, gx));
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    contributions.push((*x, Tensor::full(val(*x).shape().to_vec(), s)?));
                }
                Op::WeightedSum { x, weights } => {
                    contributions.push((*x, tensor::scale(weights, g.data()[0])?));
                }
                op @ Op::Bicubic => return Err(Error::UnregisteredOp(op.name())),
            }
            for (v, c) in contributions {
                grads[v.0] = Some(match grads[v.0].take() {
                    Some(acc) => tensor::add(&acc, &c)?,
                    None => c,
                });
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

fn column_sums<T: Float>(m: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = m.shape()[1];
    let mut acc = vec![T::zero(); cols];
    for row in m.data().chunks(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    Tensor::finite("column_sums", vec![cols], acc)
}

/// Analytic adjoint of layer norm over the trailing axis.
///
/// With `x̂ = (x - μ)·s`, `s = 1/√(σ² + ε)` and `d = g ⊙ γ`:
/// `∂x = s·(d - mean(d) - x̂·mean(d ⊙ x̂))`.
fn layer_norm_adjoint<T: Float>(
    g: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.len();
    let n = T::from_f64(c as f64);
    let mut gx = vec![T::zero(); g.len()];
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    for (s, (grow, xrow)) in g.data().chunks(c).zip(stats.xhat.chunks(c)).enumerate() {
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..c {
            let d = grow[j] * gamma.data()[j];
            mean_d = mean_d + d;
            mean_dx = mean_dx + d * xrow[j];
            g_gamma[j] = g_gamma[j] + grow[j] * xrow[j];
            g_beta[j] = g_beta[j] + grow[j];
        }
        mean_d = mean_d / n;
        mean_dx = mean_dx / n;
        let inv = stats.inv_std[s];
        for j in 0..c {
            let d = grow[j] * gamma.data()[j];
            gx[s * c + j] = inv * (d - mean_d - xrow[j] * mean_dx);
        }
    }
    Ok((
        Tensor::finite("layer_norm_adjoint", g.shape().to_vec(), gx)?,
        Tensor::finite("layer_norm_adjoint", vec![c], g_gamma)?,
        Tensor::finite("layer_norm_adjoint", vec![c], g_beta)?,
    ))
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamKey, Var>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the output with respect to `v`; `None` when `v` does not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to a parameter tensor introduced through
    /// [`Graph::param`].
    pub fn wrt_param(&self, p: &Tensor<T>) -> Option<&Tensor<T>> {
        self.params.get(&param_key(p)).and_then(|&v| self.wrt(v))
    }

    /// Number of distinct parameters seen while recording.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

impl<T: Float> Graph<T> for Tape<T> {
    type Value = Var;

    fn param(&self, t: &Tensor<T>) -> Var {
        let key = param_key(t);
        if let Some(&v) = self.params.borrow().get(&key) {
            return v;
        }
        let v = self.var(t);
        self.params.borrow_mut().insert(key, v);
        v
    }

    fn input(&self, t: &Tensor<T>) -> Var {
        self.var(t)
    }

    fn shape(&self, v: &Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn reshape(&self, v: &Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(*v).reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape(*v), value))
    }

    fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = tensor::add(&self.value(*a), &self.value(*b))?;
        Ok(self.push(Op::Add(*a, *b), value))
    }

    fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let value = tensor::matmul(&self.value(*a), &self.value(*b))?;
        Ok(self.push(Op::MatMul(*a, *b), value))
    }

    fn linear(&self, x: &Var, weight: &Var, bias: &Var) -> Result<Var> {
        let value = nn::linear_parts(&self.value(*x), &self.value(*weight), &self.value(*bias))?;
        Ok(self.push(
            Op::Linear {
                x: *x,
                weight: *weight,
                bias: *bias,
            },
            value,
        ))
    }

    fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let (value, stats) = nn::layer_norm_with_stats(&self.value(*x), &self.value(*gamma), &self.value(*beta), eps)?;
        Ok(self.push(
            Op::LayerNorm {
                x: *x,
                gamma: *gamma,
                stats,
                beta: *beta,
            },
            value,
        ))
    }

    fn gelu(&self, x: &Var) -> Result<Var> {
        self.map_unary(*x, "gelu", nn::gelu_scalar, Some(Arc::new(nn::gelu_grad_scalar)))
    }

    fn rearrange(&self, x: &Var, spec: &RearrangeSpec) -> Result<Var> {
        let xv = self.value(*x);
        let plan = spec.resolve(xv.shape())?;
        let value = plan.apply(&xv)?;
        Ok(self.push(Op::Rearrange { x: *x, plan }, value))
    }

    fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let value = tensor::concat(&values, axis)?;
        let sizes = values.iter().map(|t| t.shape()[axis]).collect();
        Ok(self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
                sizes,
            },
            value,
        ))
    }

    fn unfold(&self, x: &Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xv = self.value(*x);
        let value = tensor::unfold(&xv, kernel, stride, padding)?;
        let s = xv.shape();
        let geometry = UnfoldGeometry::new(s[0], s[1], s[2], kernel, stride, padding)?;
        Ok(self.push(Op::Unfold { x: *x, geometry }, value))
    }

    fn global_avg_pool(&self, x: &Var) -> Result<Var> {
        let value = nn::global_avg_pool(&self.value(*x))?;
        Ok(self.push(Op::Pool { x: *x }, value))
    }

    fn bicubic_resize(&self, x: &Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = nn::bicubic_resize(&self.value(*x), out_h, out_w)?;
        Ok(self.push(Op::Bicubic, value))
    }
}

/// Which coordinates [`grad_check`] perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coordinates {
    All,
    /// A seeded random subset of at most `count` coordinates.
    Sample {
        count: usize,
        seed: u64,
    },
}

/// Relative-error floor as a fraction of the largest gradient magnitude.
pub const REL_FLOOR: f64 = 1e-3;

/// Agreement between backpropagated and finite-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    /// Per-coordinate `|a - n| / max(|a|, |n|, floor)`.
    pub max_rel_err: f64,
    /// [`REL_FLOOR`] times the largest gradient magnitude seen. Central
    /// differences carry absolute noise near `ε·|f| / h`, so coordinates far
    /// below the gradient's scale are judged against this floor instead of
    /// their own size.
    pub floor: f64,
    pub worst_index: Option<usize>,
    pub step: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, max_rel_err: f64) -> bool {
        self.max_rel_err < max_rel_err
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max_abs_err={:.3e} max_rel_err={:.3e} floor={:.1e} worst={} step={:e} coords={}",
            self.max_abs_err,
            self.max_rel_err,
            self.floor,
            self.worst_index.map_or("-".into(), |i| i.to_string()),
            self.step,
            self.checked
        )
    }
}

/// Compares [`Tape::backward`] against central differences
/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h`.
///
/// `f` must build a scalar from the recorded input; it is re-run on a fresh
/// tape for each perturbation.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, coords: Coordinates) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var> + Sync + Send,
{
    let tape = Tape::new();
    let xv = tape.var(x);
    let out = f(&tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = match grads.wrt(xv) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.len()],
    };

    let indices = coordinate_indices(coords, x.len());
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let mut data = x.to_vec();
        data[i] += delta;
        let tape = Tape::new();
        let v = tape.var(&Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&tape, v)?;
        scalar_value(&tape, out)
    };
    compare(&analytic, &indices, h, eval)
}

/// [`grad_check`] with respect to every stored parameter of `params`.
///
/// Coordinates index the concatenation of all parameter tensors in
/// [`Parameters::named_parameters`] order.
pub fn grad_check_params<P, F>(params: &P, f: F, h: f64, coords: Coordinates) -> Result<GradCheckReport>
where
    P: Parameters<f64> + Clone + Sync,
    F: Fn(&Tape<f64>, &P) -> Result<Var> + Sync + Send,
{
    let tape = Tape::new();
    let out = f(&tape, params)?;
    let grads = tape.backward(out)?;
    let named = params.named_parameters();
    let mut analytic = Vec::new();
    let mut offsets = Vec::with_capacity(named.len());
    for (_, t) in &named {
        offsets.push(analytic.len());
        match grads.wrt_param(t) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }

    let indices = coordinate_indices(coords, analytic.len());
    let eval = |i: usize, delta: f64| -> Result<f64> {
        let slot = offsets.partition_point(|&o| o <= i) - 1;
        let local = i - offsets[slot];
        let mut perturbed = params.clone();
        let mut seen = 0;
        let mut failure = None;
        perturbed.visit_mut("", &mut |_, t| {
            if seen == slot {
                let mut data = t.to_vec();
                data[local] += delta;
                match Tensor::new(t.shape().to_vec(), data) {
                    Ok(n) => *t = n,
                    Err(e) => failure = Some(e),
                }
            }
            seen += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let tape = Tape::new();
        let out = f(&tape, &perturbed)?;
        scalar_value(&tape, out)
    };
    compare(&analytic, &indices, h, eval)
}

fn coordinate_indices(coords: Coordinates, len: usize) -> Vec<usize> {
    match coords {
        Coordinates::Sample { count, seed } if count < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, len, count).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn scalar_value(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let value = tape.value(out);
    match value.item() {
        Some(s) if s.is_finite() => Ok(s),
        Some(_) => Err(Error::NonFinite { op: "grad_check" }),
        None => Err(Error::NotScalar(value.shape().to_vec())),
    }
}

fn compare(
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    eval: impl Fn(usize, f64) -> Result<f64> + Sync,
) -> Result<GradCheckReport> {
    let numeric: Vec<Result<f64>> = par::map_indices(indices.len(), |k| {
        let i = indices[k];
        Ok((eval(i, h)? - eval(i, -h)?) / (2.0 * h))
    });
    let numeric = numeric.into_iter().collect::<Result<Vec<f64>>>()?;
    let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (REL_FLOOR * scale).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        floor,
        worst_index: None,
        step: h,
        checked: indices.len(),
    };
    for (&i, n) in indices.iter().zip(numeric) {
        let a = analytic[i];
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err || report.worst_index.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}
