//! Neural-network primitives: linear layers, layer normalization, GELU,
//! pooling, softmax and bicubic resampling.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm_rows, Float, Tensor};

/// Layer-norm epsilon used by every model in this crate.
pub const LN_EPS: f64 = 1e-6;

/// Cubic-convolution kernel parameter used by [`bicubic_resize`].
pub const BICUBIC_A: f64 = -0.75;

/// Weight `[d_in, d_out]` and bias `[d_out]` of an affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> LinearParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape("linear_params", weight.shape(), bias.shape()));
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Result<Self> {
        Self::new(Tensor::zeros([d_in, d_out])?, Tensor::zeros([d_out])?)
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Affine parameters of a layer norm over an axis of length `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Float> LayerNormParams<T> {
    pub fn new(gamma: Tensor<T>, beta: Tensor<T>, eps: f64) -> Result<Self> {
        if gamma.rank() != 1 || gamma.shape() != beta.shape() {
            return Err(Error::shape("layer_norm_params", gamma.shape(), beta.shape()));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::invalid(
                "layer_norm_params",
                format!("eps must be positive, got {eps}"),
            ));
        }
        Ok(LayerNormParams { gamma, beta, eps })
    }

    /// `gamma = 1`, `beta = 0`.
    pub fn identity(c: usize, eps: f64) -> Result<Self> {
        Self::new(Tensor::ones([c])?, Tensor::zeros([c])?, eps)
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

fn last_dim<T>(op: &'static str, x: &Tensor<T>, want: usize) -> Result<usize>
where
    T: Float,
{
    match x.shape().last() {
        Some(&d) if d == want => Ok(x.len() / d),
        _ => Err(Error::invalid(
            op,
            format!("trailing axis of {:?} must be {want}", x.shape()),
        )),
    }
}

/// `y[.., j] = Σ_i x[.., i]·W[i, j] + b[j]` at every leading index.
pub fn linear<T: Float>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    linear_parts(x, &p.weight, &p.bias)
}

pub(crate) fn linear_parts<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || b.shape() != [w.shape()[1]] {
        return Err(Error::shape("linear", w.shape(), b.shape()));
    }
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let sites = last_dim("linear", x, d_in)?;
    let mut out = vec![T::zero(); sites * d_out];
    gemm_rows(x.data(), w.data(), d_in, d_out, &mut out);
    for row in out.chunks_mut(d_out) {
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o = *o + bv;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = d_out;
    Tensor::finite("linear", shape, out)
}

/// Per-site statistics saved by [`layer_norm_with_stats`].
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    /// `(x - mean) / sqrt(var + eps)` for every element.
    pub xhat: Vec<T>,
    /// `1 / sqrt(var + eps)` per site.
    pub inv_std: Vec<T>,
}

/// Normalizes over the trailing axis, then applies `gamma`, `beta`.
pub fn layer_norm<T: Float>(x: &Tensor<T>, p: &LayerNormParams<T>) -> Result<Tensor<T>> {
    layer_norm_parts(x, &p.gamma, &p.beta, p.eps)
}

pub(crate) fn layer_norm_parts<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    Ok(layer_norm_with_stats(x, gamma, beta, eps)?.0)
}

pub(crate) fn layer_norm_with_stats<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let c = gamma.len();
    if c == 0 || gamma.shape() != beta.shape() {
        return Err(Error::shape("layer_norm", gamma.shape(), beta.shape()));
    }
    let sites = last_dim("layer_norm", x, c)?;
    let n = T::from_f64(c as f64);
    let eps = T::from_f64(eps);
    // (mean, sqrt(var + eps)) per site, population variance.
    let moments: Vec<(T, T)> = x
        .data()
        .chunks(c)
        .map(|row| {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            (mean, (var + eps).sqrt())
        })
        .collect();
    let mut xhat = x.to_vec();
    par::for_each_row(&mut xhat, c, 2 * c, |s, row| {
        let (mean, std) = moments[s];
        for v in row.iter_mut() {
            *v = (*v - mean) / std;
        }
    });
    debug_assert_eq!(moments.len(), sites);
    let inv_std = moments.iter().map(|&(_, std)| T::one() / std).collect();
    let mut out = xhat.clone();
    for row in out.chunks_mut(c) {
        for ((o, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = g * *o + b;
        }
    }
    let y = Tensor::finite("layer_norm", x.shape().to_vec(), out)?;
    Ok((y, NormStats { xhat, inv_std }))
}

/// Exact GELU, `x·Φ(x)` with `Φ(x) = (1 + erf(x/√2)) / 2`.
pub fn gelu_scalar<T: Float>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of [`gelu_scalar`]: `Φ(x) + x·φ(x)`.
pub fn gelu_grad_scalar<T: Float>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn gelu<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    crate::tensor::map_unary(x, gelu_scalar)
}

/// Mean over the token axis of a `[tokens, c]` tensor.
pub fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::invalid(
            "global_avg_pool",
            format!("expected [tokens, c], got {:?}", x.shape()),
        ));
    }
    let (tokens, c) = (x.shape()[0], x.shape()[1]);
    let mut acc = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    let n = T::from_f64(tokens as f64);
    Tensor::finite("global_avg_pool", vec![c], acc.into_iter().map(|v| v / n).collect())
}

/// Max-subtracted softmax of a vector.
pub fn softmax<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 1 {
        return Err(Error::invalid(
            "softmax",
            format!("expected a vector, got {:?}", x.shape()),
        ));
    }
    let max = x.data().iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = x.data().iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &v| a + v);
    Tensor::finite(
        "softmax",
        x.shape().to_vec(),
        exps.into_iter().map(|v| v / total).collect(),
    )
}

/// Cubic-convolution kernel with parameter `a`.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four source taps and weights for each output position along one axis.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub index: Vec<[usize; 4]>,
    pub weight: Vec<[f64; 4]>,
}

/// Half-pixel aligned taps with clamped borders; `None` when the axis keeps
/// its length and resampling is the identity.
pub(crate) fn axis_taps(src_len: usize, dst_len: usize, a: f64) -> Option<AxisTaps> {
    if src_len == dst_len {
        return None;
    }
    let scale = src_len as f64 / dst_len as f64;
    let last = src_len as isize - 1;
    let mut index = Vec::with_capacity(dst_len);
    let mut weight = Vec::with_capacity(dst_len);
    for d in 0..dst_len {
        let src = (d as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        let base = base as isize;
        let mut idx = [0usize; 4];
        let mut w = [0f64; 4];
        for k in 0..4 {
            let offset = k as isize - 1;
            idx[k] = (base + offset).clamp(0, last) as usize;
            w[k] = cubic_kernel(t - offset as f64, a);
        }
        index.push(idx);
        weight.push(w);
    }
    Some(AxisTaps { index, weight })
}

/// Bicubic resampling of a `[c, h, w]` tensor to `[c, out_h, out_w]`.
///
/// Uses `a = -0.75`, half-pixel centers and clamped borders. An axis whose
/// length is unchanged is copied through untouched.
pub fn bicubic_resize<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    bicubic_resize_with(x, out_h, out_w, BICUBIC_A)
}

/// [`bicubic_resize`] with an explicit kernel parameter.
pub fn bicubic_resize_with<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize, a: f64) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::invalid(
            "bicubic_resize",
            format!("expected [c, h, w], got {:?}", x.shape()),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "bicubic_resize",
            format!("target size {out_h}x{out_w} must be positive"),
        ));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cur = x.clone();
    if let Some(taps) = axis_taps(w, out_w, a) {
        let src = cur.data();
        let mut out = vec![T::zero(); c * h * out_w];
        par::for_each_row(&mut out, out_w, 4 * out_w, |row, dst| {
            let line = &src[row * w..(row + 1) * w];
            for (o, (idx, wt)) in dst.iter_mut().zip(taps.index.iter().zip(&taps.weight)) {
                *o = (0..4).fold(T::zero(), |acc, k| acc + T::from_f64(wt[k]) * line[idx[k]]);
            }
        });
        cur = Tensor::finite("bicubic_resize", vec![c, h, out_w], out)?;
    }
    if let Some(taps) = axis_taps(h, out_h, a) {
        let src = cur.data();
        let mut out = vec![T::zero(); c * out_h * out_w];
        par::for_each_row(&mut out, out_w, 4 * out_w, |row, dst| {
            let (ch, y) = (row / out_h, row % out_h);
            let (idx, wt) = (&taps.index[y], &taps.weight[y]);
            for (x_out, o) in dst.iter_mut().enumerate() {
                *o = (0..4).fold(T::zero(), |acc, k| {
                    acc + T::from_f64(wt[k]) * src[(ch * h + idx[k]) * out_w + x_out]
                });
            }
        });
        cur = Tensor::finite("bicubic_resize", vec![c, out_h, out_w], out)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    /// Φ(x) by composite Simpson quadrature of the normal density on
    /// [-12, x]; independent of any erf implementation.
    fn normal_cdf_quadrature(x: f64) -> f64 {
        let (lo, n) = (-12.0, 200_000);
        let h = (x - lo) / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = pdf(lo) + pdf(x);
        for i in 1..n {
            let t = lo + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(t);
        }
        s * h / 3.0
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let x = random(&[3, 4], 0);
        let p = LinearParams::new(Tensor::eye(4).unwrap(), Tensor::zeros([4]).unwrap()).unwrap();
        assert!(linear(&x, &p).unwrap().bit_eq(&x));

        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let p = LinearParams::new(
            Tensor::new([2, 1], vec![3.0, 4.0]).unwrap(),
            Tensor::new([1], vec![0.5]).unwrap(),
        )
        .unwrap();
        assert_eq!(linear(&x, &p).unwrap().data(), &[11.5]);
        assert!(linear(&random(&[2, 3], 0), &p).is_err());
    }

    #[test]
    fn linear_batched_equals_per_site_loop() {
        let (d_in, d_out) = (5, 3);
        let x = random(&[4, 7, d_in], 1);
        let p = LinearParams::new(random(&[d_in, d_out], 2), random(&[d_out], 3)).unwrap();
        let y = linear(&x, &p).unwrap();
        assert_eq!(y.shape(), &[4, 7, d_out]);
        for site in 0..28 {
            for j in 0..d_out {
                let mut s = 0.0;
                for i in 0..d_in {
                    s += x.data()[site * d_in + i] * p.weight.data()[i * d_out + j];
                }
                s += p.bias.data()[j];
                assert!((y.data()[site * d_out + j] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let ln = LayerNormParams::<f64>::identity(4, 1e-12).unwrap();
        let constant = Tensor::full([2, 4], 3.5).unwrap();
        assert!(layer_norm(&constant, &ln).unwrap().data().iter().all(|&v| v == 0.0));

        let beta = random(&[4], 4);
        let zero_gamma = LayerNormParams::new(Tensor::zeros([4]).unwrap(), beta.clone(), LN_EPS).unwrap();
        let y = layer_norm(&random(&[3, 4], 5), &zero_gamma).unwrap();
        for row in y.data().chunks(4) {
            assert_eq!(row, beta.data());
        }

        let ln2 = LayerNormParams::<f64>::identity(2, 1e-12).unwrap();
        let y = layer_norm(&Tensor::new([2], vec![1.0, 3.0]).unwrap(), &ln2).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-10 && (y.data()[1] - 1.0).abs() < 1e-10);

        assert!(LayerNormParams::<f64>::identity(2, 0.0).is_err());
        assert!(layer_norm(&random(&[2, 3], 0), &ln2).is_err());
    }

    #[test]
    fn layer_norm_moments() {
        let ln = LayerNormParams::<f64>::identity(16, 1e-12).unwrap();
        let y = layer_norm(&random(&[10, 16], 6), &ln).unwrap();
        for row in y.data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        let oracle = normal_cdf_quadrature(1.0);
        assert!((gelu_scalar(1.0f64) - oracle).abs() < 1e-9);
        assert!((gelu_scalar(1.0f64) - 0.841_344_7).abs() < 1e-7);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-12);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-12);
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        assert!(xs.windows(2).all(|p| gelu_scalar(p[0]) <= gelu_scalar(p[1])));
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((gelu_grad_scalar(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn pooling() {
        let one = random(&[1, 5], 7);
        assert_eq!(global_avg_pool(&one).unwrap().data(), one.data());
        let two = Tensor::new([2, 2], vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        assert_eq!(global_avg_pool(&two).unwrap().data(), &[1.0, 1.0]);
        let many = random(&[49, 6], 8);
        let pooled = global_avg_pool(&many).unwrap();
        for j in 0..6 {
            let mut s = 0.0;
            for t in 0..49 {
                s += many.data()[t * 6 + j];
            }
            assert!((pooled.data()[j] - s / 49.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::full([4], 0.3f64).unwrap()).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let p = softmax(&Tensor::new([2], vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15 && (p.data()[1] - 0.75).abs() < 1e-15);
        let x = random(&[6], 9);
        let shifted = crate::tensor::map_unary(&x, |v| v + 17.0).unwrap();
        let (a, b) = (softmax(&x).unwrap(), softmax(&shifted).unwrap());
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        assert!((a.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cubic_kernel_collapses_at_integers() {
        assert_eq!(cubic_kernel(0.0, BICUBIC_A), 1.0);
        assert_eq!(cubic_kernel(1.0, BICUBIC_A), 0.0);
        assert_eq!(cubic_kernel(2.0, BICUBIC_A), 0.0);
        assert_eq!(cubic_kernel(-1.0, BICUBIC_A), 0.0);
    }

    #[test]
    fn bicubic_identity_for_every_small_shape() {
        for h in 1..=16 {
            for w in 1..=16 {
                let x = random(&[2, h, w], (h * 17 + w) as u64);
                assert!(bicubic_resize(&x, h, w).unwrap().bit_eq(&x));
            }
        }
    }

    #[test]
    fn bicubic_single_pixel_upsamples_to_constant() {
        let x = Tensor::new([1, 1, 1], vec![0.7f64]).unwrap();
        let y = bicubic_resize(&x, 4, 4).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    /// Direct evaluation of Σ_k W(src - k)·f(clamp(k)) at one output position.
    fn kernel_sum(line: &[f64], dst: usize, dst_len: usize, a: f64) -> f64 {
        let scale = line.len() as f64 / dst_len as f64;
        let src = (dst as f64 + 0.5) * scale - 0.5;
        let mut acc = 0.0;
        for k in (src.floor() as isize - 1)..=(src.floor() as isize + 2) {
            let kk = k.clamp(0, line.len() as isize - 1) as usize;
            acc += cubic_kernel(src - k as f64, a) * line[kk];
        }
        acc
    }

    #[test]
    fn bicubic_ramp_matches_kernel_sum_oracle() {
        let w = 8;
        let ramp: Vec<f64> = (0..w).map(|i| 0.25 * i as f64 - 1.0).collect();
        let x = Tensor::new([1, 1, w], ramp.clone()).unwrap();
        let y = bicubic_resize(&x, 1, 2 * w).unwrap();
        for d in 0..2 * w {
            assert!((y.data()[d] - kernel_sum(&ramp, d, 2 * w, BICUBIC_A)).abs() < 1e-14);
        }
        // The Catmull-Rom member of the family reproduces the ramp in the
        // interior, where no tap is clamped.
        let cr = bicubic_resize_with(&x, 1, 2 * w, -0.5).unwrap();
        for d in 3..2 * w - 3 {
            let src = (d as f64 + 0.5) / 2.0 - 0.5;
            assert!((cr.data()[d] - (0.25 * src - 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn bicubic_reproduces_constants_and_rejects_zero_size() {
        let x = Tensor::full([3, 5, 7], -2.25f64).unwrap();
        for (oh, ow) in [(3, 4), (10, 14), (8, 2)] {
            let y = bicubic_resize(&x, oh, ow).unwrap();
            assert!(y.data().iter().all(|&v| (v + 2.25).abs() < 1e-14));
        }
        assert!(bicubic_resize(&x, 0, 3).is_err());
    }
}
