//! Dense row-major tensors and the primitive operations built on them.
//!
//! A [`Tensor`] is immutable once constructed: its buffer sits behind an
//! `Arc`, so cloning is cheap and parameters can be shared between a model
//! and the graphs that evaluate it. Every constructor and exported operation
//! rejects non-finite results.

use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Scalar element type of a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Code used by the weight container (0 = f32, 1 = f64).
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

/// Floating-point element types supported by [`Tensor`].
pub trait Float: num_traits::Float + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static {
    const DTYPE: DType;

    fn erf(self) -> Self;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Raw bit pattern widened to 64 bits, for bitwise comparisons.
    fn bits(self) -> u64;

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes one little-endian scalar; `bytes` must hold exactly
    /// `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn bits(self) -> u64 {
        self.to_bits() as u64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte scalar"))
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn bits(self) -> u64 {
        self.to_bits()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte scalar"))
    }
}

/// Dense, row-major, immutable n-dimensional array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<[T]>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        write!(f, "Tensor{:?} {:?}", self.shape, head)?;
        if self.data.len() > PREVIEW {
            write!(f, " ..")?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::invalid(
            "tensor",
            format!("axis lengths must be positive, got {shape:?}"),
        ));
    }
    Ok(shape.iter().product())
}

impl<T: Float> Tensor<T> {
    /// Builds a tensor, validating length, axis positivity and finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if data.len() != n {
            return Err(Error::DataLength { shape, len: data.len() });
        }
        Self::finite("tensor", shape, data)
    }

    /// Wraps an operation result, rejecting NaN and infinities.
    pub(crate) fn finite(op: &'static str, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(Self::from_raw(shape, data))
    }

    /// For results that are rearrangements of finite inputs.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: data.into(),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        Self::finite("full", shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    /// Builds a tensor whose flat element `i` is `f(i)`.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        Self::finite("from_fn", shape, (0..n).map(f).collect())
    }

    /// The `n`×`n` identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Identity of the underlying buffer; shared by clones and reshapes.
    pub fn storage_id(&self) -> usize {
        Arc::as_ptr(&self.data) as *const T as usize
    }

    /// Bitwise equality of shape and every scalar.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.bits() == b.bits())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        (self.shape == other.shape).then(|| {
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max)
        })
    }

    pub fn cast<U: Float>(&self) -> Result<Tensor<U>> {
        Tensor::finite(
            "cast",
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        )
    }

    /// Sum of all elements, accumulated left to right.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }
}

/// Token grid of one feature level: `h_prime` × `w_prime` tokens of
/// `channels` features each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub h_prime: usize,
    pub w_prime: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(h_prime: usize, w_prime: usize, channels: usize) -> Result<Self> {
        if h_prime == 0 || w_prime == 0 || channels == 0 {
            return Err(Error::invalid(
                "patch_grid",
                format!("degenerate grid {h_prime}x{w_prime}x{channels}"),
            ));
        }
        Ok(PatchGrid {
            h_prime,
            w_prime,
            channels,
        })
    }

    pub fn tokens(&self) -> usize {
        self.h_prime * self.w_prime
    }
}

fn expect_rank<T>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.shape.len() != rank {
        return Err(Error::invalid(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape),
        ));
    }
    Ok(())
}

/// Matrix product of `[m, k]` and `[k, n]`.
///
/// Each output element accumulates its `k` products in ascending order.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let n = b.shape[1];
    if b.shape[0] != k {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_rows(&a.data, &b.data, k, n, &mut out);
    Tensor::finite("matmul", vec![m, n], out)
}

/// `out[i, :] = Σ_p a[i, p] · b[p, :]` for every row `i`.
pub(crate) fn gemm_rows<T: Float>(a: &[T], b: &[T], k: usize, n: usize, out: &mut [T]) {
    par::for_each_row(out, n, k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        // Four terms per sweep over `row`, added in the same order as a
        // plain loop over `p`, so results do not depend on the unrolling.
        let quads = k / 4 * 4;
        for p in (0..quads).step_by(4) {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for ((((o, &v0), &v1), &v2), &v3) in row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *o = *o + a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
            }
        }
        for p in quads..k {
            let av = a_row[p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    });
}

/// Transpose of a rank-2 tensor.
pub fn transpose<T: Float>(t: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("transpose", t, 2)?;
    Ok(permute(t, &[1, 0]))
}

/// Reorders axes so that output axis `i` is input axis `perm[i]`.
///
/// `perm` must be a permutation of `0..rank`; callers validate it.
pub(crate) fn permute<T: Float>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    debug_assert_eq!(perm.len(), t.rank());
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return t.clone();
    }
    let rank = t.rank();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * t.shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let last = *out_shape.last().unwrap_or(&1);
    let last_stride = *strides.last().unwrap_or(&1);
    let src = &t.data;
    let mut out = vec![T::zero(); t.len()];
    par::for_each_row(&mut out, last, last, |row_idx, row| {
        // Decompose the row index over all but the last output axis.
        let mut rem = row_idx;
        let mut base = 0;
        for ax in (0..rank.saturating_sub(1)).rev() {
            let d = out_shape[ax];
            base += (rem % d) * strides[ax];
            rem /= d;
        }
        for (j, o) in row.iter_mut().enumerate() {
            *o = src[base + j * last_stride];
        }
    });
    Tensor::from_raw(out_shape, out)
}

/// Elementwise sum of two tensors of identical shape.
pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub(crate) fn zip_with<T: Float>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::shape(op, &a.shape, &b.shape));
    }
    let out = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y));
    Tensor::finite(op, a.shape.clone(), out.collect())
}

/// Applies `f` to every element.
pub fn map_unary<T: Float>(t: &Tensor<T>, f: impl Fn(T) -> T + Sync + Send) -> Result<Tensor<T>> {
    let mut out = t.to_vec();
    par::for_each_row(&mut out, 1024, 1024, |_, row| {
        for v in row.iter_mut() {
            *v = f(*v);
        }
    });
    Tensor::finite("map_unary", t.shape.clone(), out)
}

/// Multiplies every element by `k`.
pub fn scale<T: Float>(t: &Tensor<T>, k: T) -> Result<Tensor<T>> {
    map_unary(t, |v| v * k)
}

/// Joins tensors along `axis`; all other axes must agree.
pub fn concat<T: Float>(ts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = ts
        .first()
        .ok_or_else(|| Error::invalid("concat", "no tensors to concatenate"))?;
    if axis >= first.rank() {
        return Err(Error::invalid(
            "concat",
            format!("axis {axis} out of range for rank {}", first.rank()),
        ));
    }
    for t in &ts[1..] {
        let same_rest = t.rank() == first.rank()
            && t.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same_rest {
            return Err(Error::shape("concat", &first.shape, &t.shape));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: Vec<usize> = ts.iter().map(|t| t.shape[axis..].iter().product()).collect();
    let mut data = Vec::with_capacity(ts.iter().map(Tensor::len).sum());
    for o in 0..outer {
        for (t, &n) in ts.iter().zip(&inner) {
            data.extend_from_slice(&t.data[o * n..(o + 1) * n]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = ts.iter().map(|t| t.shape[axis]).sum();
    Ok(Tensor::from_raw(shape, data))
}

/// Inverse of [`concat`]: cuts `t` along `axis` into pieces of the given sizes.
pub fn split<T: Float>(t: &Tensor<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if axis >= t.rank() || sizes.iter().sum::<usize>() != t.shape[axis] {
        return Err(Error::invalid(
            "split",
            format!("sizes {sizes:?} do not partition axis {axis} of {:?}", t.shape),
        ));
    }
    let outer: usize = t.shape[..axis].iter().product();
    let tail: usize = t.shape[axis + 1..].iter().product();
    let row = t.shape[axis] * tail;
    let mut offset = 0;
    let mut parts = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let n = s * tail;
        let mut data = Vec::with_capacity(outer * n);
        for o in 0..outer {
            let start = o * row + offset;
            data.extend_from_slice(&t.data[start..start + n]);
        }
        let mut shape = t.shape.clone();
        shape[axis] = s;
        parts.push(Tensor::from_raw(shape, data));
        offset += n;
    }
    Ok(parts)
}

/// Geometry shared by [`unfold`] and [`fold`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnfoldGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl UnfoldGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("unfold", "kernel and stride must be positive"));
        }
        let axis = |len: usize| -> Result<usize> {
            let span = (len + 2 * padding).checked_sub(kernel).ok_or_else(|| {
                Error::invalid(
                    "unfold",
                    format!("kernel {kernel} exceeds padded extent {}", len + 2 * padding),
                )
            })?;
            if span % stride != 0 {
                return Err(Error::invalid(
                    "unfold",
                    format!("extent {len} + 2*{padding} - {kernel} is not divisible by stride {stride}"),
                ));
            }
            Ok(span / stride + 1)
        };
        Ok(UnfoldGeometry {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: axis(height)?,
            out_w: axis(width)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn tokens(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel `(y, x)` for patch row `di`, col `dj` of token `(oy, ox)`,
    /// or `None` when it falls in the zero padding.
    fn source(&self, oy: usize, ox: usize, di: usize, dj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + di).checked_sub(self.padding)?;
        let x = (ox * self.stride + dj).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Extracts every `kernel`×`kernel` patch of a `[c, h, w]` tensor.
///
/// Returns `[c·k², tokens]`: row `(ch·k + di)·k + dj`, column
/// `oy·out_w + ox`. Samples outside the image are zero.
pub fn unfold<T: Float>(t: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    expect_rank("unfold", t, 3)?;
    let g = UnfoldGeometry::new(t.shape[0], t.shape[1], t.shape[2], kernel, stride, padding)?;
    let tokens = g.tokens();
    let src = &t.data;
    let mut out = vec![T::zero(); g.rows() * tokens];
    par::for_each_row(&mut out, tokens, tokens, |row, dst| {
        let ch = row / (kernel * kernel);
        let di = (row / kernel) % kernel;
        let dj = row % kernel;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                if let Some((y, x)) = g.source(oy, ox, di, dj) {
                    dst[oy * g.out_w + ox] = src[(ch * g.height + y) * g.width + x];
                }
            }
        }
    });
    Ok(Tensor::from_raw(vec![g.rows(), tokens], out))
}

/// Adjoint of [`unfold`]: scatters patch columns back into a `[c, h, w]`
/// image, summing overlapping contributions.
pub fn fold<T: Float>(cols: &Tensor<T>, g: &UnfoldGeometry) -> Result<Tensor<T>> {
    if cols.shape() != [g.rows(), g.tokens()] {
        return Err(Error::shape("fold", cols.shape(), &[g.rows(), g.tokens()]));
    }
    let k = g.kernel;
    let plane = g.height * g.width;
    let src = &cols.data;
    let mut out = vec![T::zero(); g.channels * plane];
    par::for_each_row(&mut out, plane, k * k * g.tokens(), |ch, img| {
        for di in 0..k {
            for dj in 0..k {
                let row = (ch * k + di) * k + dj;
                let col = &src[row * g.tokens()..(row + 1) * g.tokens()];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, di, dj) {
                            let v = &mut img[y * g.width + x];
                            *v = *v + col[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    });
    Tensor::finite("fold", vec![g.channels, g.height, g.width], out)
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

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(
            Tensor::<f64>::new([2, 2], vec![1.0; 3]),
            Err(Error::DataLength { .. })
        ));
        assert!(Tensor::<f64>::new([2, 0], vec![]).is_err());
        assert!(matches!(
            Tensor::<f32>::new([1], vec![f32::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_identity_and_hand_products() {
        let x = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matmul(&Tensor::eye(2).unwrap(), &x).unwrap().bit_eq(&x));
        let a = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 1);
        let b = random(&[7, 3], 2);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.data()[i * 7 + p] * b.data()[p * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_errors() {
        let a = random(&[2, 3], 0);
        assert!(matches!(matmul(&a, &a), Err(Error::ShapeMismatch { .. })));
        assert!(matmul(&random(&[2], 0), &a).is_err());
    }

    #[test]
    fn add_and_concat() {
        let x = random(&[2, 3], 3);
        assert!(add(&x, &Tensor::zeros([2, 3]).unwrap()).unwrap().bit_eq(&x));
        assert!(add(&x, &random(&[3, 2], 0)).is_err());

        let y = random(&[2, 5], 4);
        let c = concat(&[x.clone(), y.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 8]);
        for r in 0..2 {
            assert_eq!(&c.data()[r * 8..r * 8 + 3], &x.data()[r * 3..r * 3 + 3]);
            assert_eq!(&c.data()[r * 8 + 3..r * 8 + 8], &y.data()[r * 5..r * 5 + 5]);
        }
        let parts = split(&c, 1, &[3, 5]).unwrap();
        assert!(parts[0].bit_eq(&x) && parts[1].bit_eq(&y));
        assert!(concat(&[x.clone(), random(&[3, 3], 0)], 1).is_err());
    }

    #[test]
    fn map_unary_rejects_overflow() {
        let x = Tensor::new([1], vec![1e300f64]).unwrap();
        assert!(matches!(map_unary(&x, |v| v * v), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn unfold_single_full_patch() {
        let img = random(&[1, 4, 4], 5);
        let cols = unfold(&img, 4, 4, 0).unwrap();
        assert_eq!(cols.shape(), &[16, 1]);
        assert_eq!(cols.data(), img.data());
    }

    #[test]
    fn unfold_overlapping_shape_and_padding() {
        let img = random(&[3, 8, 8], 6);
        let cols = unfold(&img, 8, 4, 2).unwrap();
        assert_eq!(cols.shape(), &[192, 4]);
        // Token (0,0), channel 0, patch pixel (0,0) lies in the padding.
        assert_eq!(cols.data()[0], 0.0);
        // Patch pixel (2,2) of token (0,0) is image pixel (0,0).
        assert_eq!(cols.data()[(2 * 8 + 2) * 4], img.data()[0]);
        let zeros = unfold(&Tensor::<f64>::zeros([3, 8, 8]).unwrap(), 8, 4, 2).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unfold_rejects_bad_geometry() {
        let img = random(&[1, 6, 6], 0);
        assert!(unfold(&img, 4, 4, 0).is_err());
        assert!(unfold(&img, 0, 1, 0).is_err());
        assert!(unfold(&img, 8, 1, 0).is_err());
    }

    #[test]
    fn fold_is_the_adjoint_of_unfold() {
        // <unfold(x), y> == <x, fold(y)>
        let x = random(&[2, 6, 6], 7);
        let g = UnfoldGeometry::new(2, 6, 6, 4, 2, 1).unwrap();
        let y = random(&[g.rows(), g.tokens()], 8);
        let ux = unfold(&x, 4, 2, 1).unwrap();
        let lhs: f64 = ux.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let fy = fold(&y, &g).unwrap();
        let rhs: f64 = x.data().iter().zip(fy.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn permute_moves_axes() {
        let x = random(&[2, 3, 4], 9);
        let p = permute(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.get(&[c, a, b]), x.get(&[a, b, c]));
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn non_overlapping_unfold_is_a_bijection(c in 1usize..4, p in 1usize..4, gh in 1usize..4, gw in 1usize..4) {
                let img = Tensor::<f64>::from_fn([c, gh * p, gw * p], |i| i as f64).unwrap();
                let cols = unfold(&img, p, p, 0).unwrap();
                prop_assert_eq!(cols.len(), img.len());
                let mut seen: Vec<f64> = cols.to_vec();
                seen.sort_by(f64::total_cmp);
                prop_assert_eq!(seen, img.to_vec());
            }

            #[test]
            fn identity_matmul_is_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
                let x = random(&[rows, cols], seed);
                prop_assert!(matmul(&Tensor::eye(rows).unwrap(), &x).unwrap().bit_eq(&x));
            }
        }
    }
}
