//! Mixing blocks and multi-scale patch embedding.
//!
//! Token tensors are laid out `[tokens, c]` with tokens in row-major grid
//! order, i.e. token `i·w' + j` sits at grid row `i`, column `j`. All block
//! functions are generic over [`Graph`] so the same code runs eagerly, on an
//! autograd tape, or through the cost counter.

use crate::error::{Error, Result};
use crate::graph::{shape_of, Graph};
use crate::init::Initializer;
use crate::nn::{LayerNormParams, LinearParams};
use crate::params::{join, Parameters};
use crate::rearrange::RearrangeSpec;
use crate::tensor::{Float, PatchGrid, Tensor};

/// Residual MLP `x + fc2(gelu(fc1(ln(x))))`.
///
/// `ln` normalizes the channel axis, which need not be the axis `fc1`
/// acts on (it differs for token mixing).
#[derive(Clone, Debug, PartialEq)]
pub struct MixingParams<T> {
    pub ln: LayerNormParams<T>,
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
}

/// Channel mixing is a mixing MLP whose width is the channel count.
pub type ChannelMixingParams<T> = MixingParams<T>;

impl<T: Float> MixingParams<T> {
    pub fn new(ln: LayerNormParams<T>, fc1: LinearParams<T>, fc2: LinearParams<T>) -> Result<Self> {
        if fc1.d_out() != fc2.d_in() || fc2.d_out() != fc1.d_in() {
            return Err(Error::invalid(
                "mixing_params",
                format!(
                    "fc1 {}->{} and fc2 {}->{} do not form an a->h->a pair",
                    fc1.d_in(),
                    fc1.d_out(),
                    fc2.d_in(),
                    fc2.d_out()
                ),
            ));
        }
        Ok(MixingParams { ln, fc1, fc2 })
    }

    /// LN over `ln_dim` channels and an MLP `dim -> hidden -> dim`.
    pub fn init(init: &mut Initializer, ln_dim: usize, dim: usize, hidden: usize) -> Result<Self> {
        Self::new(
            init.layer_norm(ln_dim)?,
            init.linear(dim, hidden)?,
            init.linear(hidden, dim)?,
        )
    }

    /// Width `a` the MLP acts on.
    pub fn dim(&self) -> usize {
        self.fc1.d_in()
    }

    pub fn hidden(&self) -> usize {
        self.fc1.d_out()
    }

    /// Copy with the second layer zeroed, which turns the block into the
    /// identity.
    pub fn with_zero_output(&self) -> Result<Self> {
        let mut p = self.clone();
        p.fc2 = LinearParams::zeros(p.fc2.d_in(), p.fc2.d_out())?;
        Ok(p)
    }
}

impl<T: Float> Parameters<T> for MixingParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.ln.visit(&join(prefix, "ln"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.ln.visit_mut(&join(prefix, "ln"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Vertical and horizontal mixing MLPs sharing a channel raft of size `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct RaftTokenMixingParams<T> {
    /// Acts on `r·h'` features.
    pub vertical: MixingParams<T>,
    /// Acts on `r·w'` features.
    pub horizontal: MixingParams<T>,
    pub raft_size: usize,
}

impl<T: Float> RaftTokenMixingParams<T> {
    pub fn new(vertical: MixingParams<T>, horizontal: MixingParams<T>, raft_size: usize) -> Result<Self> {
        let c = vertical.ln.dim();
        if raft_size == 0
            || !c.is_multiple_of(raft_size)
            || horizontal.ln.dim() != c
            || !vertical.dim().is_multiple_of(raft_size)
            || !horizontal.dim().is_multiple_of(raft_size)
        {
            return Err(Error::invalid(
                "raft_token_mixing_params",
                format!(
                    "raft size {raft_size} incompatible with {c} channels, vertical width {}, horizontal width {}",
                    vertical.dim(),
                    horizontal.dim()
                ),
            ));
        }
        Ok(RaftTokenMixingParams {
            vertical,
            horizontal,
            raft_size,
        })
    }

    pub fn init(init: &mut Initializer, grid: PatchGrid, raft_size: usize, e_ver: usize, e_hor: usize) -> Result<Self> {
        let (r, c) = (raft_size, grid.channels);
        let vertical = MixingParams::init(init, c, r * grid.h_prime, r * grid.h_prime * e_ver)?;
        let horizontal = MixingParams::init(init, c, r * grid.w_prime, r * grid.w_prime * e_hor)?;
        Self::new(vertical, horizontal, raft_size)
    }

    pub fn channels(&self) -> usize {
        self.vertical.ln.dim()
    }

    /// The grid the parameters were built for.
    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            h_prime: self.vertical.dim() / self.raft_size,
            w_prime: self.horizontal.dim() / self.raft_size,
            channels: self.channels(),
        }
    }

    pub fn with_zero_output(&self) -> Result<Self> {
        Self::new(
            self.vertical.with_zero_output()?,
            self.horizontal.with_zero_output()?,
            self.raft_size,
        )
    }
}

impl<T: Float> Parameters<T> for RaftTokenMixingParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.vertical.visit(&join(prefix, "vertical"), f);
        self.horizontal.visit(&join(prefix, "horizontal"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.vertical.visit_mut(&join(prefix, "vertical"), f);
        self.horizontal.visit_mut(&join(prefix, "horizontal"), f);
    }
}

/// Multi-scale patch embedding: one unfolding per scale `m` with kernel
/// `2^m·p`, stride `p` and padding `(2^m - 1)·p/2`, concatenated and
/// projected by a shared linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams<T> {
    pub stride: usize,
    pub scales: Vec<u32>,
    pub proj: LinearParams<T>,
}

/// Kernel size and padding of scale `m` at stride `p`.
pub fn scale_geometry(stride: usize, m: u32) -> (usize, usize) {
    let k = stride << m;
    (k, (k - stride) / 2)
}

/// Unfolded features per input channel, `Σ_m (2^m·p)²`.
pub fn embed_features_per_channel(stride: usize, scales: &[u32]) -> usize {
    scales.iter().map(|&m| scale_geometry(stride, m).0.pow(2)).sum()
}

fn validate_embed(stride: usize, scales: &[u32]) -> Result<()> {
    if stride == 0 || scales.is_empty() {
        return Err(Error::invalid("embed_params", "stride and scale set must be non-empty"));
    }
    if scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(
            "embed_params",
            format!("scales {scales:?} must be strictly ascending"),
        ));
    }
    if stride % 2 == 1 && scales.iter().any(|&m| m > 0) {
        return Err(Error::invalid(
            "embed_params",
            format!("stride {stride} must be even when a scale m >= 1 is used"),
        ));
    }
    if scales.iter().any(|&m| m > 8) {
        return Err(Error::invalid(
            "embed_params",
            format!("scale out of range in {scales:?}"),
        ));
    }
    Ok(())
}

impl<T: Float> EmbedParams<T> {
    pub fn new(stride: usize, scales: Vec<u32>, proj: LinearParams<T>) -> Result<Self> {
        validate_embed(stride, &scales)?;
        let per_channel = embed_features_per_channel(stride, &scales);
        if !proj.d_in().is_multiple_of(per_channel) {
            return Err(Error::invalid(
                "embed_params",
                format!("projection input {} is not a multiple of {per_channel}", proj.d_in()),
            ));
        }
        Ok(EmbedParams { stride, scales, proj })
    }

    pub fn init(init: &mut Initializer, c_in: usize, c_out: usize, stride: usize, scales: Vec<u32>) -> Result<Self> {
        validate_embed(stride, &scales)?;
        let d_in = c_in * embed_features_per_channel(stride, &scales);
        Self::new(stride, scales, init.linear(d_in, c_out)?)
    }

    pub fn in_channels(&self) -> usize {
        self.proj.d_in() / embed_features_per_channel(self.stride, &self.scales)
    }

    pub fn out_channels(&self) -> usize {
        self.proj.d_out()
    }
}

impl<T: Float> Parameters<T> for EmbedParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

fn apply_linear<T: Float, G: Graph<T>>(g: &G, x: &G::Value, p: &LinearParams<T>) -> Result<G::Value> {
    g.linear(x, &g.param(&p.weight), &g.param(&p.bias))
}

fn apply_ln<T: Float, G: Graph<T>>(g: &G, x: &G::Value, p: &LayerNormParams<T>) -> Result<G::Value> {
    g.layer_norm(x, &g.param(&p.gamma), &g.param(&p.beta), p.eps)
}

/// `fc2(gelu(fc1(y)))` over the trailing axis.
pub fn feed_forward<T: Float, G: Graph<T>>(g: &G, y: &G::Value, p: &MixingParams<T>) -> Result<G::Value> {
    let h = apply_linear(g, y, &p.fc1)?;
    let h = g.gelu(&h)?;
    apply_linear(g, &h, &p.fc2)
}

/// `x + fc2(gelu(fc1(ln(x))))` with LN and MLP both on the trailing axis.
pub fn mixing_mlp<T: Float, G: Graph<T>>(g: &G, x: &G::Value, p: &MixingParams<T>) -> Result<G::Value> {
    let y = apply_ln(g, x, &p.ln)?;
    let y = feed_forward(g, &y, p)?;
    g.add(x, &y)
}

/// Same MLP at every token of a `[tokens, c]` tensor.
pub fn channel_mixing<T: Float, G: Graph<T>>(g: &G, x: &G::Value, p: &ChannelMixingParams<T>) -> Result<G::Value> {
    shape_of(g, "channel_mixing", x, 2)?;
    mixing_mlp(g, x, p)
}

/// Residual MLP along one spatial axis of an `[h', w', c]` tensor.
///
/// `to_fibers` moves the mixed axis last; LN is over channels per token.
fn axis_mixing<T: Float, G: Graph<T>>(
    g: &G,
    op: &'static str,
    x: &G::Value,
    p: &MixingParams<T>,
    to_fibers: &str,
    from_fibers: &str,
    mixed_axis: usize,
) -> Result<G::Value> {
    let s = shape_of(g, op, x, 3)?;
    if p.dim() != s[mixed_axis] || p.ln.dim() != s[2] {
        return Err(Error::invalid(
            op,
            format!("params for width {} / {} channels, input {s:?}", p.dim(), p.ln.dim()),
        ));
    }
    let y = apply_ln(g, x, &p.ln)?;
    let y = g.rearrange(&y, &RearrangeSpec::with_bindings(to_fibers, &[])?)?;
    let y = feed_forward(g, &y, p)?;
    let y = g.rearrange(&y, &RearrangeSpec::with_bindings(from_fibers, &[])?)?;
    g.add(x, &y)
}

/// Mixes along the vertical axis: the same `h' -> h'` MLP for every
/// (column, channel) fiber of an `[h', w', c]` tensor.
pub fn vertical_mixing<T: Float, G: Graph<T>>(g: &G, x: &G::Value, p: &MixingParams<T>) -> Result<G::Value> {
    axis_mixing(g, "vertical_mixing", x, p, "h w c -> w c h", "w c h -> h w c", 0)
}

/// Mixes along the horizontal axis: the same `w' -> w'` MLP for every
/// (row, channel) fiber of an `[h', w', c]` tensor.
pub fn horizontal_mixing<T: Float, G: Graph<T>>(g: &G, x: &G::Value, p: &MixingParams<T>) -> Result<G::Value> {
    axis_mixing(g, "horizontal_mixing", x, p, "h w c -> h c w", "h c w -> h w c", 1)
}

/// Rearrangement patterns of the raft-token-mixing block.
pub const RAFT_VERTICAL: &str = "b (h w) (r o) -> b (o w) (r h)";
pub const RAFT_HORIZONTAL: &str = "b (h w) (r o) -> b (o h) (r w)";

fn check_tokens<T: Float, G: Graph<T>>(g: &G, op: &'static str, x: &G::Value, grid: PatchGrid) -> Result<()> {
    let s = shape_of(g, op, x, 2)?;
    if s != [grid.tokens(), grid.channels] {
        return Err(Error::invalid(
            op,
            format!(
                "input {s:?} does not match a {}x{} grid of {} channels",
                grid.h_prime, grid.w_prime, grid.channels
            ),
        ));
    }
    Ok(())
}

/// Raft-token-mixing on a `[h'·w', c]` token tensor.
///
/// Channels split as `c = r·o`; the vertical pass mixes the `r·h'` values
/// of each `(o, column)` fiber, the horizontal pass the `r·w'` values of
/// each `(o, row)` fiber. Each pass is a residual block with its own LN
/// over the original channels.
pub fn raft_token_mixing<T: Float, G: Graph<T>>(
    g: &G,
    x: &G::Value,
    p: &RaftTokenMixingParams<T>,
    grid: PatchGrid,
) -> Result<G::Value> {
    check_tokens(g, "raft_token_mixing", x, grid)?;
    let r = p.raft_size;
    if !grid.channels.is_multiple_of(r) {
        return Err(Error::invalid(
            "raft_token_mixing",
            format!("{} channels not divisible by raft size {r}", grid.channels),
        ));
    }
    if p.grid() != grid {
        return Err(Error::invalid(
            "raft_token_mixing",
            format!("parameters built for {:?}, input grid {grid:?}", p.grid()),
        ));
    }
    let bind = [("h", grid.h_prime), ("w", grid.w_prime), ("r", r)];
    let vertical = RearrangeSpec::with_bindings(RAFT_VERTICAL, &bind)?;
    let horizontal = RearrangeSpec::with_bindings(RAFT_HORIZONTAL, &bind)?;
    let batched = [1, grid.tokens(), grid.channels];

    let x3 = g.reshape(x, &batched)?;
    let y = apply_ln(g, &x3, &p.vertical.ln)?;
    let y = g.rearrange(&y, &vertical)?;
    let y = feed_forward(g, &y, &p.vertical)?;
    let y = g.rearrange(&y, &vertical.invert())?;
    let u = g.add(&x3, &y)?;

    let y = apply_ln(g, &u, &p.horizontal.ln)?;
    let y = g.rearrange(&y, &horizontal)?;
    let y = feed_forward(g, &y, &p.horizontal)?;
    let y = g.rearrange(&y, &horizontal.invert())?;
    let out = g.add(&u, &y)?;
    g.reshape(&out, &[grid.tokens(), grid.channels])
}

/// MLP-Mixer token mixing on `[tokens, c]`: LN over channels, then one MLP
/// across all tokens shared by every channel.
pub fn dense_token_mixing<T: Float, G: Graph<T>>(g: &G, x: &G::Value, p: &MixingParams<T>) -> Result<G::Value> {
    let s = shape_of(g, "dense_token_mixing", x, 2)?;
    if p.dim() != s[0] || p.ln.dim() != s[1] {
        return Err(Error::invalid(
            "dense_token_mixing",
            format!("params for {} tokens / {} channels, input {s:?}", p.dim(), p.ln.dim()),
        ));
    }
    let y = apply_ln(g, x, &p.ln)?;
    let y = g.rearrange(&y, &RearrangeSpec::with_bindings("t c -> c t", &[])?)?;
    let y = feed_forward(g, &y, p)?;
    let y = g.rearrange(&y, &RearrangeSpec::with_bindings("c t -> t c", &[])?)?;
    g.add(x, &y)
}

/// Raft-token-mixing followed by channel mixing.
pub fn raftmlp_block<T: Float, G: Graph<T>>(
    g: &G,
    x: &G::Value,
    token: &RaftTokenMixingParams<T>,
    channel: &ChannelMixingParams<T>,
    grid: PatchGrid,
) -> Result<G::Value> {
    let y = raft_token_mixing(g, x, token, grid)?;
    channel_mixing(g, &y, channel)
}

/// Embeds a `[c_in, h, w]` image into `[(h/p)·(w/p), c_out]` tokens.
pub fn multi_scale_patch_embed<T: Float, G: Graph<T>>(g: &G, x: &G::Value, p: &EmbedParams<T>) -> Result<G::Value> {
    let s = shape_of(g, "multi_scale_patch_embed", x, 3)?;
    let (c, h, w) = (s[0], s[1], s[2]);
    if c != p.in_channels() {
        return Err(Error::invalid(
            "multi_scale_patch_embed",
            format!("expected {} input channels, got {c}", p.in_channels()),
        ));
    }
    if h % p.stride != 0 || w % p.stride != 0 {
        return Err(Error::invalid(
            "multi_scale_patch_embed",
            format!("{h}x{w} is not divisible by stride {}", p.stride),
        ));
    }
    let to_tokens = RearrangeSpec::with_bindings("f t -> t f", &[])?;
    let mut parts = Vec::with_capacity(p.scales.len());
    for &m in &p.scales {
        let (k, pad) = scale_geometry(p.stride, m);
        let cols = g.unfold(x, k, p.stride, pad)?;
        parts.push(g.rearrange(&cols, &to_tokens)?);
    }
    let features = if parts.len() == 1 {
        parts.pop().expect("one scale")
    } else {
        g.concat(&parts, 1)?
    };
    apply_linear(g, &features, &p.proj)
}

/// `[h'·w', c]` tokens to a `[c, h', w']` feature map.
pub fn tokens_to_map<T: Float, G: Graph<T>>(g: &G, x: &G::Value, h_prime: usize, w_prime: usize) -> Result<G::Value> {
    let spec = RearrangeSpec::with_bindings("(h w) c -> c h w", &[("h", h_prime), ("w", w_prime)])?;
    g.rearrange(x, &spec)
}

/// `[c, h', w']` feature map to `[h'·w', c]` tokens.
pub fn map_to_tokens<T: Float, G: Graph<T>>(g: &G, x: &G::Value) -> Result<G::Value> {
    g.rearrange(x, &RearrangeSpec::with_bindings("c h w -> (h w) c", &[])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Eager;
    use crate::init::InitScheme;
    use crate::nn::gelu_scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn dense(seed: u64) -> Initializer {
        Initializer::new(InitScheme::Dense { std: 0.5 }, seed)
    }

    #[test]
    fn mixing_mlp_zero_fc2_is_identity() {
        let p = MixingParams::<f64>::init(&mut dense(0), 4, 4, 8)
            .unwrap()
            .with_zero_output()
            .unwrap();
        let x = random(&[5, 4], 1);
        assert!(mixing_mlp(&Eager, &x, &p).unwrap().bit_eq(&x));
    }

    #[test]
    fn mixing_mlp_hand_evaluation() {
        let eye = || LinearParams::new(Tensor::eye(2).unwrap(), Tensor::zeros([2]).unwrap()).unwrap();
        let p = MixingParams::new(LayerNormParams::identity(2, 1e-12).unwrap(), eye(), eye()).unwrap();
        let x: Tensor<f64> = Tensor::new([2], vec![1.0, -1.0]).unwrap();
        let y = mixing_mlp(&Eager, &x, &p).unwrap();
        let expected = [1.0 + gelu_scalar(1.0), -1.0 + gelu_scalar(-1.0)];
        assert!((y.data()[0] - expected[0]).abs() < 1e-9);
        assert!((y.data()[1] - expected[1]).abs() < 1e-9);
        assert!((gelu_scalar(1.0f64) - 0.841).abs() < 1e-3 && (gelu_scalar(-1.0f64) + 0.159).abs() < 1e-3);
    }

    #[test]
    fn mixing_mlp_update_is_shift_invariant() {
        let p = MixingParams::<f64>::init(&mut dense(2), 6, 6, 12).unwrap();
        let x = random(&[3, 6], 3);
        let shifted = crate::tensor::map_unary(&x, |v| v + 2.5).unwrap();
        let dx = crate::tensor::zip_with("sub", &mixing_mlp(&Eager, &x, &p).unwrap(), &x, |a, b| a - b).unwrap();
        let ds = crate::tensor::zip_with("sub", &mixing_mlp(&Eager, &shifted, &p).unwrap(), &shifted, |a, b| {
            a - b
        })
        .unwrap();
        assert!(dx.max_abs_diff(&ds).unwrap() < 1e-9);
    }

    #[test]
    fn vertical_and_horizontal_are_fiberwise() {
        let (h, w, c) = (3, 4, 5);
        let x = random(&[h, w, c], 4);
        let pv = MixingParams::<f64>::init(&mut dense(5), c, h, 2 * h).unwrap();
        let y = vertical_mixing(&Eager, &x, &pv).unwrap();
        let ln = crate::nn::layer_norm(&x, &pv.ln).unwrap();
        // Column j, channel k: y[:, j, k] = x[:, j, k] + MLP(ln[:, j, k]).
        for j in 0..w {
            for k in 0..c {
                let fiber = Tensor::from_fn([h], |i| ln.get(&[i, j, k]).unwrap()).unwrap();
                let out = feed_forward(&Eager, &fiber, &pv).unwrap();
                for i in 0..h {
                    let want = x.get(&[i, j, k]).unwrap() + out.data()[i];
                    assert!((y.get(&[i, j, k]).unwrap() - want).abs() < 1e-12);
                }
            }
        }
        let ph = MixingParams::<f64>::init(&mut dense(6), c, w, 2 * w).unwrap();
        assert_eq!(horizontal_mixing(&Eager, &x, &ph).unwrap().shape(), &[h, w, c]);
        assert!(vertical_mixing(&Eager, &x, &ph).is_err());
    }

    /// Straight-line evaluation of raft-token-mixing with explicit index
    /// loops for both rearrangements and per-fiber MLPs.
    fn raft_oracle(x: &Tensor<f64>, p: &RaftTokenMixingParams<f64>, grid: PatchGrid) -> Vec<f64> {
        let (hh, ww, c, r) = (grid.h_prime, grid.w_prime, grid.channels, p.raft_size);
        let o = c / r;
        let ln = |v: &[f64], q: &MixingParams<f64>| -> Vec<f64> {
            let mut out = Vec::with_capacity(v.len());
            for row in v.chunks(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / c as f64;
                for (j, a) in row.iter().enumerate() {
                    out.push(q.ln.gamma.data()[j] * (a - mean) / (var + q.ln.eps).sqrt() + q.ln.beta.data()[j]);
                }
            }
            out
        };
        let mlp = |v: &[f64], q: &MixingParams<f64>| -> Vec<f64> {
            let (a, hid) = (q.dim(), q.hidden());
            let w1 = q.fc1.weight.data();
            let w2 = q.fc2.weight.data();
            let hidden: Vec<f64> = (0..hid)
                .map(|j| gelu_scalar((0..a).map(|i| v[i] * w1[i * hid + j]).sum::<f64>() + q.fc1.bias.data()[j]))
                .collect();
            (0..a)
                .map(|j| (0..hid).map(|i| hidden[i] * w2[i * a + j]).sum::<f64>() + q.fc2.bias.data()[j])
                .collect()
        };
        let xd = x.data().to_vec();
        // vertical
        let l = ln(&xd, &p.vertical);
        let mut u = xd.clone();
        for oi in 0..o {
            for wi in 0..ww {
                let mut fiber = vec![0.0; r * hh];
                for ri in 0..r {
                    for hi in 0..hh {
                        fiber[ri * hh + hi] = l[(hi * ww + wi) * c + ri * o + oi];
                    }
                }
                let out = mlp(&fiber, &p.vertical);
                for ri in 0..r {
                    for hi in 0..hh {
                        u[(hi * ww + wi) * c + ri * o + oi] += out[ri * hh + hi];
                    }
                }
            }
        }
        // horizontal
        let l = ln(&u, &p.horizontal);
        let mut y = u.clone();
        for oi in 0..o {
            for hi in 0..hh {
                let mut fiber = vec![0.0; r * ww];
                for ri in 0..r {
                    for wi in 0..ww {
                        fiber[ri * ww + wi] = l[(hi * ww + wi) * c + ri * o + oi];
                    }
                }
                let out = mlp(&fiber, &p.horizontal);
                for ri in 0..r {
                    for wi in 0..ww {
                        y[(hi * ww + wi) * c + ri * o + oi] += out[ri * ww + wi];
                    }
                }
            }
        }
        y
    }

    #[test]
    fn raft_matches_index_loop_oracle() {
        for seed in 0..5u64 {
            for (h, w, c, r) in [(2, 2, 2, 2), (3, 2, 4, 2), (2, 3, 4, 1), (3, 3, 4, 2), (1, 3, 2, 1)] {
                let grid = PatchGrid::new(h, w, c).unwrap();
                let p = RaftTokenMixingParams::<f64>::init(&mut dense(seed * 31 + 7), grid, r, 2, 2).unwrap();
                let x = random(&[h * w, c], seed);
                let y = raft_token_mixing(&Eager, &x, &p, grid).unwrap();
                let oracle = raft_oracle(&x, &p, grid);
                for (a, b) in y.data().iter().zip(&oracle) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b} at {h}x{w}x{c} r={r}");
                }
            }
        }
    }

    #[test]
    fn raft_r1_equals_vertical_then_horizontal() {
        let grid = PatchGrid::new(3, 4, 5).unwrap();
        let p = RaftTokenMixingParams::<f64>::init(&mut dense(8), grid, 1, 2, 2).unwrap();
        let x = random(&[12, 5], 9);
        let raft = raft_token_mixing(&Eager, &x, &p, grid).unwrap();
        let x3 = x.reshape([3, 4, 5]).unwrap();
        let u = vertical_mixing(&Eager, &x3, &p.vertical).unwrap();
        let y = horizontal_mixing(&Eager, &u, &p.horizontal).unwrap();
        assert!(raft.bit_eq(&y.reshape([12, 5]).unwrap()));
    }

    #[test]
    fn raft_errors() {
        let grid = PatchGrid::new(2, 2, 4).unwrap();
        let p = RaftTokenMixingParams::<f64>::init(&mut dense(10), grid, 2, 2, 2).unwrap();
        assert!(raft_token_mixing(&Eager, &random(&[5, 4], 0), &p, grid).is_err());
        let other = PatchGrid::new(4, 1, 4).unwrap();
        assert!(raft_token_mixing(&Eager, &random(&[4, 4], 0), &p, other).is_err());
        let odd = PatchGrid::new(2, 2, 3).unwrap();
        assert!(RaftTokenMixingParams::<f64>::init(&mut dense(0), odd, 2, 2, 2).is_err());
    }

    #[test]
    fn blocks_with_zero_fc2_are_identity() {
        let grid = PatchGrid::new(3, 2, 4).unwrap();
        let x = random(&[6, 4], 11);
        let token = RaftTokenMixingParams::<f64>::init(&mut dense(12), grid, 2, 2, 2)
            .unwrap()
            .with_zero_output()
            .unwrap();
        let chan = MixingParams::init(&mut dense(13), 4, 4, 16)
            .unwrap()
            .with_zero_output()
            .unwrap();
        assert!(raft_token_mixing(&Eager, &x, &token, grid).unwrap().bit_eq(&x));
        assert!(channel_mixing(&Eager, &x, &chan).unwrap().bit_eq(&x));
        assert!(raftmlp_block(&Eager, &x, &token, &chan, grid).unwrap().bit_eq(&x));
        let dense_tok = MixingParams::init(&mut dense(14), 4, 6, 12)
            .unwrap()
            .with_zero_output()
            .unwrap();
        assert!(dense_token_mixing(&Eager, &x, &dense_tok).unwrap().bit_eq(&x));
    }

    #[test]
    fn raftmlp_block_is_the_composition() {
        let grid = PatchGrid::new(2, 3, 4).unwrap();
        let x = random(&[6, 4], 15);
        let token = RaftTokenMixingParams::<f64>::init(&mut dense(16), grid, 2, 2, 2).unwrap();
        let chan = MixingParams::init(&mut dense(17), 4, 4, 16).unwrap();
        let block = raftmlp_block(&Eager, &x, &token, &chan, grid).unwrap();
        let manual = channel_mixing(&Eager, &raft_token_mixing(&Eager, &x, &token, grid).unwrap(), &chan).unwrap();
        assert!(block.bit_eq(&manual));
    }

    #[test]
    fn single_scale_embedding_is_conventional_patch_embedding() {
        let (c, p, gh, gw) = (3, 4, 2, 3);
        let img = random(&[c, gh * p, gw * p], 18);
        let e = EmbedParams::<f64>::init(&mut dense(19), c, 5, p, vec![0]).unwrap();
        let y = multi_scale_patch_embed(&Eager, &img, &e).unwrap();
        // Flatten each p×p patch in (channel, row, col) order and project.
        let patches = Tensor::from_fn([gh * gw, c * p * p], |i| {
            let (t, f) = (i / (c * p * p), i % (c * p * p));
            let (ti, tj) = (t / gw, t % gw);
            let (ch, di, dj) = (f / (p * p), (f / p) % p, f % p);
            img.get(&[ch, ti * p + di, tj * p + dj]).unwrap()
        })
        .unwrap();
        let want = crate::nn::linear(&patches, &e.proj).unwrap();
        assert!(y.bit_eq(&want));
    }

    #[test]
    fn multi_scale_embedding_geometry() {
        let e = EmbedParams::<f64>::init(&mut dense(20), 3, 7, 4, vec![0, 1]).unwrap();
        assert_eq!(e.proj.d_in(), 48 + 192);
        let y = multi_scale_patch_embed(&Eager, &random(&[3, 8, 8], 21), &e).unwrap();
        assert_eq!(y.shape(), &[4, 7]);
        let zeros = multi_scale_patch_embed(&Eager, &Tensor::zeros([3, 8, 8]).unwrap(), &e).unwrap();
        for row in zeros.data().chunks(7) {
            assert_eq!(row, e.proj.bias.data());
        }
        assert!(multi_scale_patch_embed(&Eager, &random(&[3, 10, 8], 0), &e).is_err());
        assert!(multi_scale_patch_embed(&Eager, &random(&[2, 8, 8], 0), &e).is_err());
        assert!(EmbedParams::<f64>::init(&mut dense(0), 3, 7, 3, vec![0, 1]).is_err());
        assert!(EmbedParams::<f64>::init(&mut dense(0), 3, 7, 3, vec![0]).is_ok());
        assert!(EmbedParams::<f64>::init(&mut dense(0), 3, 7, 4, vec![1, 0]).is_err());
    }

    #[test]
    fn token_map_roundtrip() {
        let x = random(&[6, 4], 22);
        let m = tokens_to_map(&Eager, &x, 2, 3).unwrap();
        assert_eq!(m.shape(), &[4, 2, 3]);
        assert_eq!(m.get(&[1, 1, 2]), x.get(&[5, 1]));
        assert!(map_to_tokens(&Eager, &m).unwrap().bit_eq(&x));
    }
}
