//! Running fixed-grid token mixers at other resolutions.
//!
//! Token mixing MLPs are sized for the training grid. At another grid the
//! tokens are bicubically resampled to the training grid, mixed, and
//! resampled back. Channel mixing and patch embedding are resolution
//! agnostic and need no adaptation.

use crate::blocks::{map_to_tokens, raft_token_mixing, tokens_to_map, RaftTokenMixingParams};
use crate::error::{Error, Result};
use crate::graph::{shape_of, Graph};
use crate::tensor::{Float, PatchGrid};

/// Nearest positive multiple of `stride`, rounding halves up.
pub fn nearest_multiple(len: usize, stride: usize) -> usize {
    ((2 * len + stride) / (2 * stride)).max(1) * stride
}

/// Resizes a `[c, h, w]` image so both sides are multiples of
/// `total_stride`. Already divisible images pass through unchanged.
pub fn pre_embed_resize<T: Float, G: Graph<T>>(g: &G, image: &G::Value, total_stride: usize) -> Result<G::Value> {
    let s = shape_of(g, "pre_embed_resize", image, 3)?;
    if total_stride == 0 {
        return Err(Error::invalid("pre_embed_resize", "stride must be positive"));
    }
    let (h, w) = (
        nearest_multiple(s[1], total_stride),
        nearest_multiple(s[2], total_stride),
    );
    if (h, w) == (s[1], s[2]) {
        return Ok(image.clone());
    }
    g.bicubic_resize(image, h, w)
}

/// Bicubically resamples `[from.tokens(), c]` tokens onto the `to` grid.
pub fn resample_tokens<T: Float, G: Graph<T>>(g: &G, x: &G::Value, from: PatchGrid, to: PatchGrid) -> Result<G::Value> {
    if from == to {
        return Ok(x.clone());
    }
    let map = tokens_to_map(g, x, from.h_prime, from.w_prime)?;
    let map = g.bicubic_resize(&map, to.h_prime, to.w_prime)?;
    map_to_tokens(g, &map)
}

/// Runs `mix`, built for `train`, on tokens laid out on `runtime`.
pub fn sandwich<T: Float, G: Graph<T>>(
    g: &G,
    x: &G::Value,
    runtime: PatchGrid,
    train: PatchGrid,
    mix: impl FnOnce(&G::Value) -> Result<G::Value>,
) -> Result<G::Value> {
    let s = shape_of(g, "adapted_token_mixing", x, 2)?;
    if s[0] == 0 || s != [runtime.tokens(), runtime.channels] || runtime.channels != train.channels {
        return Err(Error::invalid(
            "adapted_token_mixing",
            format!("input {s:?} does not match runtime grid {runtime:?} for training grid {train:?}"),
        ));
    }
    let y = resample_tokens(g, x, runtime, train)?;
    let y = mix(&y)?;
    resample_tokens(g, &y, train, runtime)
}

/// Raft-token-mixing at a runtime grid other than the one `p` was built
/// for. Bitwise identical to [`raft_token_mixing`] when the grids agree.
pub fn adapted_raft_mixing<T: Float, G: Graph<T>>(
    g: &G,
    x: &G::Value,
    p: &RaftTokenMixingParams<T>,
    runtime: PatchGrid,
) -> Result<G::Value> {
    let train = p.grid();
    sandwich(g, x, runtime, train, |y| raft_token_mixing(g, y, p, train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Eager;
    use crate::init::{InitScheme, Initializer};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn nearest_multiple_rounding() {
        assert_eq!(nearest_multiple(224, 32), 224);
        assert_eq!(nearest_multiple(197, 32), 192);
        assert_eq!(nearest_multiple(131, 32), 128);
        assert_eq!(nearest_multiple(16, 32), 32);
        assert_eq!(nearest_multiple(1, 32), 32);
        assert_eq!(nearest_multiple(48, 32), 64);
        assert_eq!(nearest_multiple(47, 32), 32);
    }

    #[test]
    fn pre_embed_resize_shapes() {
        let img = random(&[3, 64, 64], 0);
        assert!(pre_embed_resize(&Eager, &img, 32).unwrap().bit_eq(&img));
        let odd = random(&[3, 197, 131], 1);
        assert_eq!(pre_embed_resize(&Eager, &odd, 32).unwrap().shape(), &[3, 192, 128]);
        let small = random(&[3, 16, 16], 2);
        assert_eq!(pre_embed_resize(&Eager, &small, 32).unwrap().shape(), &[3, 32, 32]);
    }

    fn params(grid: PatchGrid, seed: u64) -> RaftTokenMixingParams<f64> {
        RaftTokenMixingParams::init(
            &mut Initializer::new(InitScheme::Dense { std: 0.3 }, seed),
            grid,
            2,
            2,
            2,
        )
        .unwrap()
    }

    #[test]
    fn native_grid_is_bitwise_plain_mixing() {
        let grid = PatchGrid::new(4, 3, 6).unwrap();
        let p = params(grid, 3);
        let x = random(&[12, 6], 4);
        let adapted = adapted_raft_mixing(&Eager, &x, &p, grid).unwrap();
        assert!(adapted.bit_eq(&raft_token_mixing(&Eager, &x, &p, grid).unwrap()));
    }

    #[test]
    fn output_grid_matches_input_grid() {
        let p = params(PatchGrid::new(4, 4, 4).unwrap(), 5);
        for h in 2..=14 {
            for w in 2..=14 {
                let runtime = PatchGrid::new(h, w, 4).unwrap();
                let y = adapted_raft_mixing(&Eager, &random(&[h * w, 4], (h * 31 + w) as u64), &p, runtime).unwrap();
                assert_eq!(y.shape(), &[h * w, 4]);
            }
        }
    }

    #[test]
    fn constant_channels_survive_resampling() {
        let levels = [0.25f64, -1.5, 2.0];
        let big = PatchGrid::new(5, 7, 3).unwrap();
        let small = PatchGrid::new(3, 4, 3).unwrap();
        for (from, to) in [(big, small), (small, big)] {
            let x = Tensor::from_fn([from.tokens(), 3], |i| levels[i % 3]).unwrap();
            let y = resample_tokens(&Eager, &x, from, to).unwrap();
            assert_eq!(y.shape(), &[to.tokens(), 3]);
            for row in y.data().chunks(3) {
                for (v, want) in row.iter().zip(levels) {
                    // Taps sum to one; the only error is float rounding.
                    assert!((v - want).abs() < 1e-14, "{v} vs {want}");
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_tokens() {
        let grid = PatchGrid::new(4, 4, 4).unwrap();
        let p = params(grid, 6);
        assert!(adapted_raft_mixing(&Eager, &random(&[15, 4], 0), &p, grid).is_err());
    }
}
