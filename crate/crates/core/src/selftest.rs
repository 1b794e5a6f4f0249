//! Headless invariant checks shared by the CLI.
//!
//! Gradient checks compare backpropagation against central differences for
//! every block, with respect to both the input and every parameter. The
//! loss is `Σ y ⊙ w` for a seeded random cotangent `w`, so no output
//! direction is left untested.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, grad_check_params, Coordinates, GradCheckReport, Tape, Var};
use crate::blocks::{
    channel_mixing, dense_token_mixing, horizontal_mixing, mixing_mlp, multi_scale_patch_embed, raft_token_mixing,
    raftmlp_block, vertical_mixing, EmbedParams, MixingParams, RaftTokenMixingParams,
};
use crate::cost::{count_macs_exact, params_advantage, raft_mixing_params_analytic, token_mixing_params_analytic};
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph};
use crate::init::{InitScheme, Initializer};
use crate::model::{tiny_config, BlockParams, Model, Preset, TokenMixingParams};
use crate::params::Parameters;
use crate::rearrange::RearrangeSpec;
use crate::tensor::{PatchGrid, Tensor};

/// Finite-difference step.
pub const GRAD_STEP: f64 = 1e-5;
/// Largest accepted relative error for single blocks.
pub const BLOCK_TOLERANCE: f64 = 1e-5;
/// Largest accepted relative error for the end-to-end model.
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Names accepted by [`grad_check_block`].
pub const GRAD_BLOCKS: [&str; 9] = [
    "mixing-mlp",
    "vertical-mixing",
    "horizontal-mixing",
    "raft-token-mixing",
    "channel-mixing",
    "dense-token-mixing",
    "patch-embed",
    "raftmlp-block",
    "model",
];

#[derive(Clone, Debug)]
pub struct BlockGradReport {
    pub block: String,
    pub seed: u64,
    pub input: GradCheckReport,
    pub params: GradCheckReport,
    pub tolerance: f64,
}

impl BlockGradReport {
    pub fn passes(&self) -> bool {
        self.input.passes(self.tolerance) && self.params.passes(self.tolerance)
    }
}

impl fmt::Display for BlockGradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} seed={} tol={:e}\n  input:  {}\n  params: {}",
            if self.passes() { "PASS" } else { "FAIL" },
            self.block,
            self.seed,
            self.tolerance,
            self.input,
            self.params
        )
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn check<P, F>(block: &str, seed: u64, x: Tensor<f64>, params: P, tolerance: f64, f: F) -> Result<BlockGradReport>
where
    P: Parameters<f64> + Clone + Sync,
    F: Fn(&Tape<f64>, Var, &P) -> Result<Var> + Sync + Send,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let probe = Tape::new();
    let out = f(&probe, probe.var(&x), &params)?;
    let weights = random(probe.value(out).shape(), &mut rng)?;
    let loss = |t: &Tape<f64>, v: Var, p: &P| -> Result<Var> {
        let y = f(t, v, p)?;
        t.weighted_sum(y, &weights)
    };
    let input = grad_check(|t, v| loss(t, v, &params), &x, GRAD_STEP, Coordinates::All)?;
    let params_report = grad_check_params(&params, |t, p| loss(t, t.var(&x), p), GRAD_STEP, Coordinates::All)?;
    Ok(BlockGradReport {
        block: block.to_string(),
        seed,
        input,
        params: params_report,
        tolerance,
    })
}

/// Gradient check of one named block (see [`GRAD_BLOCKS`]) at `seed`.
pub fn grad_check_block(block: &str, seed: u64) -> Result<BlockGradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer::new(
        InitScheme::Dense { std: 0.5 },
        seed.wrapping_mul(0x9e37_79b9).wrapping_add(1),
    );
    let tol = BLOCK_TOLERANCE;
    match block {
        "mixing-mlp" => {
            let p = MixingParams::init(&mut init, 6, 6, 12)?;
            check(block, seed, random(&[3, 6], &mut rng)?, p, tol, |t, v, p| {
                mixing_mlp(t, &v, p)
            })
        }
        "vertical-mixing" => {
            let p = MixingParams::init(&mut init, 5, 3, 6)?;
            check(block, seed, random(&[3, 4, 5], &mut rng)?, p, tol, |t, v, p| {
                vertical_mixing(t, &v, p)
            })
        }
        "horizontal-mixing" => {
            let p = MixingParams::init(&mut init, 5, 4, 8)?;
            check(block, seed, random(&[3, 4, 5], &mut rng)?, p, tol, |t, v, p| {
                horizontal_mixing(t, &v, p)
            })
        }
        "raft-token-mixing" => {
            let grid = PatchGrid::new(3, 4, 4)?;
            let p = RaftTokenMixingParams::init(&mut init, grid, 2, 2, 2)?;
            check(block, seed, random(&[12, 4], &mut rng)?, p, tol, move |t, v, p| {
                raft_token_mixing(t, &v, p, grid)
            })
        }
        "channel-mixing" => {
            let p = MixingParams::init(&mut init, 5, 5, 20)?;
            check(block, seed, random(&[6, 5], &mut rng)?, p, tol, |t, v, p| {
                channel_mixing(t, &v, p)
            })
        }
        "dense-token-mixing" => {
            let p = MixingParams::init(&mut init, 4, 6, 12)?;
            check(block, seed, random(&[6, 4], &mut rng)?, p, tol, |t, v, p| {
                dense_token_mixing(t, &v, p)
            })
        }
        "patch-embed" => {
            let p = EmbedParams::init(&mut init, 2, 5, 4, vec![0, 1])?;
            check(block, seed, random(&[2, 8, 8], &mut rng)?, p, tol, |t, v, p| {
                multi_scale_patch_embed(t, &v, p)
            })
        }
        "raftmlp-block" => {
            let grid = PatchGrid::new(2, 3, 4)?;
            let p = BlockParams {
                token: TokenMixingParams::Raft(RaftTokenMixingParams::init(&mut init, grid, 2, 2, 2)?),
                channel: MixingParams::init(&mut init, 4, 4, 16)?,
            };
            check(block, seed, random(&[6, 4], &mut rng)?, p, tol, move |t, v, p| {
                let TokenMixingParams::Raft(token) = &p.token else {
                    unreachable!("built as raft")
                };
                raftmlp_block(t, &v, token, &p.channel, grid)
            })
        }
        "model" => {
            let m = Model::<f64>::build(tiny_config(10, seed), InitScheme::Dense { std: 0.5 })?;
            let x = random(&[3, 32, 32], &mut rng)?;
            check(block, seed, x, m, MODEL_TOLERANCE, |t, v, m| {
                Ok(m.forward_graph(t, &v, crate::model::Resolution::Strict)?.logits)
            })
        }
        other => Err(Error::invalid(
            "grad_check_block",
            format!("unknown block `{other}`; expected one of {}", GRAD_BLOCKS.join(", ")),
        )),
    }
}

/// Outcome of one self-test item.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn outcome(name: &str, r: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn within(got: u64, want: f64, rel: f64) -> bool {
    ((got as f64 - want) / want).abs() < rel
}

/// Runs the invariant suite: preset counts, formula equivalence, gradient
/// checks, structural identities, resolution adaptation and weight IO.
pub fn run_selftest() -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    out.push(outcome(
        "preset parameter counts",
        (|| {
            let mut ok = true;
            let mut detail = Vec::new();
            for (p, want, rel) in [
                (Preset::RaftMlpS, 9.9e6, 0.03),
                (Preset::RaftMlpM, 21.4e6, 0.03),
                (Preset::RaftMlpL, 36.2e6, 0.03),
                (Preset::MixerB16, 59.9e6, 0.005),
                (Preset::MixerB16Raft(1), 58.1e6, 0.005),
                (Preset::MixerB16Raft(2), 58.2e6, 0.005),
                (Preset::MixerB16Raft(4), 58.4e6, 0.005),
            ] {
                let m = Model::<f32>::build(p.config(1000, 0)?, InitScheme::Zeros)?;
                let n = m.num_scalars() as u64;
                ok &= within(n, want, rel);
                detail.push(format!("{p}={n}"));
            }
            Ok((ok, detail.join(" ")))
        })(),
    ));

    out.push(outcome(
        "preset MACs at 224x224",
        (|| {
            let mut ok = true;
            let mut detail = Vec::new();
            for (p, want, rel) in [
                (Preset::RaftMlpS, 2.1e9, 0.10),
                (Preset::RaftMlpM, 4.3e9, 0.10),
                (Preset::RaftMlpL, 6.5e9, 0.10),
                (Preset::MixerB16, 12.6e9, 0.05),
            ] {
                let m = Model::<f32>::build(p.config(1000, 0)?, InitScheme::Zeros)?;
                let macs: u64 = count_macs_exact(&m, (224, 224))?.iter().map(|r| r.1).sum();
                ok &= within(macs, want, rel);
                detail.push(format!("{p}={macs}"));
            }
            Ok((ok, detail.join(" ")))
        })(),
    ));

    out.push(outcome(
        "formulas match constructed blocks",
        (|| {
            let mut init = Initializer::new(InitScheme::Zeros, 0);
            let mut checked = 0;
            for h in 1..=8usize {
                for w in 1..=8usize {
                    for e in [1usize, 2, 4] {
                        let s = h * w;
                        let p: MixingParams<f32> = MixingParams::init(&mut init, 1, s, e * s)?;
                        let mlp = (p.fc1.num_scalars() + p.fc2.num_scalars()) as u128;
                        if mlp != token_mixing_params_analytic(h as u64, w as u64, e as u64) {
                            return Ok((false, format!("token mixing h'={h} w'={w} e={e}")));
                        }
                        for r in [1usize, 2, 4] {
                            let p: RaftTokenMixingParams<f32> =
                                RaftTokenMixingParams::init(&mut init, PatchGrid::new(h, w, 4)?, r, e, e)?;
                            let mlp = [&p.vertical, &p.horizontal]
                                .iter()
                                .map(|m| m.fc1.num_scalars() + m.fc2.num_scalars())
                                .sum::<usize>() as u128;
                            if mlp != raft_mixing_params_analytic(h as u64, w as u64, e as u64, r as u64) {
                                return Ok((false, format!("raft h'={h} w'={w} e={e} r={r}")));
                            }
                            checked += 1;
                        }
                    }
                }
            }
            Ok((true, format!("{checked} configurations")))
        })(),
    ));

    out.push(outcome("raft parameter break-even at h'=14", {
        let advantaged: Vec<u64> = (1..=14).filter(|&r| params_advantage(14, 14, r)).collect();
        Ok((
            advantaged == (1..=9).collect::<Vec<_>>(),
            format!("advantage for r in {advantaged:?}"),
        ))
    }));

    for block in GRAD_BLOCKS {
        out.push(outcome(
            &format!("gradient {block}"),
            (|| {
                let r = grad_check_block(block, 0)?;
                Ok((
                    r.passes(),
                    format!(
                        "input rel {:.2e}, params rel {:.2e}",
                        r.input.max_rel_err, r.params.max_rel_err
                    ),
                ))
            })(),
        ));
    }

    out.push(outcome(
        "rearrange roundtrip",
        (|| {
            let spec = RearrangeSpec::with_bindings("b (h w) (r o) -> b (o w) (r h)", &[("h", 3), ("w", 4), ("r", 2)])?;
            let x = Tensor::<f64>::from_fn([2, 12, 6], |i| i as f64)?;
            let back = spec.invert().apply(&spec.apply(&x)?)?;
            Ok((back.bit_eq(&x), "vertical raft pattern".into()))
        })(),
    ));

    out.push(outcome(
        "zero residual branches collapse to head bias",
        (|| {
            let mut m = Model::<f64>::build(tiny_config(10, 1), InitScheme::Dense { std: 0.3 })?
                .with_zero_residual_branches()?;
            m.head.weight = Tensor::zeros(m.head.weight.shape().to_vec())?;
            let logits = m.forward(&Tensor::full([3, 32, 32], 0.3)?)?;
            Ok((logits.bit_eq(&m.head.bias), "tiny model".into()))
        })(),
    ));

    out.push(outcome(
        "adapted forward",
        (|| {
            let m = Model::<f64>::build(tiny_config(10, 2), InitScheme::Dense { std: 0.3 })?;
            let img = Tensor::from_fn([3, 32, 32], |i| (i % 7) as f64 / 7.0)?;
            let same = m.forward(&img)?.bit_eq(&m.forward_adapted(&img)?);
            let other = m.forward_adapted(&Tensor::full([3, 48, 40], 0.5)?)?;
            Ok((
                same && other.shape() == [10],
                "native bitwise identity, 48x40 shape".into(),
            ))
        })(),
    ));

    out.push(outcome(
        "weight container roundtrip",
        (|| {
            let m = Model::<f64>::build(tiny_config(10, 3), InitScheme::Dense { std: 0.3 })?;
            let bytes = crate::io::container::encode_model(&m)?;
            let back: Model<f64> = crate::io::container::decode_model(m.config.clone(), &bytes)?;
            let truncated = crate::io::container::decode_model::<f64>(m.config.clone(), &bytes[..bytes.len() - 3]);
            Ok((back == m && truncated.is_err(), format!("{} bytes", bytes.len())))
        })(),
    ));

    out.push(outcome(
        "eager and cost shapes agree",
        (|| {
            let m = Model::<f64>::build(tiny_config(10, 4), InitScheme::Zeros)?;
            let logits = m.forward(&Tensor::zeros([3, 32, 32])?)?;
            let g = crate::cost::CostGraph::new();
            let shape = m
                .forward_graph(&g, &vec![3, 32, 32], crate::model::Resolution::Strict)?
                .logits;
            Ok((Graph::<f64>::shape(&Eager, &logits) == shape, format!("{shape:?}")))
        })(),
    ));

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes_at_seed_zero() {
        for block in GRAD_BLOCKS {
            let r = grad_check_block(block, 0).unwrap();
            assert!(r.passes(), "{r}");
            assert!(r.input.checked > 0 && r.params.checked > 0);
        }
        assert!(grad_check_block("nope", 0).is_err());
    }
}
