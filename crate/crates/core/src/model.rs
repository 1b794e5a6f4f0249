//! Architecture configs, presets and whole-model forward passes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{pre_embed_resize, sandwich};
use crate::blocks::{
    channel_mixing, dense_token_mixing, multi_scale_patch_embed, raft_token_mixing, tokens_to_map, ChannelMixingParams,
    EmbedParams, MixingParams, RaftTokenMixingParams,
};
use crate::error::{Error, Result};
use crate::graph::{scoped, shape_of, Eager, Graph};
use crate::init::{InitScheme, Initializer};
use crate::nn::{LayerNormParams, LinearParams};
use crate::params::{join, Parameters};
use crate::tensor::{Float, PatchGrid, Tensor};

/// Token mixer used by every block of a level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TokenMixing {
    /// Raft-token-mixing with raft size `raft_size`.
    Raft {
        raft_size: usize,
        e_ver: usize,
        e_hor: usize,
    },
    /// One MLP across all tokens, hidden width `hidden`.
    Dense { hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub channels: usize,
    pub depth: usize,
    pub stride: usize,
    pub scales: Vec<u32>,
    pub token_mixing: TokenMixing,
    pub e_chan: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub in_channels: usize,
    pub levels: Vec<LevelConfig>,
    pub num_classes: usize,
    /// Training resolution `(h, w)`.
    pub resolution: (usize, usize),
    /// Layer norm between the last block and pooling.
    pub final_norm: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model_config", msg));
        if self.levels.is_empty() || self.levels.len() > 4 {
            return bad(format!("{} levels; expected 1 to 4", self.levels.len()));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return bad("input channels and classes must be positive".into());
        }
        let total = self.total_stride();
        let (h, w) = self.resolution;
        if h == 0 || w == 0 || h % total != 0 || w % total != 0 {
            return bad(format!("resolution {h}x{w} is not divisible by total stride {total}"));
        }
        for (l, level) in self.levels.iter().enumerate() {
            if level.channels == 0 || level.depth == 0 || level.e_chan == 0 || level.stride == 0 {
                return bad(format!(
                    "level {l}: channels, depth, stride and e_chan must be positive"
                ));
            }
            match level.token_mixing {
                TokenMixing::Raft {
                    raft_size,
                    e_ver,
                    e_hor,
                } => {
                    if raft_size == 0 || level.channels % raft_size != 0 || e_ver == 0 || e_hor == 0 {
                        return bad(format!(
                            "level {l}: raft size {raft_size} must divide {} channels",
                            level.channels
                        ));
                    }
                }
                TokenMixing::Dense { hidden: 0 } => {
                    return bad(format!("level {l}: token hidden width must be positive"));
                }
                TokenMixing::Dense { .. } => {}
            }
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.levels.iter().map(|l| l.stride).product()
    }

    /// Patch grid of every level at input size `h × w`.
    pub fn grids_at(&self, h: usize, w: usize) -> Result<Vec<PatchGrid>> {
        let mut out = Vec::with_capacity(self.levels.len());
        let (mut gh, mut gw) = (h, w);
        for level in &self.levels {
            if gh % level.stride != 0 || gw % level.stride != 0 {
                return Err(Error::invalid(
                    "model_config",
                    format!("{gh}x{gw} map is not divisible by stride {}", level.stride),
                ));
            }
            gh /= level.stride;
            gw /= level.stride;
            out.push(PatchGrid::new(gh, gw, level.channels)?);
        }
        Ok(out)
    }

    pub fn grids(&self) -> Result<Vec<PatchGrid>> {
        self.grids_at(self.resolution.0, self.resolution.1)
    }
}

/// Named architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    RaftMlpS,
    RaftMlpM,
    RaftMlpL,
    MixerB16,
    /// Mixer-B/16 with raft-token-mixing of the given raft size.
    MixerB16Raft(usize),
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::RaftMlpS,
        Preset::RaftMlpM,
        Preset::RaftMlpL,
        Preset::MixerB16,
        Preset::MixerB16Raft(1),
        Preset::MixerB16Raft(2),
        Preset::MixerB16Raft(4),
    ];

    pub fn name(self) -> String {
        match self {
            Preset::RaftMlpS => "raftmlp-s".into(),
            Preset::RaftMlpM => "raftmlp-m".into(),
            Preset::RaftMlpL => "raftmlp-l".into(),
            Preset::MixerB16 => "mixer-b16".into(),
            Preset::MixerB16Raft(r) => format!("mixer-b16-cr{r}"),
        }
    }

    pub fn config(self, num_classes: usize, seed: u64) -> Result<ModelConfig> {
        let config = match self {
            Preset::RaftMlpS => raftmlp_config(self, [64, 128, 256, 512], num_classes, seed),
            Preset::RaftMlpM => raftmlp_config(self, [96, 192, 384, 768], num_classes, seed),
            Preset::RaftMlpL => raftmlp_config(self, [128, 192, 512, 1024], num_classes, seed),
            Preset::MixerB16 => mixer_config(self, TokenMixing::Dense { hidden: 384 }, num_classes, seed),
            Preset::MixerB16Raft(r @ (1 | 2 | 4)) => mixer_config(
                self,
                TokenMixing::Raft {
                    raft_size: r,
                    e_ver: 2,
                    e_hor: 2,
                },
                num_classes,
                seed,
            ),
            Preset::MixerB16Raft(r) => {
                return Err(Error::UnknownPreset(format!(
                    "mixer-b16-cr{r} (raft size must be 1, 2 or 4)"
                )))
            }
        };
        config.validate()?;
        Ok(config)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let preset = match s {
            "raftmlp-s" => Preset::RaftMlpS,
            "raftmlp-m" => Preset::RaftMlpM,
            "raftmlp-l" => Preset::RaftMlpL,
            "mixer-b16" => Preset::MixerB16,
            "mixer-b16-cr1" => Preset::MixerB16Raft(1),
            "mixer-b16-cr2" => Preset::MixerB16Raft(2),
            "mixer-b16-cr4" => Preset::MixerB16Raft(4),
            _ => return Err(Error::UnknownPreset(s.to_string())),
        };
        Ok(preset)
    }
}

fn raftmlp_config(preset: Preset, channels: [usize; 4], num_classes: usize, seed: u64) -> ModelConfig {
    let depths = [2, 2, 6, 2];
    let strides = [4, 2, 2, 2];
    let levels = (0..4)
        .map(|l| LevelConfig {
            channels: channels[l],
            depth: depths[l],
            stride: strides[l],
            scales: if l < 3 { vec![0, 1] } else { vec![0] },
            token_mixing: TokenMixing::Raft {
                raft_size: 2,
                e_ver: 2,
                e_hor: 2,
            },
            e_chan: 4,
        })
        .collect();
    ModelConfig {
        name: preset.name(),
        in_channels: 3,
        levels,
        num_classes,
        resolution: (224, 224),
        final_norm: false,
        seed,
    }
}

fn mixer_config(preset: Preset, token_mixing: TokenMixing, num_classes: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        name: preset.name(),
        in_channels: 3,
        levels: vec![LevelConfig {
            channels: 768,
            depth: 12,
            stride: 16,
            scales: vec![0],
            token_mixing,
            e_chan: 4,
        }],
        num_classes,
        resolution: (224, 224),
        final_norm: true,
        seed,
    }
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum TokenMixingParams<T> {
    Raft(RaftTokenMixingParams<T>),
    Dense(MixingParams<T>),
}

impl<T: Float> TokenMixingParams<T> {
    fn with_zero_output(&self) -> Result<Self> {
        Ok(match self {
            TokenMixingParams::Raft(p) => TokenMixingParams::Raft(p.with_zero_output()?),
            TokenMixingParams::Dense(p) => TokenMixingParams::Dense(p.with_zero_output()?),
        })
    }
}

impl<T: Float> Parameters<T> for TokenMixingParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        match self {
            TokenMixingParams::Raft(p) => p.visit(prefix, f),
            TokenMixingParams::Dense(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            TokenMixingParams::Raft(p) => p.visit_mut(prefix, f),
            TokenMixingParams::Dense(p) => p.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub token: TokenMixingParams<T>,
    pub channel: ChannelMixingParams<T>,
}

impl<T: Float> Parameters<T> for BlockParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.token.visit(&join(prefix, "token"), f);
        self.channel.visit(&join(prefix, "channel"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.token.visit_mut(&join(prefix, "token"), f);
        self.channel.visit_mut(&join(prefix, "channel"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelParams<T> {
    pub embed: EmbedParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// Patch grid at the training resolution.
    pub grid: PatchGrid,
}

impl<T: Float> Parameters<T> for LevelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

/// How a forward pass treats inputs at other than the training resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    /// Reject any other input size.
    Strict,
    /// Resize the image to a multiple of the total stride and resample
    /// token grids around every token mixer.
    Adapt,
}

/// Outputs of a forward pass.
#[derive(Clone, Debug)]
pub struct Forward<V> {
    /// Per level: `[tokens, c]` output and its runtime grid.
    pub levels: Vec<(V, PatchGrid)>,
    pub logits: V,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub levels: Vec<LevelParams<T>>,
    pub norm: Option<LayerNormParams<T>>,
    pub head: LinearParams<T>,
}

impl<T: Float> Model<T> {
    pub fn build(config: ModelConfig, scheme: InitScheme) -> Result<Self> {
        config.validate()?;
        let grids = config.grids()?;
        let mut init = Initializer::new(scheme, config.seed);
        let mut levels = Vec::with_capacity(config.levels.len());
        let mut c_in = config.in_channels;
        for (lc, &grid) in config.levels.iter().zip(&grids) {
            let c = lc.channels;
            let embed = EmbedParams::init(&mut init, c_in, c, lc.stride, lc.scales.clone())?;
            let mut blocks = Vec::with_capacity(lc.depth);
            for _ in 0..lc.depth {
                let token = match lc.token_mixing {
                    TokenMixing::Raft {
                        raft_size,
                        e_ver,
                        e_hor,
                    } => {
                        TokenMixingParams::Raft(RaftTokenMixingParams::init(&mut init, grid, raft_size, e_ver, e_hor)?)
                    }
                    TokenMixing::Dense { hidden } => {
                        TokenMixingParams::Dense(MixingParams::init(&mut init, c, grid.tokens(), hidden)?)
                    }
                };
                let channel = MixingParams::init(&mut init, c, c, c * lc.e_chan)?;
                blocks.push(BlockParams { token, channel });
            }
            levels.push(LevelParams { embed, blocks, grid });
            c_in = c;
        }
        let norm = if config.final_norm {
            Some(init.layer_norm(c_in)?)
        } else {
            None
        };
        let head = init.linear(c_in, config.num_classes)?;
        Ok(Model {
            config,
            levels,
            norm,
            head,
        })
    }

    /// Preset with the default initialization.
    pub fn preset(preset: Preset, num_classes: usize, seed: u64) -> Result<Self> {
        Self::build(preset.config(num_classes, seed)?, InitScheme::DEFAULT)
    }

    /// Every module in forward order; parameter names and cost scopes use
    /// these as prefixes.
    pub fn module_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (l, level) in self.levels.iter().enumerate() {
            out.push(format!("levels.{l}.embed"));
            for b in 0..level.blocks.len() {
                out.push(format!("levels.{l}.blocks.{b}.token"));
                out.push(format!("levels.{l}.blocks.{b}.channel"));
            }
        }
        if self.norm.is_some() {
            out.push("norm".into());
        }
        out.push("head".into());
        out
    }

    /// Copy in which every mixing MLP's second layer is zero.
    pub fn with_zero_residual_branches(&self) -> Result<Self> {
        let mut m = self.clone();
        for level in &mut m.levels {
            for b in &mut level.blocks {
                b.token = b.token.with_zero_output()?;
                b.channel = b.channel.with_zero_output()?;
            }
        }
        Ok(m)
    }

    /// Runs the network on a `[c, h, w]` image value.
    pub fn forward_graph<G: Graph<T>>(&self, g: &G, image: &G::Value, mode: Resolution) -> Result<Forward<G::Value>> {
        let s = shape_of(g, "forward", image, 3)?;
        let (want_h, want_w) = self.config.resolution;
        let mut map = match mode {
            Resolution::Strict if (s[1], s[2]) != (want_h, want_w) => {
                return Err(Error::Resolution {
                    got_h: s[1],
                    got_w: s[2],
                    want_h,
                    want_w,
                })
            }
            Resolution::Strict => image.clone(),
            Resolution::Adapt => pre_embed_resize(g, image, self.config.total_stride())?,
        };
        let s = g.shape(&map);
        let runtime = self.config.grids_at(s[1], s[2])?;

        let mut levels = Vec::with_capacity(self.levels.len());
        let mut tokens = None;
        for (l, (level, &grid)) in self.levels.iter().zip(&runtime).enumerate() {
            let mut x = scoped(g, &format!("levels.{l}.embed"), || {
                multi_scale_patch_embed(g, &map, &level.embed)
            })?;
            for (b, block) in level.blocks.iter().enumerate() {
                x = scoped(g, &format!("levels.{l}.blocks.{b}.token"), || {
                    token_mixing(g, &x, &block.token, grid, level.grid)
                })?;
                x = scoped(g, &format!("levels.{l}.blocks.{b}.channel"), || {
                    channel_mixing(g, &x, &block.channel)
                })?;
            }
            if l + 1 < self.levels.len() {
                map = tokens_to_map(g, &x, grid.h_prime, grid.w_prime)?;
            }
            levels.push((x.clone(), grid));
            tokens = Some(x);
        }
        let mut x = tokens.expect("at least one level");
        if let Some(norm) = &self.norm {
            x = scoped(g, "norm", || {
                g.layer_norm(&x, &g.param(&norm.gamma), &g.param(&norm.beta), norm.eps)
            })?;
        }
        let pooled = g.global_avg_pool(&x)?;
        let logits = scoped(g, "head", || {
            g.linear(&pooled, &g.param(&self.head.weight), &g.param(&self.head.bias))
        })?;
        Ok(Forward { levels, logits })
    }

    /// Logits for an image at the training resolution.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_graph(&Eager, image, Resolution::Strict)?.logits)
    }

    /// Logits for an image of any size.
    pub fn forward_adapted(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_graph(&Eager, image, Resolution::Adapt)?.logits)
    }

    /// Output of every level as a `[c, h', w']` feature map.
    pub fn level_features(&self, image: &Tensor<T>, mode: Resolution) -> Result<Vec<Tensor<T>>> {
        self.forward_graph(&Eager, image, mode)?
            .levels
            .iter()
            .map(|(x, grid)| tokens_to_map(&Eager, x, grid.h_prime, grid.w_prime))
            .collect()
    }
}

fn token_mixing<T: Float, G: Graph<T>>(
    g: &G,
    x: &G::Value,
    p: &TokenMixingParams<T>,
    runtime: PatchGrid,
    train: PatchGrid,
) -> Result<G::Value> {
    let mix = |y: &G::Value| match p {
        TokenMixingParams::Raft(p) => raft_token_mixing(g, y, p, train),
        TokenMixingParams::Dense(p) => dense_token_mixing(g, y, p),
    };
    if runtime == train {
        mix(x)
    } else {
        sandwich(g, x, runtime, train, mix)
    }
}

impl<T: Float> Parameters<T> for Model<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (l, level) in self.levels.iter().enumerate() {
            level.visit(&join(prefix, &format!("levels.{l}")), f);
        }
        if let Some(norm) = &self.norm {
            norm.visit(&join(prefix, "norm"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (l, level) in self.levels.iter_mut().enumerate() {
            level.visit_mut(&join(prefix, &format!("levels.{l}")), f);
        }
        if let Some(norm) = &mut self.norm {
            norm.visit_mut(&join(prefix, "norm"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Two-level config used in tests and gradient checks: channels (8, 16),
/// one block per level, 32×32 input.
pub fn tiny_config(num_classes: usize, seed: u64) -> ModelConfig {
    let level = |channels, stride, scales: Vec<u32>| LevelConfig {
        channels,
        depth: 1,
        stride,
        scales,
        token_mixing: TokenMixing::Raft {
            raft_size: 2,
            e_ver: 2,
            e_hor: 2,
        },
        e_chan: 4,
    };
    ModelConfig {
        name: "tiny".into(),
        in_channels: 3,
        levels: vec![level(8, 4, vec![0, 1]), level(16, 2, vec![0])],
        num_classes,
        resolution: (32, 32),
        final_norm: false,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{map_to_tokens, raftmlp_block};
    use crate::nn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn tiny(seed: u64) -> Model<f64> {
        Model::build(tiny_config(10, seed), InitScheme::Dense { std: 0.3 }).unwrap()
    }

    #[test]
    fn preset_names_roundtrip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("raftmlp-xl".parse::<Preset>().is_err());
        assert!(Preset::MixerB16Raft(3).config(1000, 0).is_err());
    }

    #[test]
    fn preset_level_grids() {
        let c = Preset::RaftMlpS.config(1000, 0).unwrap();
        let sizes: Vec<usize> = c.grids().unwrap().iter().map(|g| g.h_prime).collect();
        assert_eq!(sizes, [56, 28, 14, 7]);
        for (l, g) in c.grids().unwrap().iter().enumerate() {
            assert_eq!(g.h_prime, 224 >> (l + 2));
        }
        assert_eq!(
            Preset::MixerB16.config(1000, 0).unwrap().grids().unwrap()[0].h_prime,
            14
        );
        let mut bad = c.clone();
        bad.resolution = (224, 200);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tiny_forward_matches_hand_composition() {
        let m = tiny(1);
        let img = random(&[3, 32, 32], 2);
        let logits = m.forward(&img).unwrap();

        let g = Eager;
        let l0 = &m.levels[0];
        let l1 = &m.levels[1];
        let block = |x: &Tensor<f64>, b: &BlockParams<f64>, grid| {
            let TokenMixingParams::Raft(t) = &b.token else {
                panic!("raft expected")
            };
            raftmlp_block(&g, x, t, &b.channel, grid).unwrap()
        };
        let x = multi_scale_patch_embed(&g, &img, &l0.embed).unwrap();
        let x = block(&x, &l0.blocks[0], PatchGrid::new(8, 8, 8).unwrap());
        let map = tokens_to_map(&g, &x, 8, 8).unwrap();
        let x = multi_scale_patch_embed(&g, &map, &l1.embed).unwrap();
        let x = block(&x, &l1.blocks[0], PatchGrid::new(4, 4, 16).unwrap());
        let want = nn::linear(&nn::global_avg_pool(&x).unwrap(), &m.head).unwrap();
        assert!(logits.bit_eq(&want));
        assert!(logits.bit_eq(&m.forward(&img).unwrap()));
    }

    #[test]
    fn zero_branches_and_head_give_head_bias() {
        let mut m = tiny(3).with_zero_residual_branches().unwrap();
        m.head.weight = Tensor::zeros(m.head.weight.shape().to_vec()).unwrap();
        let logits = m.forward(&random(&[3, 32, 32], 4)).unwrap();
        assert!(logits.bit_eq(&m.head.bias));
    }

    #[test]
    fn input_channel_permutation_reparameterizes() {
        let m = tiny(5);
        let img = random(&[3, 32, 32], 6);
        let perm = [2usize, 0, 1];
        let permuted = Tensor::from_fn([3, 32, 32], |i| {
            let (c, rest) = (i / 1024, i % 1024);
            img.data()[perm[c] * 1024 + rest]
        })
        .unwrap();
        // Embedding rows are (scale, channel, kernel offset); channel c of
        // the permuted image is channel perm[c] of the original.
        let mut m2 = m.clone();
        let e = &m.levels[0].embed;
        let d_out = e.proj.d_out();
        let mut rows = Vec::new();
        let mut offset = 0;
        for &s in &e.scales {
            let k2 = crate::blocks::scale_geometry(e.stride, s).0.pow(2);
            for &src in &perm {
                rows.extend((0..k2).map(|j| offset + src * k2 + j));
            }
            offset += 3 * k2;
        }
        let w = e.proj.weight.data();
        let data = rows
            .iter()
            .flat_map(|&r| w[r * d_out..(r + 1) * d_out].to_vec())
            .collect();
        m2.levels[0].embed.proj.weight = Tensor::new(e.proj.weight.shape().to_vec(), data).unwrap();
        let a = m.forward(&img).unwrap();
        let b = m2.forward(&permuted).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn resolution_mismatch_is_reported() {
        let m = tiny(7);
        let err = m.forward(&random(&[3, 64, 32], 0)).unwrap_err();
        assert!(matches!(
            err,
            Error::Resolution {
                got_h: 64,
                want_h: 32,
                ..
            }
        ));
        let logits = m.forward_adapted(&random(&[3, 64, 40], 0)).unwrap();
        assert_eq!(logits.shape(), &[10]);
    }

    #[test]
    fn adapted_equals_strict_at_native_resolution() {
        let m = tiny(8);
        let img = random(&[3, 32, 32], 9);
        assert!(m.forward(&img).unwrap().bit_eq(&m.forward_adapted(&img).unwrap()));
    }

    #[test]
    fn level_features_are_maps() {
        let m = tiny(10);
        let f = m.level_features(&random(&[3, 32, 32], 11), Resolution::Strict).unwrap();
        assert_eq!(f[0].shape(), &[8, 8, 8]);
        assert_eq!(f[1].shape(), &[16, 4, 4]);
        let back = map_to_tokens(&Eager, &f[1]).unwrap();
        assert_eq!(back.shape(), &[16, 16]);
    }

    #[test]
    fn parameter_names_follow_modules() {
        let m = tiny(12);
        let names: Vec<String> = m.named_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "levels.0.embed.proj.weight");
        assert!(names.contains(&"levels.1.blocks.0.token.horizontal.ln.gamma".to_string()));
        assert_eq!(names.last().unwrap(), "head.bias");
        let modules = m.module_names();
        for n in &names {
            assert!(modules.iter().any(|p| n.starts_with(&format!("{p}."))), "{n}");
        }
    }
}
