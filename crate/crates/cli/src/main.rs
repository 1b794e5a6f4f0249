//! `raftmlp` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 failed check, 3 IO or format
//! error.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use raftmlp::cost::{CostReport, FlopsConvention};
use raftmlp::init::InitScheme;
use raftmlp::io::{container, netpbm};
use raftmlp::model::{Model, ModelConfig, Preset, Resolution, TokenMixing};
use raftmlp::nn::softmax;
use raftmlp::params::Parameters;
use raftmlp::selftest::{grad_check_block, run_selftest, GRAD_BLOCKS};
use raftmlp::{Error, Tensor};

const USAGE: u8 = 1;
const CHECK_FAILED: u8 = 2;
const IO_FORMAT: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "raftmlp",
    version,
    about = "RaftMLP models: structure, cost, inference and self-checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct ModelArgs {
    /// raftmlp-s, raftmlp-m, raftmlp-l, mixer-b16 or mixer-b16-cr{1,2,4}.
    preset: String,
    #[arg(long, default_value_t = 1000)]
    num_classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the level layout of a preset.
    Describe {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Exact parameter and multiply-accumulate counts per module.
    Cost {
        #[command(flatten)]
        model: ModelArgs,
        /// Input size as HxW or a single side length.
        #[arg(long, value_parser = parse_resolution)]
        resolution: Option<(usize, usize)>,
        #[arg(long, default_value = "macs", value_parser = parse_convention)]
        flops_convention: FlopsConvention,
        /// Emit the report as JSON.
        #[arg(long)]
        json: bool,
        /// Fail unless the total parameter count is within `--tolerance`.
        #[arg(long)]
        expect_params: Option<u64>,
        /// Relative tolerance for `--expect-params`.
        #[arg(long, default_value_t = 0.0, requires = "expect_params")]
        tolerance: f64,
    },
    /// Classify a P6 image.
    Forward {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Accept any image size via bicubic resampling.
        #[arg(long)]
        adapt_resolution: bool,
        #[arg(long, default_value_t = 5)]
        topk: usize,
    },
    /// Compare backpropagation with finite differences.
    Gradcheck {
        /// Block name or `all`.
        #[arg(long, default_value = "all")]
        block: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Write every channel of one level's output as a PGM image.
    Featmaps {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Level number, starting at 1.
        #[arg(long)]
        level: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        adapt_resolution: bool,
    },
    /// Run the built-in invariant suite.
    Selftest,
    /// Write freshly initialized weights.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    let parsed = match s.split_once(['x', 'X']) {
        Some((h, w)) => parse(h).zip(parse(w)),
        None => parse(s).map(|n| (n, n)),
    };
    parsed.ok_or_else(|| format!("expected HxW or N with positive sides, got `{s}`"))
}

fn parse_convention(s: &str) -> Result<FlopsConvention, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: USAGE,
            message: message.into(),
        }
    }

    fn check(message: impl Into<String>) -> Self {
        Failure {
            code: CHECK_FAILED,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Container(_) | Error::Image(_) => IO_FORMAT,
            Error::UnknownPreset(_) | Error::Resolution { .. } | Error::InvalidArgument { .. } => USAGE,
            _ => CHECK_FAILED,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type Outcome = Result<(), Failure>;

fn config(args: &ModelArgs) -> Result<ModelConfig, Failure> {
    let preset: Preset = args.preset.parse()?;
    Ok(preset.config(args.num_classes, args.seed)?)
}

fn describe(args: &ModelArgs) -> Outcome {
    let cfg = config(args)?;
    let grids = cfg.grids()?;
    let join = |v: Vec<String>| v.join(" ");
    println!(
        "{}: {} levels, input {}x{}, {} classes",
        cfg.name,
        cfg.levels.len(),
        cfg.resolution.0,
        cfg.resolution.1,
        cfg.num_classes
    );
    println!(
        "channels {}",
        join(cfg.levels.iter().map(|l| l.channels.to_string()).collect())
    );
    println!(
        "depths {}",
        join(cfg.levels.iter().map(|l| l.depth.to_string()).collect())
    );
    println!(
        "strides {}",
        join(cfg.levels.iter().map(|l| l.stride.to_string()).collect())
    );
    println!(
        "grids {}",
        join(grids.iter().map(|g| format!("{}x{}", g.h_prime, g.w_prime)).collect())
    );
    println!();
    println!(
        "{:<6} {:>8} {:>6} {:>7} {:>8} {:>8}  token mixing",
        "level", "channels", "depth", "stride", "scales", "grid"
    );
    for (l, (level, grid)) in cfg.levels.iter().zip(&grids).enumerate() {
        let scales = level.scales.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        let mixing = match level.token_mixing {
            TokenMixing::Raft {
                raft_size,
                e_ver,
                e_hor,
            } => {
                format!(
                    "raft r={raft_size} e_ver={e_ver} e_hor={e_hor}, e_chan={}",
                    level.e_chan
                )
            }
            TokenMixing::Dense { hidden } => format!("dense hidden={hidden}, e_chan={}", level.e_chan),
        };
        println!(
            "{:<6} {:>8} {:>6} {:>7} {:>8} {:>8}  {mixing}",
            l + 1,
            level.channels,
            level.depth,
            level.stride,
            scales,
            format!("{}x{}", grid.h_prime, grid.w_prime),
        );
    }
    if cfg.final_norm {
        println!("final layer norm before pooling");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cost(
    args: &ModelArgs,
    resolution: Option<(usize, usize)>,
    convention: FlopsConvention,
    json: bool,
    expect: Option<u64>,
    tolerance: f64,
) -> Outcome {
    let cfg = config(args)?;
    let resolution = resolution.unwrap_or(cfg.resolution);
    let model = Model::<f32>::build(cfg, InitScheme::Zeros)?;
    let report = CostReport::new(&model, resolution, convention)?;
    if json {
        println!("{}", report.to_json());
    } else {
        println!("{report}");
    }
    if let Some(want) = expect {
        if want == 0 || !(0.0..1.0).contains(&tolerance) {
            return Err(Failure::usage(
                "--expect-params must be positive and --tolerance in [0, 1)",
            ));
        }
        let got = report.totals.params;
        let rel = (got as f64 - want as f64).abs() / want as f64;
        if rel > tolerance {
            return Err(Failure::check(format!(
                "parameter check failed: {got} vs expected {want} (relative error {rel:.4} > {tolerance})"
            )));
        }
        eprintln!("parameter check passed: {got} vs expected {want} (relative error {rel:.4})");
    }
    Ok(())
}

fn load(args: &ModelArgs, weights: &Path) -> Result<Model<f32>, Failure> {
    Ok(container::load_weights(config(args)?, weights)?)
}

fn mode(adapt: bool) -> Resolution {
    if adapt {
        Resolution::Adapt
    } else {
        Resolution::Strict
    }
}

fn forward(args: &ModelArgs, weights: &Path, image: &Path, adapt: bool, topk: usize) -> Outcome {
    if topk == 0 {
        return Err(Failure::usage("--topk must be at least 1"));
    }
    let model = load(args, weights)?;
    let img: Tensor<f32> = netpbm::read_image_ppm(image)?;
    let logits = if adapt {
        model.forward_adapted(&img)?
    } else {
        model.forward(&img)?
    };
    let probs = softmax(&logits)?;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Stable sort keeps lower class indices first among ties.
    order.sort_by(|&a, &b| probs.data()[b].total_cmp(&probs.data()[a]));
    println!("{:>5} {:>6} {:>12} {:>12}", "rank", "class", "probability", "logit");
    for (rank, &c) in order.iter().take(topk).enumerate() {
        println!(
            "{:>5} {:>6} {:>12.6} {:>12.6}",
            rank + 1,
            c,
            probs.data()[c],
            logits.data()[c]
        );
    }
    Ok(())
}

fn gradcheck(block: &str, seed: u64, seeds: u64) -> Outcome {
    let blocks: Vec<&str> = if block == "all" {
        GRAD_BLOCKS.to_vec()
    } else if GRAD_BLOCKS.contains(&block) {
        vec![block]
    } else {
        return Err(Failure::usage(format!(
            "unknown block `{block}`; expected all or one of {}",
            GRAD_BLOCKS.join(", ")
        )));
    };
    if seeds == 0 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let mut failed = 0;
    for b in blocks {
        for s in seed..seed + seeds {
            let report = grad_check_block(b, s)?;
            println!("{report}");
            failed += usize::from(!report.passes());
        }
    }
    if failed > 0 {
        return Err(Failure::check(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

fn featmaps(args: &ModelArgs, weights: &Path, image: &Path, level: usize, out: &Path, adapt: bool) -> Outcome {
    let model = load(args, weights)?;
    let levels = model.levels.len();
    if level == 0 || level > levels {
        return Err(Failure::usage(format!("--level must be between 1 and {levels}")));
    }
    let img: Tensor<f32> = netpbm::read_image_ppm(image)?;
    let features = model.level_features(&img, mode(adapt))?;
    let map = &features[level - 1];
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    for ch in 0..c {
        let plane = Tensor::new([h, w], map.data()[ch * h * w..(ch + 1) * h * w].to_vec()).map_err(Failure::from)?;
        netpbm::write_pgm(&plane, out.join(format!("level{level}_ch{ch:04}.pgm")))?;
    }
    println!("wrote {c} feature maps of {h}x{w} to {}", out.display());
    Ok(())
}

fn selftest() -> Outcome {
    let outcomes = run_selftest();
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        return Err(Failure::check(format!("{failed} self-test item(s) failed")));
    }
    Ok(())
}

fn init(args: &ModelArgs, out: &Path) -> Outcome {
    let model = Model::<f32>::build(config(args)?, InitScheme::DEFAULT)?;
    container::save_weights(&model, out)?;
    println!(
        "wrote {} parameters ({} tensors) to {}",
        model.num_scalars(),
        model.named_parameters().len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Describe { model } => describe(&model),
        Command::Cost {
            model,
            resolution,
            flops_convention,
            json,
            expect_params,
            tolerance,
        } => cost(&model, resolution, flops_convention, json, expect_params, tolerance),
        Command::Forward {
            model,
            weights,
            image,
            adapt_resolution,
            topk,
        } => forward(&model, &weights, &image, adapt_resolution, topk),
        Command::Gradcheck { block, seed, seeds } => gradcheck(&block, seed, seeds),
        Command::Featmaps {
            model,
            weights,
            image,
            level,
            out,
            adapt_resolution,
        } => featmaps(&model, &weights, &image, level, &out, adapt_resolution),
        Command::Selftest => selftest(),
        Command::Init { model, out } => init(&model, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
