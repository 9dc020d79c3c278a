//! `ignet` command line: train, fuse, eval, gradcheck and init-config.
//!
//! Exit codes: 0 success, 1 verification or training failure, 2 usage or
//! input error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{replace_luma, write_pgm, write_ppm};
use crate::config::FusionConfig;
use crate::dataset::{pair_directory, read_luma};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, PairScores};
use crate::network::{check_gradients, fuse, load_checkpoint};
use crate::params::NetworkParams;
use crate::tensor::{GradCheckOptions, Tensor};
use crate::train::{train_from, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ignet", version, about = "Infrared/visible image fusion with a graph interaction network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on paired image directories.
    Train(TrainArgs),
    /// Fuse one infrared/visible pair.
    Fuse(FuseArgs),
    /// Fuse every pair in two directories and score the results.
    Eval(EvalArgs),
    /// Finite-difference check of the full network and loss.
    Gradcheck(GradcheckArgs),
    /// Write the default configuration as documented JSON.
    InitConfig(InitConfigArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON configuration; flags below override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ir_dir: PathBuf,
    #[arg(long)]
    pub vis_dir: PathBuf,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub beta: Option<f32>,
    /// Step log as CSV (step,total,mse,edge,ssim,lr).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Print a step line to stdout every this many steps (0 disables).
    #[arg(long)]
    pub log_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub ir: PathBuf,
    #[arg(long)]
    pub vis: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reattach the visible image's chroma and write P6.
    #[arg(long)]
    pub color: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub ir_dir: PathBuf,
    #[arg(long)]
    pub vis_dir: PathBuf,
    /// CSV report path.
    #[arg(long)]
    pub report: PathBuf,
    /// Optional JSON copy of the report.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Side of the square random input pair.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub nodes: usize,
    #[arg(long, default_value_t = 3)]
    pub loops: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    /// Largest accepted relative error per parameter.
    #[arg(long, default_value_t = 1e-2)]
    pub tolerance: f64,
    /// Check at most this many elements of each parameter.
    #[arg(long)]
    pub max_elements: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InitConfigArgs {
    pub path: PathBuf,
    /// Overwrite an existing file.
    #[arg(long)]
    pub force: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => EXIT_FAILURE,
        _ => EXIT_USAGE,
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Fuse(a) => cmd_fuse(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::InitConfig(a) => cmd_init_config(&a.path, a.force, out),
    }
}

fn echo(out: &mut dyn Write, line: std::fmt::Arguments) -> Result<()> {
    out.write_fmt(line)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_init_config(path: &Path, force: bool, out: &mut dyn Write) -> Result<i32> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    let text = FusionConfig::default().to_documented_json()?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    echo(out, format_args!("wrote {}", path.display()))?;
    Ok(EXIT_OK)
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve_train_config(a: &TrainArgs) -> Result<FusionConfig> {
    let mut c = match &a.config {
        Some(p) => FusionConfig::load(p)?,
        None => FusionConfig::default(),
    };
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.epochs {
        c.optim.epochs = v;
    }
    if let Some(v) = a.max_steps {
        c.optim.max_steps = Some(v);
    }
    if let Some(v) = a.lr {
        c.optim.lr = v;
    }
    if let Some(v) = a.batch {
        c.optim.batch = v;
    }
    if let Some(v) = a.crop {
        c.optim.crop = v;
    }
    if let Some(v) = a.stride {
        c.optim.stride = v;
    }
    if let Some(v) = a.alpha {
        c.loss.alpha = v;
    }
    if let Some(v) = a.beta {
        c.loss.beta = v;
    }
    if let Some(v) = a.log_every {
        c.optim.log_every = v;
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let config = resolve_train_config(a)?;
    let listing = pair_directory(&a.ir_dir, &a.vis_dir)?;
    echo(out, format_args!("training on {} pairs", listing.pairs.len()))?;
    let params = NetworkParams::init(&config, config.seed)?;
    let options = TrainOptions {
        checkpoint: Some(a.out.clone()),
        log_csv: a.log.clone(),
        echo_stdout: config.optim.log_every > 0,
    };
    let (_, log) = train_from(params, &listing.pairs, &config, &options)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        echo(
            out,
            format_args!(
                "{} steps, loss {} -> {}, {:.1}s",
                log.records().len(),
                first.total,
                last.total,
                log.wall_time_secs
            ),
        )?;
    }
    echo(out, format_args!("wrote {}", a.out.display()))?;
    Ok(EXIT_OK)
}

fn cmd_fuse(a: &FuseArgs, out: &mut dyn Write) -> Result<i32> {
    let (params, config) = load_checkpoint(&a.checkpoint)?;
    let (ir, _) = read_luma(&a.ir)?;
    let (vis, vis_rgb) = read_luma(&a.vis)?;
    if ir.shape() != vis.shape() {
        return Err(Error::Dataset(format!(
            "{} is {}x{} but {} is {}x{}",
            a.ir.display(),
            ir.shape()[2],
            ir.shape()[3],
            a.vis.display(),
            vis.shape()[2],
            vis.shape()[3]
        )));
    }
    let fused = fuse(&params, &config, &ir, &vis)?;
    if a.color {
        let rgb = match vis_rgb {
            Some(rgb) => rgb,
            None => gray_to_rgb(&vis)?,
        };
        write_ppm(&replace_luma(&rgb, &fused)?, &a.out)?;
    } else {
        write_pgm(&fused, &a.out)?;
    }
    echo(out, format_args!("wrote {}", a.out.display()))?;
    Ok(EXIT_OK)
}

fn gray_to_rgb(luma: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = luma.dims4("gray_to_rgb")?;
    let plane = h * w;
    let mut data = Vec::with_capacity(n * 3 * plane);
    for img in luma.data().chunks_exact(plane) {
        for _ in 0..3 {
            data.extend_from_slice(img);
        }
    }
    Tensor::new([n, 3, h, w], data)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let (params, config) = load_checkpoint(&a.checkpoint)?;
    let listing = pair_directory(&a.ir_dir, &a.vis_dir)?;
    let mut rows = Vec::with_capacity(listing.pairs.len());
    for pair in &listing.pairs {
        let fused = fuse(&params, &config, &pair.infrared, &pair.visible_luma)?;
        let scores = metrics::evaluate(&pair.infrared, &pair.visible_luma, &fused)?;
        rows.push(PairScores {
            pair_id: pair.id.clone(),
            scores,
        });
    }
    let report = MetricReport::new(rows);
    fs::write(&a.report, report.to_csv()).map_err(|e| Error::io(&a.report, e))?;
    if let Some(path) = &a.json {
        fs::write(path, report.to_json()?).map_err(|e| Error::io(path, e))?;
    }
    let m = &report.mean;
    echo(
        out,
        format_args!(
            "{} pairs, mean EN {:.4} AG {:.4} CC {:.4} SCD {:.4} Qabf {:.4} SSIM {:.4}",
            report.pairs.len(),
            m.en,
            m.ag,
            m.cc,
            m.scd,
            m.qabf,
            m.ssim
        ),
    )?;
    echo(out, format_args!("wrote {}", a.report.display()))?;
    Ok(EXIT_OK)
}

/// Small network and random input pair used by `gradcheck`.
pub fn gradcheck_setup(a: &GradcheckArgs) -> Result<(FusionConfig, NetworkParams, Tensor, Tensor)> {
    if a.size < 2 {
        return Err(Error::invalid("gradcheck", "--size must be at least 2"));
    }
    let config = FusionConfig {
        channels: a.channels,
        node_channels: a.channels,
        reduction: if a.channels % 4 == 0 { 4 } else { 1 },
        nodes: a.nodes,
        loops: a.loops,
        seed: a.seed,
        ..Default::default()
    };
    config.validate()?;
    let mut params = NetworkParams::init(&config, a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ 0x9e37_79b9_7f4a_7c15);
    // zero biases leave dead regions exactly on the relu kink, where central
    // differences and the one-sided derivative disagree
    for (name, t) in params.iter_mut() {
        if name.ends_with(".bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let shape = [1, 1, a.size, a.size];
    let ir = Tensor::from_fn(shape, |_| rng.random::<f32>());
    let vis = Tensor::from_fn(shape, |_| rng.random::<f32>());
    Ok((config, params, ir, vis))
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    if !(a.epsilon > 0.0 && a.epsilon <= 1e-2) {
        return Err(Error::invalid("gradcheck", "--epsilon must be in (0, 1e-2]"));
    }
    let (config, params, ir, vis) = gradcheck_setup(a)?;
    echo(
        out,
        format_args!(
            "gradcheck {0}x{0}, C={1}, N={2}, L={3}, {4} parameters, epsilon {5:e}",
            a.size,
            config.channels,
            config.nodes,
            config.loops,
            params.count(),
            a.epsilon
        ),
    )?;
    let opts = GradCheckOptions {
        epsilon: a.epsilon,
        max_elements_per_input: a.max_elements,
        ..Default::default()
    };
    let checks = check_gradients(&params, &config, &ir, &vis, opts)?;
    let width = checks.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    let mut offenders = Vec::new();
    let mut worst = 0.0f64;
    for (name, c) in &checks {
        let flag = if c.relative_error < a.tolerance { "ok" } else { "FAIL" };
        echo(
            out,
            format_args!(
                "{name:width$}  rel {:.3e}  abs {:.3e}  ({} checked)  {flag}",
                c.relative_error, c.absolute_error, c.checked
            ),
        )?;
        worst = worst.max(c.relative_error);
        if c.relative_error >= a.tolerance {
            offenders.push(name.as_str());
        }
    }
    echo(out, format_args!("max relative error {worst:.3e} (tolerance {:e})", a.tolerance))?;
    if offenders.is_empty() {
        Ok(EXIT_OK)
    } else {
        echo(out, format_args!("FAILED: {}", offenders.join(", ")))?;
        Ok(EXIT_FAILURE)
    }
}
