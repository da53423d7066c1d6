//! `semlink`: train, transmit, sweep, codec round trips and LDPC benchmarks.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use semlink_core::channel::{ChannelConfig, ChannelKind};
use semlink_core::codec::{self, Quality};
use semlink_core::data::{load_ppm_dir, procedural_corpus};
use semlink_core::experiment::{self, ExperimentConfig, Mode};
use semlink_core::fec::{self, ShippedCode};
use semlink_core::image::Image;
use semlink_core::metrics::{ms_ssim, psnr};
use semlink_core::model::{Model, ModelConfig};
use semlink_core::pipeline::{transmit_image, PipelineConfig, StreamMode};
use semlink_core::train::{train_stage, TrainConfig};

#[derive(Parser)]
#[command(name = "semlink", version, about = "Parallel-stream semantic image transmission simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage and write a checkpoint.
    Train(TrainArgs),
    /// Send one image through the link.
    Transmit(TransmitArgs),
    /// Run an SNR / quality sweep from a config file.
    Sweep(SweepArgs),
    /// Compress, decompress or round-trip an image with the DCT codec.
    Codec(CodecArgs),
    /// Frame error rate of the coded QPSK link.
    FecBench(FecArgs),
}

#[derive(Args)]
struct ChannelArgs {
    /// `awgn` or `rayleigh`.
    #[arg(long, default_value = "awgn")]
    channel: ChannelKind,
    /// Symbols per fading block (Rayleigh); one LDPC frame or the whole semantic payload when absent.
    #[arg(long)]
    block_len: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stage: Option<u8>,
    #[arg(long)]
    steps: Option<usize>,
    /// Checkpoint of the previous stage; required for stages 2 and 3.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Directory of PPM training images; procedural images otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Procedural corpus size.
    #[arg(long, default_value_t = 32)]
    images: usize,
    /// Procedural image side.
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Per-step loss log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    channel: Option<ChannelKind>,
    /// Training SNR set in dB, comma separated.
    #[arg(long, value_delimiter = ',')]
    snr_db: Option<Vec<f64>>,
}

#[derive(Args)]
struct TransmitArgs {
    /// Input PPM image.
    #[arg(long)]
    input: PathBuf,
    /// Reconstructed PPM image (of the first trial).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Model checkpoint; without one only the image stream is used.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Send the semantic features at full dimension.
    #[arg(long)]
    full_dim: bool,
    #[command(flatten)]
    link: ChannelArgs,
    #[arg(long, default_value_t = 10.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent transmissions, seeded `seed`, `seed + 1`, ...
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 50)]
    quality: u32,
    /// `desk`, `full` or a shift-table file.
    #[arg(long, default_value = "desk")]
    code: String,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the output CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Overrides the plot-data directory.
    #[arg(long)]
    plot_dir: Option<PathBuf>,
    #[arg(long)]
    channel: Option<ChannelKind>,
    /// Overrides the SNR axis, comma separated.
    #[arg(long, value_delimiter = ',')]
    snr_db: Option<Vec<f64>>,
    /// Overrides the first trial seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the trials per point.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Args)]
struct CodecArgs {
    #[command(subcommand)]
    op: CodecOp,
}

#[derive(Subcommand)]
enum CodecOp {
    /// PPM to bitstream.
    Encode {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 50)]
        quality: u32,
    },
    /// Bitstream to PPM.
    Decode { input: PathBuf, output: PathBuf },
    /// Compress and decompress, reporting size and distortion.
    Roundtrip {
        input: PathBuf,
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        quality: u32,
    },
}

#[derive(Args)]
struct FecArgs {
    #[arg(long, default_value = "desk")]
    code: String,
    #[arg(long, default_value = "awgn")]
    channel: ChannelKind,
    /// SNR points in dB, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 4.0, 6.0])]
    snr_db: Vec<f64>,
    /// Frames per SNR point.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = fec::DEFAULT_MAX_ITER)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Transmit(a) => transmit(a),
        Command::Sweep(a) => sweep(a),
        Command::Codec(a) => codec_cmd(a.op),
        Command::FecBench(a) => fec_bench(a),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => experiment::read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.stage {
        cfg.stage = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.channel {
        cfg.channel = v;
    }
    if let Some(v) = a.snr_db {
        cfg.snr_db = v;
    }
    let (mut model, finished) = match &a.resume {
        Some(p) => Model::load(p)?,
        None => (Model::new(ModelConfig::default(), cfg.seed)?, 0),
    };
    let images = match &a.data {
        Some(dir) => load_ppm_dir(dir)?,
        None => procedural_corpus(a.images, a.size, cfg.seed.wrapping_add(1)),
    };
    let start = Instant::now();
    let report = train_stage(&mut model, finished, &images, &cfg, None)?;
    model.save(&a.out, cfg.stage)?;
    if let Some(p) = &a.log {
        std::fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    let last = report.log.last().map_or(f64::NAN, |l| l.loss);
    println!(
        "stage {} | {} steps in {:.1} s | final loss {last:.2} | reduction {:.1}% | checkpoint {}",
        cfg.stage,
        report.log.len(),
        start.elapsed().as_secs_f64(),
        100.0 * report.loss_reduction(5),
        a.out.display()
    );
    if let Some((before, after)) = report.frozen_checksum {
        println!("frozen parameters {}", if before == after { "unchanged" } else { "CHANGED" });
    }
    Ok(())
}

fn transmit(a: TransmitArgs) -> Result<()> {
    if a.trials == 0 {
        bail!("--trials must be positive");
    }
    let img = Image::load(&a.input)?;
    let model = a.model.as_ref().map(Model::load).transpose()?.map(|(m, _)| m);
    let mut channel = ChannelConfig::new(a.link.channel, a.snr_db, a.seed);
    channel.block_len = a.link.block_len;
    let cfg = PipelineConfig {
        quality: Quality::new(a.quality)?,
        code: fec::load_code(&a.code)?,
        channel,
        mode: if model.is_some() { StreamMode::Parallel } else { StreamMode::ConventionalOnly },
        rate_adapt: !a.full_dim,
        max_iter: fec::DEFAULT_MAX_ITER,
    };
    println!("trial,seed,cbr,psnr_db,ms_ssim,corrupted,image_symbols,semantic_symbols,side_symbols");
    for t in 0..a.trials {
        let seed = a.seed + t as u64;
        let out = transmit_image(model.as_ref(), &img, &cfg, seed)?;
        let f = &out.frame;
        println!(
            "{t},{seed},{:.6},{:.4},{:.6},{},{},{},{}",
            f.cbr(),
            psnr(&img, &out.x_hat)?,
            ms_ssim(&img, &out.x_hat)?,
            out.corrupted,
            f.m,
            f.semantic_symbols,
            f.side_symbols
        );
        if t == 0 {
            if let Some(p) = &a.output {
                out.x_hat.save(p)?;
            }
        }
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = experiment::read_config(&a.config)?;
    if let Some(v) = a.csv {
        cfg.output.csv = v;
    }
    if let Some(v) = a.plot_dir {
        cfg.output.plot_dir = Some(v);
    }
    if let Some(v) = a.channel {
        cfg.channel.kind = v;
    }
    if let Some(v) = a.snr_db {
        cfg.sweep.snr_db = experiment::Axis::List(v);
    }
    if let Some(v) = a.seed {
        cfg.sweep.seed_base = v;
    }
    if let Some(v) = a.trials {
        cfg.sweep.seeds = v;
    }
    let start = Instant::now();
    let rows = experiment::run_experiment(&cfg)?;
    let mode = match cfg.pipeline.mode {
        Mode::Parallel => "parallel",
        Mode::Conventional => "image stream only",
    };
    println!(
        "{} rows ({mode}) in {:.1} s -> {}",
        rows.len(),
        start.elapsed().as_secs_f64(),
        cfg.output.csv.display()
    );
    Ok(())
}

fn read_bytes(p: &Path) -> Result<Vec<u8>> {
    std::fs::read(p).with_context(|| format!("reading {}", p.display()))
}

fn codec_cmd(op: CodecOp) -> Result<()> {
    match op {
        CodecOp::Encode { input, output, quality } => {
            let img = Image::load(&input)?;
            let bs = codec::compress(&img, Quality::new(quality)?)?;
            std::fs::write(&output, bs.to_bytes()).with_context(|| format!("writing {}", output.display()))?;
            println!("{} bytes, {:.4} bpp", bs.len_bytes(), bits_per_pixel(bs.len_bytes(), &img));
        }
        CodecOp::Decode { input, output } => {
            let img = codec::decompress(&read_bytes(&input)?)?;
            img.save(&output)?;
            println!("{}x{}x{}", img.width(), img.height(), img.channels());
        }
        CodecOp::Roundtrip { input, output, quality } => {
            let img = Image::load(&input)?;
            let (bs, back) = codec::round_trip(&img, Quality::new(quality)?)?;
            println!(
                "{} bytes, {:.4} bpp, PSNR {:.4} dB, MS-SSIM {:.6}",
                bs.len_bytes(),
                bits_per_pixel(bs.len_bytes(), &img),
                psnr(&img, &back)?,
                ms_ssim(&img, &back)?
            );
            if let Some(p) = output {
                back.save(&p)?;
            }
        }
    }
    Ok(())
}

fn bits_per_pixel(bytes: usize, img: &Image) -> f64 {
    8.0 * bytes as f64 / (img.width() * img.height()) as f64
}

fn fec_bench(a: FecArgs) -> Result<()> {
    if a.trials == 0 {
        bail!("--trials must be positive");
    }
    let h = match a.code.as_str() {
        "desk" => ShippedCode::Desk.build(),
        other => fec::load_code(other)?,
    };
    println!("# n={} k={} rate={:.4} channel={}", h.n(), h.k(), h.rate(), a.channel);
    println!("snr_db,frames,fer,ber,unconverged,mean_iterations,seconds");
    for &snr in &a.snr_db {
        let start = Instant::now();
        let p = fec::frame_error_rate(&h, a.channel, snr, a.trials, a.max_iter, a.seed)?;
        println!(
            "{snr},{},{:.6},{:.3e},{},{:.2},{:.2}",
            p.frames,
            p.fer(),
            p.ber(h.k()),
            p.unconverged,
            p.mean_iterations,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
