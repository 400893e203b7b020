//! `msvox`: voxelize, train, encode, decode, benchmark and inspect.
//!
//! Exit codes: 0 success, 1 error, 2 usage error, 3 the bundle does not
//! match the bitstream's fingerprint.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use msvox_core::codec::{
    decode_evals_per_block, decode_pc, encode_pc, per_voxel_evals_per_block,
    static_baseline_encode, Bitstream, CodecOptions, RateReport, HEADER_BYTES,
};
use msvox_core::models::{load_bundle, save_bundle, train, ModelBundle};
use msvox_core::pc_io::{
    parse_ply, parse_ply_vertices, read_block_dir, synth_blocks, voxelize, write_ply, PlyOptions,
    PointCloud, ShapeKind, SynthSpec,
};

use config::{resolve, Overrides};

const EXIT_ERROR: u8 = 1;
const EXIT_FINGERPRINT: u8 = 3;

/// Learning rate when training on synthetic blocks and none is given.
const SYNTHETIC_LR: f32 = 1e-3;

#[derive(Parser)]
#[command(
    name = "msvox",
    version,
    about = "Lossless multiscale voxel geometry codec"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a real-valued PLY onto a 2^n grid.
    Voxelize(VoxelizeArgs),
    /// Train a model bundle on 64³ blocks (or the configured block edge).
    Train(TrainArgs),
    /// Compress a voxelized PLY.
    Encode(EncodeArgs),
    /// Decompress to a voxelized PLY.
    Decode(DecodeArgs),
    /// Encode and decode with timing and network-evaluation counts.
    Bench(BenchArgs),
    /// Describe a compressed file.
    Stats(StatsArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportFormat {
    Kv,
    Table,
}

#[derive(Args)]
struct VoxelizeArgs {
    input: PathBuf,
    /// Grid precision in bits per coordinate.
    #[arg(short = 'n', long)]
    precision: u8,
    #[arg(short, long)]
    output: PathBuf,
    /// Rescale even when the input already holds integers that fit the grid.
    #[arg(long)]
    rescale: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Train on generated blocks of this shape family.
    #[arg(long, value_name = "KIND", conflicts_with = "data_dir")]
    synthetic: Option<ShapeKind>,
    /// Number of synthetic blocks.
    #[arg(long, default_value_t = 64, requires = "synthetic")]
    count: usize,
    /// Directory of `.blk` block files.
    #[arg(long, required_unless_present = "synthetic")]
    data_dir: Option<PathBuf>,
    /// `key=value` settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture preset: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    base_edge: Option<usize>,
    #[arg(long)]
    num_scales: Option<usize>,
    /// Learning rate [default: 1e-5, or 1e-3 with --synthetic].
    #[arg(long)]
    lr: Option<f32>,
    /// [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size for 64³ levels [default: 32].
    #[arg(long)]
    batch_full: Option<usize>,
    /// Mini-batch size for smaller levels [default: 64].
    #[arg(long)]
    batch_other: Option<usize>,
    /// Seeds initialization, shuffling and synthetic data [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on samples per model and epoch.
    #[arg(long)]
    max_samples: Option<usize>,
    /// Initialize output biases at the data's occupancy log-odds.
    #[arg(long)]
    prior_bias: bool,
    #[arg(short, long)]
    out: PathBuf,
    /// Write per-epoch losses (bits/voxel) here.
    #[arg(long)]
    loss_curve: Option<PathBuf>,
}

#[derive(Args)]
struct CodecArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Do not code voxels whose coarser parent is empty.
    #[arg(long)]
    prune_empty_parents: bool,
    #[arg(long, value_enum, default_value_t = ReportFormat::Kv)]
    report: ReportFormat,
}

#[derive(Args)]
struct EncodeArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Grid precision; overrides the file's comment and inference.
    #[arg(long)]
    precision: Option<u8>,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Args)]
struct DecodeArgs {
    input: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    input: PathBuf,
    #[arg(long)]
    precision: Option<u8>,
    /// Add a row for the static per-block Bernoulli coder.
    #[arg(long)]
    baseline: bool,
    #[command(flatten)]
    codec: CodecArgs,
}

#[derive(Args)]
struct StatsArgs {
    input: PathBuf,
    /// Decode with this bundle to also report points and bits per point.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Voxelize(a) => cmd_voxelize(a),
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let mismatch = matches!(
                e.downcast_ref::<msvox_core::Error>(),
                Some(msvox_core::Error::FingerprintMismatch { .. })
            );
            ExitCode::from(if mismatch {
                EXIT_FINGERPRINT
            } else {
                EXIT_ERROR
            })
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_cloud(path: &Path, precision: Option<u8>) -> Result<PointCloud> {
    parse_ply(&read(path)?, &PlyOptions { precision })
        .with_context(|| format!("parsing {}", path.display()))
}

fn load(path: &Path) -> Result<ModelBundle> {
    load_bundle(path).with_context(|| format!("loading bundle {}", path.display()))
}

fn print_report(report: &RateReport, format: ReportFormat) {
    match format {
        ReportFormat::Kv => print!("{}", report.to_kv()),
        ReportFormat::Table => print!("{}", report.to_table()),
    }
}

fn cmd_voxelize(a: VoxelizeArgs) -> Result<()> {
    let bytes = read(&a.input)?;
    // Integer input that already fits the grid is passed through untouched.
    let direct = if a.rescale {
        None
    } else {
        parse_ply(
            &bytes,
            &PlyOptions {
                precision: Some(a.precision),
            },
        )
        .ok()
    };
    let pc = match direct {
        Some(pc) => pc,
        None => {
            let verts = parse_ply_vertices(&bytes)
                .with_context(|| format!("parsing {}", a.input.display()))?;
            voxelize(&verts.points, a.precision)?
        }
    };
    write(&a.output, &write_ply(&pc))?;
    println!(
        "points={}\nprecision_bits={}",
        pc.len(),
        pc.precision_bits()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let flags = Overrides {
        preset: a.preset.clone(),
        base_edge: a.base_edge,
        num_scales: a.num_scales,
        lr: a.lr,
        epochs: a.epochs,
        batch_full: a.batch_full,
        batch_other: a.batch_other,
        seed: a.seed,
        max_samples: a.max_samples,
        prior_bias: a.prior_bias,
    };
    let default_lr = if a.synthetic.is_some() {
        SYNTHETIC_LR
    } else {
        msvox_core::models::TrainConfig::default().lr
    };
    let cfg = resolve(a.config.as_deref(), &flags, default_lr)?;
    let edge = cfg.codec.block_edge();

    let (blocks, source) = match (a.synthetic, &a.data_dir) {
        (Some(kind), _) => {
            let spec = SynthSpec::new(kind, edge, cfg.train.seed, a.count);
            (
                synth_blocks(&spec)?,
                format!("synthetic:{}:{}", kind.as_str(), a.count),
            )
        }
        (None, Some(dir)) => (
            read_block_dir(dir)
                .with_context(|| format!("reading blocks from {}", dir.display()))?,
            format!("dir:{}", dir.display()),
        ),
        (None, None) => bail!("either --synthetic or --data-dir is required"),
    };
    log::info!(
        "training on {} blocks of {edge}³ ({source}), lr {}, {} epochs",
        blocks.len(),
        cfg.train.lr,
        cfg.train.epochs
    );

    let bundle = ModelBundle::new_random(cfg.arch, cfg.codec, cfg.train.seed)?;
    let (mut bundle, curve) = train(bundle, &cfg.train, &blocks)?;
    bundle.meta.insert("train.data".into(), source);
    save_bundle(&bundle, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.loss_curve {
        write(path, curve.to_text().as_bytes())?;
    }
    println!(
        "models={}\nparams={}\nfinal_loss_bits={:.6}\nlr={}\nepochs={}\nfingerprint={:016x}",
        bundle.model_count(),
        bundle.param_count(),
        curve.final_loss(),
        cfg.train.lr,
        cfg.train.epochs,
        bundle.fingerprint()
    );
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let pc = read_cloud(&a.input, a.precision)?;
    let bundle = load(&a.codec.bundle)?;
    let opts = CodecOptions {
        prune_empty_parents: a.codec.prune_empty_parents,
        record_schedule: false,
    };
    let enc = encode_pc(&pc, &bundle, &opts)?;
    write(&a.output, &enc.bytes)?;
    print_report(&enc.report, a.codec.report);
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let bytes = read(&a.input)?;
    let bundle = load(&a.bundle)?;
    let dec = decode_pc(&bytes, &bundle, &CodecOptions::default())?;
    write(&a.output, &write_ply(&dec.cloud))?;
    println!(
        "points={}\nblocks={}\nprecision_bits={}",
        dec.cloud.len(),
        dec.report.blocks,
        dec.cloud.precision_bits()
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let pc = read_cloud(&a.input, a.precision)?;
    let bundle = load(&a.codec.bundle)?;
    let opts = CodecOptions {
        prune_empty_parents: a.codec.prune_empty_parents,
        record_schedule: false,
    };
    let t = Instant::now();
    let enc = encode_pc(&pc, &bundle, &opts)?;
    let encode_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let dec = decode_pc(&enc.bytes, &bundle, &opts)?;
    let decode_secs = t.elapsed().as_secs_f64();
    if dec.cloud != pc {
        bail!("decoded cloud differs from the input");
    }

    let blocks = dec.report.blocks as u64;
    let per_block = decode_evals_per_block(&bundle.codec);
    let per_voxel = per_voxel_evals_per_block(&bundle.codec);
    let mut out = String::new();
    let _ = writeln!(out, "encode_secs={encode_secs:.3}");
    let _ = writeln!(out, "decode_secs={decode_secs:.3}");
    let _ = writeln!(out, "decode_evals={}", dec.report.evals.total());
    let _ = writeln!(out, "decode_evals_per_block={per_block}");
    let _ = writeln!(out, "per_voxel_evals={}", per_voxel * blocks);
    let _ = writeln!(out, "per_voxel_evals_per_block={per_voxel}");
    let _ = writeln!(out, "eval_ratio={:.2}", per_voxel as f64 / per_block as f64);
    if a.baseline {
        let base = static_baseline_encode(&pc, bundle.codec.block_bits())?;
        let _ = writeln!(out, "baseline.total_bits={}", base.total_bits());
        let _ = writeln!(out, "baseline.bpov={:.6}", base.bpov());
        let _ = writeln!(out, "baseline.ratio={:.6}", enc.report.bpov() / base.bpov());
    }
    match a.codec.report {
        ReportFormat::Kv => {
            print!("{}", enc.report.to_kv());
            print!("{out}");
        }
        ReportFormat::Table => {
            print!("{}", enc.report.to_table());
            for line in out.lines() {
                let (k, v) = line.split_once('=').unwrap_or((line, ""));
                println!("{k:<28}{v:>14}");
            }
        }
    }
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let bytes = read(&a.input)?;
    let stream =
        Bitstream::from_bytes(&bytes).with_context(|| format!("parsing {}", a.input.display()))?;
    let h = stream.header;
    let [header, octree, payload] = stream.segment_bytes();
    let total = bytes.len();
    println!("version={}", h.version);
    println!("flags={}", h.flags);
    println!("prune_empty_parents={}", h.prune_empty_parents());
    println!("precision_bits={}", h.precision_bits);
    println!("base_edge={}", h.base_edge);
    println!("num_scales={}", h.num_scales);
    println!("fingerprint={:016x}", h.fingerprint);
    println!("header_bytes={header}");
    println!("octree_bytes={octree}");
    println!("payload_bytes={payload}");
    println!("file_bytes={total}");
    println!("octree_percent={:.4}", 100.0 * octree as f64 / total as f64);
    debug_assert_eq!(header, HEADER_BYTES);
    if let Some(path) = &a.bundle {
        let bundle = load(path)?;
        let dec = decode_pc(&bytes, &bundle, &CodecOptions::default())?;
        println!("blocks={}", dec.report.blocks);
        println!("occupied_voxels={}", dec.cloud.len());
        println!("bpov={:.6}", 8.0 * total as f64 / dec.cloud.len() as f64);
    }
    Ok(())
}
