//! Command-line entry point: training, descriptor extraction, both
//! evaluation protocols, throughput measurement, and toy-corpus generation.
//!
//! Standard output carries only machine-parseable results (the summary
//! scalar of an eval command, CSV reports); all diagnostics go to standard
//! error. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use patchdesc::checkpoint::{checkpoint_file_hash, load_checkpoint};
use patchdesc::data;
use patchdesc::descfile::DescriptorFile;
use patchdesc::error::{Error, Result};
use patchdesc::eval;
use patchdesc::model::{describe, NetworkParams};
use patchdesc::tensor::Tensor;
use patchdesc::toy::{make_toy_corpus, ToyCorpusSpec};
use patchdesc::trainer;

#[derive(Parser)]
#[command(name = "patchdesc", version, about = "Local patch descriptor toolkit")]
struct Cli {
    /// Pin all computation to one thread. Results are identical either
    /// way; this fixes scheduling for reproducibility audits.
    #[arg(long, global = true)]
    single_thread: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a descriptor network from a key = value config file.
    Train {
        /// Path to the training configuration.
        config: PathBuf,
    },
    /// Compute descriptors for every patch of a corpus directory.
    Extract(ExtractArgs),
    /// Pair-classification protocol: prints FPR at 95% TPR.
    EvalRoc(EvalRocArgs),
    /// Nearest-neighbour matching protocol: prints average precision.
    EvalMatch(EvalMatchArgs),
    /// Descriptor extraction throughput, reported per batch size as CSV.
    Bench(BenchArgs),
    /// Generate a synthetic corpus in the sheet directory layout.
    MakeToy(MakeToyArgs),
}

#[derive(Args)]
struct ExtractArgs {
    /// Trained checkpoint to extract with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory (sheets + info.txt).
    #[arg(long)]
    data: PathBuf,
    /// Output descriptor file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Also print the descriptors as text to standard output.
    #[arg(long)]
    dump: bool,
}

#[derive(Args)]
struct EvalRocArgs {
    /// Precomputed descriptor file; alternative to --checkpoint/--data.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    descriptors: Option<PathBuf>,
    /// Checkpoint to extract with when no descriptor file is given.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    /// Corpus directory the pair list refers into.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Labeled pair list.
    #[arg(long)]
    pairs: PathBuf,
    /// Where to write the full ROC curve.
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
}

#[derive(Args)]
struct EvalMatchArgs {
    /// Descriptor file of the left image's patches.
    #[arg(long)]
    left: PathBuf,
    /// Descriptor file of the right image's patches.
    #[arg(long)]
    right: PathBuf,
    /// Overlap ground truth (rows: left_index right_index overlap_error).
    #[arg(long)]
    gt: PathBuf,
    /// Where to write the precision-recall curve.
    #[arg(long)]
    out_csv: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of patches to time.
    #[arg(long, default_value_t = 1024)]
    count: usize,
    /// Comma-separated batch sizes to report.
    #[arg(long, value_delimiter = ',', default_value = "1,16,128")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct MakeToyArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    points: usize,
    #[arg(long)]
    patches_per_point: usize,
    #[arg(long, default_value_t = 4.0)]
    translate_px: f64,
    #[arg(long, default_value_t = 20.0)]
    rotate_deg: f64,
    #[arg(long, default_value_t = 0.3)]
    brightness: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.single_thread {
        patchdesc::force_single_thread();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config } => cmd_train(&config),
        Command::Extract(args) => cmd_extract(&args),
        Command::EvalRoc(args) => cmd_eval_roc(&args),
        Command::EvalMatch(args) => cmd_eval_match(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::MakeToy(args) => cmd_make_toy(&args),
    }
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let cfg = trainer::parse_config(config_path)?;
    let corpus = trainer::load_corpus(&cfg)?;
    eprintln!(
        "training loss={} on {} patches ({} points), {} epochs x {} examples",
        cfg.loss,
        corpus.len(),
        corpus.point_count(),
        cfg.epochs,
        cfg.examples_per_epoch()
    );
    let logs = trainer::run_training(&cfg, &corpus)?;
    for log in &logs {
        match log.val_fpr95 {
            Some(v) => eprintln!(
                "epoch {:>4}  loss {:.6}  {:.1}s  val_fpr95 {:.4}",
                log.epoch, log.mean_loss, log.seconds, v
            ),
            None => eprintln!(
                "epoch {:>4}  loss {:.6}  {:.1}s",
                log.epoch, log.mean_loss, log.seconds
            ),
        }
    }
    Ok(())
}

/// Loads a checkpoint and produces the descriptor table of a corpus
/// directory, rows in patch-index order.
fn extract_descriptor_file(
    ckpt_path: &Path,
    data_dir: &Path,
    batch_size: usize,
) -> Result<DescriptorFile> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let hash = checkpoint_file_hash(ckpt_path)?;
    let corpus = data::load_phototour(data_dir)?;
    let mut file = DescriptorFile::new(ckpt.params.config.descriptor_dim, hash)?;
    if corpus.is_empty() {
        return Ok(file);
    }
    let indices: Vec<usize> = (0..corpus.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = corpus.normalized_batch(chunk)?;
        file.push_batch(&describe(&ckpt.params, &batch)?)?;
    }
    Ok(file)
}

fn cmd_extract(args: &ExtractArgs) -> Result<()> {
    let file = extract_descriptor_file(&args.checkpoint, &args.data, args.batch_size)?;
    file.write(&args.out)?;
    eprintln!(
        "wrote {} descriptors of dim {} to {}",
        file.count(),
        file.dim(),
        args.out.display()
    );
    if args.dump {
        print!("{}", file.dump_text());
    }
    Ok(())
}

fn cmd_eval_roc(args: &EvalRocArgs) -> Result<()> {
    let descs = match (&args.descriptors, &args.checkpoint, &args.data) {
        (Some(path), None, _) => DescriptorFile::read(path)?,
        (None, Some(ckpt), Some(dir)) => extract_descriptor_file(ckpt, dir, args.batch_size)?,
        _ => {
            return Err(Error::invalid(
                "eval-roc",
                "give --descriptors, or --checkpoint with --data",
            ))
        }
    };
    let pairs = data::load_pairs_file(&args.pairs, descs.count())?;
    let scored: Vec<eval::ScoredPair> = pairs
        .iter()
        .map(|p| {
            eval::ScoredPair::new(
                patchdesc::ops::l2_distance_slice(descs.row(p.left), descs.row(p.right)) as f64,
                p.label,
            )
        })
        .collect::<Result<_>>()?;
    let curve = eval::roc_curve(&scored)?;
    std::fs::write(
        &args.out_csv,
        curve.to_csv(&format!("pairs={}", args.pairs.display())),
    )
    .map_err(|e| Error::io(&args.out_csv, e))?;
    println!("{}", curve.summary);
    Ok(())
}

fn cmd_eval_match(args: &EvalMatchArgs) -> Result<()> {
    let left = DescriptorFile::read(&args.left)?;
    let right = DescriptorFile::read(&args.right)?;
    if left.dim() != right.dim() {
        return Err(Error::shape(
            "eval-match",
            "descriptor dim",
            left.dim(),
            right.dim(),
        ));
    }
    let gt = eval::load_overlap_gt(&args.gt, Some((left.count(), right.count())))?;
    if gt.rejected_rows > 0 || gt.duplicate_rows > 0 {
        eprintln!(
            "ground truth: {} rows rejected (overlap >= 0.5), {} duplicates collapsed",
            gt.rejected_rows, gt.duplicate_rows
        );
    }
    let matches = eval::nn_match(&left.to_tensor()?, &right.to_tensor()?)?;
    let curve = eval::pr_curve(&matches, &gt)?;
    std::fs::write(
        &args.out_csv,
        curve.to_csv("recall_denominator=left_patches_with_gt matching=left_to_right_nn"),
    )
    .map_err(|e| Error::io(&args.out_csv, e))?;
    println!("{}", curve.summary);
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    if args.count < 1 {
        return Err(Error::invalid("bench", "count must be >= 1"));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let params: &NetworkParams<f32> = &ckpt.params;
    let patches = random_normalized_patches(args.count, args.seed)?;

    println!("# patchdesc {} bench count={}", patchdesc::VERSION, args.count);
    println!("batch_size,mean_us,descriptors_per_sec");
    for &batch_size in &args.batch_sizes {
        if batch_size < 1 {
            return Err(Error::invalid("bench", "batch sizes must be >= 1"));
        }
        // Warm-up pass outside the timed region.
        let warm = slice_batch(&patches, 0, batch_size.min(args.count))?;
        describe(params, &warm)?;

        let start = Instant::now();
        let mut done = 0;
        while done < args.count {
            let take = batch_size.min(args.count - done);
            let batch = slice_batch(&patches, done, take)?;
            describe(params, &batch)?;
            done += take;
        }
        let elapsed = start.elapsed().as_secs_f64();
        let mean_us = elapsed * 1e6 / args.count as f64;
        println!("{batch_size},{mean_us:.3},{:.1}", 1e6 / mean_us);
    }
    Ok(())
}

/// `count` random patches, each put through the standard normalization.
fn random_normalized_patches(count: usize, seed: u64) -> Result<Tensor<f32>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let side = data::INPUT_SIZE;
    let mut out = Vec::with_capacity(count * side * side);
    for _ in 0..count {
        let raw = Tensor::from_fn(&[1, data::PATCH_SIZE, data::PATCH_SIZE], |_| {
            rng.gen_range(0.0f32..1.0)
        });
        out.extend_from_slice(data::normalize_patch(&raw)?.data());
    }
    Tensor::from_vec(&[count, 1, side, side], out)
}

fn slice_batch(patches: &Tensor<f32>, start: usize, len: usize) -> Result<Tensor<f32>> {
    let side = data::INPUT_SIZE;
    let per = side * side;
    Tensor::from_vec(
        &[len, 1, side, side],
        patches.data()[start * per..(start + len) * per].to_vec(),
    )
}

fn cmd_make_toy(args: &MakeToyArgs) -> Result<()> {
    let spec = ToyCorpusSpec {
        num_points: args.points,
        patches_per_point: args.patches_per_point,
        translate_px: args.translate_px,
        rotate_deg: args.rotate_deg,
        brightness: args.brightness,
        seed: args.seed,
    };
    let corpus = make_toy_corpus(&spec)?;
    data::write_corpus_sheets(&corpus, &args.out)?;
    eprintln!(
        "wrote {} patches ({} points x {}) to {}",
        corpus.len(),
        spec.num_points,
        spec.patches_per_point,
        args.out.display()
    );
    Ok(())
}
