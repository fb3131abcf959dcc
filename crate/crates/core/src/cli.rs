//! Command-line front end. `run` returns the process exit code:
//! 0 on success, 1 on usage or configuration errors, 2 on runtime errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, BenchConfig, Strategy};
use crate::dataset::{parse_metadata, render_metadata, split_by_patient, synthetic, LabeledSet, SampleRecord, Split, SplitFractions};
use crate::imaging::{classify_exposure, decode_image, intensity_histogram, organize_splits, parallel_preprocess};
use crate::nn::{checkpoint, MicroResNet, MicroResNetConfig};
use crate::parallel;
use crate::trainer::{render_minutes, render_training_log, train_run, Mark, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "gradbench", version, about = "Train and benchmark a small multi-label image classifier")]
struct Cli {
    /// Seed for initialization, shuffling and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker count (data parallel replicas or preprocessing threads).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    workers: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split a labelled image folder by patient and validate every image.
    Preprocess(PreprocessArgs),
    /// Print statistics, exposure class and histogram of images.
    Inspect(InspectArgs),
    /// Train one model and save a checkpoint.
    Train(TrainArgs),
    /// Run the strategy matrix and write report tables.
    Bench(BenchArgs),
    /// Test accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Serve one data parallel replica over stdin and stdout.
    #[command(hide = true)]
    Worker,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Directory holding the images.
    #[arg(long)]
    images: PathBuf,
    /// Metadata CSV (defaults to <images>/metadata.csv).
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Resize target used for validation.
    #[arg(long, default_value_t = 32)]
    side: usize,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Also print an intensity histogram with this many bins.
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Folder with metadata.csv and images (optionally in split folders).
    /// Without it a synthetic set is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic set size.
    #[arg(long, default_value_t = 64)]
    samples: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Apply a named strategy on top of the config.
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma separated strategy keys.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = bench::DEFAULT_THRESHOLD)]
    threshold: f64,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Parse `args` (including the program name) and execute.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                1
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<(), Failure> {
    match &cli.command {
        Command::Preprocess(a) => preprocess(cli, a, out),
        Command::Inspect(a) => inspect(a, out),
        Command::Train(a) => train(cli, a, out),
        Command::Bench(a) => run_bench(cli, a, out),
        Command::Eval(a) => eval(cli, a, out),
        Command::Worker => parallel::serve_worker(std::io::stdin().lock(), out).map_err(runtime),
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    writeln!(out, "{text}").map_err(runtime)
}

fn read_config_text(cli: &Cli) -> Result<Option<String>, Failure> {
    cli.config
        .as_ref()
        .map(|p| fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display()))))
        .transpose()
}

fn train_config(cli: &Cli) -> Result<TrainConfig, Failure> {
    let mut cfg = match read_config_text(cli)? {
        Some(text) => TrainConfig::from_kv_text(&text).map_err(usage)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w as usize;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn read_records(path: &Path) -> Result<Vec<SampleRecord>, Failure> {
    let bytes = fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    parse_metadata(&bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn with_splits(records: Vec<SampleRecord>, seed: u64) -> Result<Vec<SampleRecord>, Failure> {
    if records.iter().all(|r| r.split.is_some()) {
        return Ok(records);
    }
    split_by_patient(records, SplitFractions::default(), seed).map_err(runtime)
}

/// Records of `split` from a data folder, images read from `<dir>/<split>/`
/// when that folder exists and from `<dir>` otherwise.
fn load_split(dir: &Path, split: Split, seed: u64, workers: usize, out: &mut dyn Write) -> Result<LabeledSet, Failure> {
    let records = with_splits(read_records(&dir.join("metadata.csv"))?, seed)?;
    let chosen: Vec<SampleRecord> = records.into_iter().filter(|r| r.split == Some(split)).collect();
    let split_dir = dir.join(split.as_str());
    let image_dir = if split_dir.is_dir() { split_dir } else { dir.to_path_buf() };
    let side = MicroResNetConfig::default().input_side;
    let (set, errors) = LabeledSet::load(&chosen, &image_dir, side, workers).map_err(runtime)?;
    for e in &errors {
        say(out, &format!("skipped {}: {}", chosen[e.index].image_id, e.error))?;
    }
    if set.is_empty() {
        return Err(runtime(format!("no usable {split} images in {}", dir.display())));
    }
    Ok(set)
}

fn preprocess(cli: &Cli, a: &PreprocessArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let seed = cli.seed.unwrap_or(0);
    let meta = a.metadata.clone().unwrap_or_else(|| a.images.join("metadata.csv"));
    let records = with_splits(read_records(&meta)?, seed)?;
    let manifest: Vec<(String, Split)> = records
        .iter()
        .map(|r| (r.image_id.clone(), r.split.expect("assigned above")))
        .collect();
    let report = organize_splits(&a.images, &manifest, &cli.out).map_err(runtime)?;
    crate::fsutil::write_atomic(&cli.out.join("split_report.csv"), report.to_csv().as_bytes()).map_err(runtime)?;
    crate::fsutil::write_atomic(&cli.out.join("metadata.csv"), render_metadata(&records).as_bytes())
        .map_err(runtime)?;
    for (id, split, reason) in &report.failures {
        say(out, &format!("failed to copy {id} ({split}): {reason}"))?;
    }

    let mut bytes = Vec::new();
    let mut names = Vec::new();
    for (id, split) in &manifest {
        if let Ok(b) = fs::read(cli.out.join(split.as_str()).join(id)) {
            bytes.push(b);
            names.push(id.clone());
        }
    }
    let workers = cli.workers.unwrap_or(1) as usize;
    let start = Mark::now();
    let result = parallel_preprocess(&bytes, a.side, workers).map_err(runtime)?;
    let seconds = start.elapsed_seconds();
    for e in &result.errors {
        say(out, &format!("invalid image {}: {}", names[e.index], e.error))?;
    }
    say(out, &report.to_csv())?;
    say(
        out,
        &format!(
            "preprocessed {} of {} images with {workers} worker(s) in {seconds:.3} s",
            result.images.len(),
            bytes.len()
        ),
    )
}

fn inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<(), Failure> {
    say(out, "path,width,height,mean,std,exposure")?;
    for path in &a.images {
        let bytes = fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let img = decode_image(&bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let (mean, std) = img.mean_std();
        say(
            out,
            &format!(
                "{},{},{},{mean:.4},{std:.4},{}",
                path.display(),
                img.width(),
                img.height(),
                classify_exposure(mean, std)
            ),
        )?;
        if let Some(bins) = a.bins {
            let counts = intensity_histogram(&img, bins).map_err(usage)?;
            let text: Vec<String> = counts.iter().map(u64::to_string).collect();
            say(out, &format!("histogram,{}", text.join(" ")))?;
        }
    }
    Ok(())
}

fn training_data(cli: &Cli, data: &DataArgs, seed: u64, out: &mut dyn Write) -> Result<LabeledSet, Failure> {
    let workers = cli.workers.unwrap_or(1) as usize;
    match &data.data {
        Some(dir) => load_split(dir, Split::Train, seed, workers, out),
        None => synthetic::labeled_set(data.samples, MicroResNetConfig::default().input_side, seed).map_err(usage),
    }
}

fn train(cli: &Cli, a: &TrainArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let mut cfg = train_config(cli)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let (model_cfg, name) = match a.strategy {
        Some(s) => {
            let workers = cfg.workers;
            cfg = s.train_config(&cfg);
            if s != Strategy::Baseline {
                cfg.workers = workers;
            }
            (s.model_config(), s.key())
        }
        None => (MicroResNetConfig::default(), "train"),
    };
    let data = training_data(cli, &a.data, cfg.seed, out)?;
    let mut model = MicroResNet::new(model_cfg, cfg.seed).map_err(runtime)?;
    fs::create_dir_all(&cli.out).map_err(runtime)?;
    let start = Mark::now();
    let result = train_run(&cfg, &mut model, &data);
    let seconds = start.elapsed_seconds();
    let (stats, failure) = match result {
        Ok(s) => (s, None),
        Err(aborted) => (aborted.completed, Some(aborted.error)),
    };
    crate::fsutil::write_atomic(&cli.out.join("train_log.csv"), render_training_log(&stats).as_bytes())
        .map_err(runtime)?;
    if !stats.is_empty() {
        bench::emit_loss_curve(
            &stats,
            &cli.out.join(format!("loss_{name}.csv")),
            Some(&cli.out.join(format!("loss_{name}.svg"))),
        )
        .map_err(runtime)?;
    }
    if let Some(e) = failure {
        return Err(runtime(format!("training aborted after {} epoch(s): {e}", stats.len())));
    }
    checkpoint::save(&model, &cli.out.join("model.gtb1")).map_err(runtime)?;
    let last = stats.last().map_or(f64::NAN, |s| s.mean_loss);
    say(
        out,
        &format!(
            "trained {} epoch(s) on {} images in {}; final loss {last:.6}",
            stats.len(),
            data.len(),
            render_minutes(seconds)
        ),
    )
}

fn run_bench(cli: &Cli, a: &BenchArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let mut cfg = match read_config_text(cli)? {
        Some(text) => BenchConfig::from_kv_text(&text).map_err(usage)?,
        None => BenchConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.train.workers = w as usize;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = &a.strategies {
        cfg.strategies = s.clone();
    }
    cfg.validate().map_err(usage)?;
    let report = bench::run_bench(&cfg).map_err(runtime)?;
    bench::write_report(&cli.out, &report).map_err(runtime)?;
    let tables = bench::emit_tables(&report.strategies, &report.preprocessing);
    write!(out, "{}", tables.markdown).map_err(runtime)
}

fn eval(cli: &Cli, a: &EvalArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let model = checkpoint::load(&a.checkpoint).map_err(|e| runtime(format!("{}: {e}", a.checkpoint.display())))?;
    let seed = cli.seed.unwrap_or(0);
    let workers = cli.workers.unwrap_or(1) as usize;
    let data = match &a.data.data {
        Some(dir) => load_split(dir, Split::Test, seed, workers, out)?,
        None => synthetic::labeled_set(a.data.samples, model.config().input_side, synthetic::held_out_seed(seed))
            .map_err(usage)?,
    };
    let (logits, truth) = bench::predict_set(&model, &data, 32).map_err(runtime)?;
    let acc = bench::accuracy_from_logits(&logits, &truth, a.threshold).map_err(runtime)?;
    say(
        out,
        &format!(
            "accuracy {}% on {} images ({acc})",
            crate::trainer::fixed2(acc * 100.0),
            data.len()
        ),
    )
}
