//! `fdnn` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::dataset::{ingest_directory, load_dataset, make_dataset, write_dataset, PairDataset, MANIFEST_FILE};
use crate::data::image::Image;
use crate::data::ppm::{load_ppm, save_ppm};
use crate::data::stylize::{default_seen_styles, default_unseen_styles, StyleSpec};
use crate::error::{FdnnError, Result};
use crate::metrics::{consistency, evaluate, Embedder};
use crate::model::{load_checkpoint, AdvSign, Destylize, EpochStats, TrainConfig, Trainer};
use crate::seed::{derive_seed, STREAM_DATA};

#[derive(Parser, Debug)]
#[command(
    name = "fdnn",
    version,
    about = "Face destylization: synthesize data, train, destylize, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a paired stylized/real face dataset to disk.
    Synth(SynthArgs),
    /// Write a manifest for a directory of user-supplied PPM pairs.
    Ingest(IngestArgs),
    /// Train the generator and discriminator.
    Train(TrainArgs),
    /// Destylize one PPM image.
    Destylize(DestylizeArgs),
    /// PSNR/SSIM of destylized test images against ground truth.
    Eval(EvalArgs),
    /// Top-k identity retrieval across styles.
    Consistency(ConsistencyArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub train_ids: u64,
    #[arg(long, default_value_t = 20)]
    pub test_ids: u64,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub dir: PathBuf,
    /// Comma-separated style names seen during training.
    #[arg(long, value_delimiter = ',')]
    pub seen: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long, value_enum)]
    pub adv_sign: Option<AdvSignArg>,
    #[arg(long)]
    pub checkpoint_every: Option<u32>,
    /// Per-epoch JSON-lines log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from the checkpoint at `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum AdvSignArg {
    Nonsaturating,
    Positive,
}

impl From<AdvSignArg> for AdvSign {
    fn from(a: AdvSignArg) -> Self {
        match a {
            AdvSignArg::Nonsaturating => AdvSign::Nonsaturating,
            AdvSignArg::Positive => AdvSign::Positive,
        }
    }
}

#[derive(Args, Debug)]
pub struct DestylizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON report path; the table goes to stdout.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq, Eq)]
pub enum EmbeddingArg {
    Bottleneck,
    Downsample,
}

#[derive(Args, Debug)]
pub struct ConsistencyArgs {
    /// Generator checkpoint. Without it images are compared as given.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = EmbeddingArg::Bottleneck)]
    pub embedding: EmbeddingArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Effective settings of a run, echoed next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default)]
    pub resume: bool,
}

impl RunConfig {
    /// Canonical text form: pretty JSON with a trailing newline.
    pub fn to_canonical_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FdnnError::config(format!("run config: {e}")))
    }
}

/// Effective settings of a synth run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_ids: u64,
    pub test_ids: u64,
    pub size: usize,
    pub seed: u64,
    pub styles: Vec<StyleSpec>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FdnnError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| FdnnError::io(path, e))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| FdnnError::io("<stdout>", e))
}

fn require_manifest(dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        let e = std::io::Error::new(std::io::ErrorKind::NotFound, "dataset manifest not found");
        return Err(FdnnError::io(path, e));
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    if args.train_ids == 0 || args.test_ids == 0 {
        return Err(FdnnError::config("--train-ids and --test-ids must be at least 1"));
    }
    let (seen, unseen) = (default_seen_styles(), default_unseen_styles());
    let styles: Vec<StyleSpec> = seen.iter().chain(&unseen).cloned().collect();
    let config = SynthConfig {
        train_ids: args.train_ids,
        test_ids: args.test_ids,
        size: args.size,
        seed: args.seed,
        styles: styles.clone(),
    };
    let data_seed = derive_seed(args.seed, STREAM_DATA);
    let (train, test) = make_dataset(args.train_ids, args.test_ids, &seen, &unseen, args.size, data_seed)?;
    fs::create_dir_all(&args.out).map_err(|e| FdnnError::io(&args.out, e))?;
    let manifest = write_dataset(&args.out, &train, &test, &styles)?;
    let mut echo = serde_json::to_string_pretty(&config)?;
    echo.push('\n');
    write_text(&args.out.join("synth.json"), &echo)?;
    emit(
        out,
        &format!(
            "wrote {} train and {} test pairs ({}x{}) to {}\n",
            train.len(),
            test.len(),
            manifest.image_size,
            manifest.image_size,
            args.out.display()
        ),
    )
}

pub fn cmd_ingest(args: &IngestArgs, out: &mut dyn Write) -> Result<()> {
    let m = ingest_directory(&args.dir, &args.seen)?;
    emit(
        out,
        &format!("indexed {} pairs in {} styles\n", m.records.len(), m.styles.len()),
    )
}

fn effective_train_config(args: &TrainArgs, image_size: usize) -> Result<RunConfig> {
    let mut run = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| FdnnError::io(path, e))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig {
            train: TrainConfig::default(),
            data: None,
            checkpoint: None,
            log: None,
            resume: false,
        },
    };
    let t = &mut run.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.base_channels {
        t.base_channels = v;
    }
    if let Some(v) = args.adv_sign {
        t.adv_sign = v.into();
    }
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = args.image_size {
        if v != image_size {
            return Err(FdnnError::config(format!(
                "--image-size {v} does not match the dataset's {image_size}"
            )));
        }
    }
    t.image_size = image_size;
    t.validate()?;
    run.data = Some(args.data.clone());
    run.checkpoint = Some(args.out.clone());
    run.log = Some(args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl")));
    run.resume = args.resume;
    Ok(run)
}

fn epoch_line(e: &EpochStats) -> Result<String> {
    Ok(serde_json::to_string(e)? + "\n")
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    require_manifest(&args.data)?;
    let (train_set, _, manifest) = load_dataset(&args.data)?;
    let run = effective_train_config(args, manifest.image_size)?;
    let log_path = run.log.clone().expect("set above");

    let (mut trainer, mut log) = if args.resume {
        let mut t = load_checkpoint(&args.out)?;
        if t.config.image_size != run.train.image_size {
            return Err(FdnnError::config(format!(
                "checkpoint is for {0}x{0} images, dataset has {1}x{1}",
                t.config.image_size, run.train.image_size
            )));
        }
        // only the epoch budget may change when resuming
        t.config.epochs = run.train.epochs;
        let text = fs::read_to_string(&log_path).map_err(|e| FdnnError::io(&log_path, e))?;
        let kept: String = text
            .lines()
            .take(t.epochs_completed as usize)
            .map(|l| format!("{l}\n"))
            .collect();
        (t, kept)
    } else {
        (Trainer::new(run.train.clone())?, String::new())
    };

    let effective = RunConfig {
        train: trainer.config.clone(),
        ..run
    };
    let echo = effective.to_canonical_json()?;
    write_text(&with_suffix(&args.out, ".config.json"), &echo)?;
    emit(out, &echo)?;
    write_text(&log_path, &log)?;

    let log_every = trainer.config.log_every;
    trainer.train(&train_set, Some(&args.out), |e| {
        let line = epoch_line(e)?;
        log.push_str(&line);
        write_text(&log_path, &log)?;
        if log_every > 0 && (e.epoch + 1) % log_every == 0 {
            emit(
                out,
                &format!(
                    "epoch {:>4}  Q {:.6}  F {:.6}  adv {:.6}  D acc {:.3}/{:.3}  lambda {:.6}  alpha {:.6}\n",
                    e.epoch, e.pixel_loss, e.d_loss, e.g_adv_loss, e.d_real_acc, e.d_fake_acc, e.lambda, e.alpha
                ),
            )?;
        }
        Ok(())
    })?;
    emit(out, &format!("checkpoint {}\n", args.out.display()))
}

pub fn cmd_destylize(args: &DestylizeArgs, out: &mut dyn Write) -> Result<()> {
    let trainer = load_checkpoint(&args.ckpt)?;
    let image: Image = load_ppm(&args.input)?;
    let result = trainer.generator.destylize(&image)?;
    save_ppm(&result, &args.out)?;
    emit(out, &format!("wrote {}\n", args.out.display()))
}

fn load_test(dir: &Path) -> Result<PairDataset> {
    require_manifest(dir)?;
    let (_, test, _) = load_dataset(dir)?;
    Ok(test)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let trainer = load_checkpoint(&args.ckpt)?;
    let test = load_test(&args.data)?;
    let report = evaluate(&trainer.generator, &test)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_text(&args.out, &json)?;
    emit(out, &report.to_table())
}

struct AsIs;

impl Destylize for AsIs {
    fn destylize(&self, image: &Image) -> Result<Image> {
        Ok(image.clone())
    }
}

pub fn cmd_consistency(args: &ConsistencyArgs, out: &mut dyn Write) -> Result<()> {
    let test = load_test(&args.data)?;
    let trainer = args.ckpt.as_ref().map(load_checkpoint).transpose()?;
    let report = match (&trainer, args.embedding) {
        (Some(t), EmbeddingArg::Bottleneck) => {
            consistency(&t.generator, Embedder::Bottleneck(&t.generator), &test, args.k)?
        }
        (Some(t), EmbeddingArg::Downsample) => consistency(&t.generator, Embedder::Downsample, &test, args.k)?,
        (None, EmbeddingArg::Downsample) => consistency(&AsIs, Embedder::Downsample, &test, args.k)?,
        (None, EmbeddingArg::Bottleneck) => {
            return Err(FdnnError::config("bottleneck embeddings need --ckpt"));
        }
    };
    if let Some(path) = &args.out {
        let mut json = serde_json::to_string_pretty(&report)?;
        json.push('\n');
        write_text(path, &json)?;
    }
    emit(out, &report.to_table())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Ingest(a) => cmd_ingest(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Destylize(a) => cmd_destylize(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Consistency(a) => cmd_consistency(a, out),
    }
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
