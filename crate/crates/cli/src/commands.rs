//! Argument parsing and the five subcommands.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use lpgflow_core::eval::{attention_heatmaps, evaluate_pairs, Metric};
use lpgflow_core::image_io;
use lpgflow_core::model::{Dit, LoraAdapter, TuningMode};
use lpgflow_core::taskdata::{build_dataset, load_dataset, task_description, TaskKind, TaskSpec};
use lpgflow_core::Error;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::{resolve_seed, sha256_hex, RunConfig};
use crate::error::CliError;
use crate::sample::{combine_adapters, sample_batch, SampleItem};
use crate::train::{padded_caption, train};

pub const LOSS_CSV: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.lpgf";
pub const ADAPTER_FILE: &str = "adapter.lpgf";
pub const PROMPT_FILE: &str = "prompt.lpgf";
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "lpgflow", version, about = "Left-prompt-guided rectified-flow toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a paired dataset and its manifest.
    Datagen(DatagenArgs),
    /// Train the adapter, prompt tokens or base weights named by a config.
    Train(TrainArgs),
    /// Generate the right canvas for a reference image.
    Sample(SampleArgs),
    /// Score predictions against ground truth by filename.
    Eval(EvalArgs),
    /// Print the header of a checkpoint.
    InspectCkpt(InspectArgs),
}

#[derive(Debug, Args)]
struct DatagenArgs {
    #[arg(long)]
    task: String,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Probability of a matching-based mask for ref-inpainting pairs.
    #[arg(long)]
    matching_probability: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f32>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key override, e.g. `optimizer.lr=2e-4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Adapter file; repeat to merge several. Defaults to the adapter bundled in the checkpoint.
    #[arg(long = "adapter")]
    adapters: Vec<PathBuf>,
    /// Prompt-token file; defaults to the tokens bundled in the checkpoint.
    #[arg(long)]
    prompt: Option<PathBuf>,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Directory for attention heatmaps, one set every `flow.attention_every` steps.
    #[arg(long)]
    dump_attn: Option<PathBuf>,
    /// Comma-separated condition token ids; defaults to the task description.
    #[arg(long)]
    caption: Option<String>,
    #[arg(long, default_value_t = 8)]
    heatmap_scale: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Comma-separated subset of psnr, ssim, edge_alignment.
    #[arg(long, default_value = "psnr,ssim,edge_alignment")]
    metrics: String,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run config whose digest is recorded in the report.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    path: PathBuf,
}

/// Parses `args` (program name first) and runs the chosen command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            return Err(CliError::usage(text.trim_start_matches("error: ").trim_end()));
        }
    };
    match cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectCkpt(a) => inspect(a),
    }
}

fn datagen(a: DatagenArgs) -> Result<(), CliError> {
    let kind: TaskKind = a.task.parse()?;
    if a.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let mut spec = TaskSpec::new(kind);
    if let Some(p) = a.matching_probability {
        spec.matching_probability = p;
    }
    if let Some(s) = a.noise_sigma {
        spec.noise_sigma = s;
    }
    let seed = resolve_seed(a.seed, 0)?;
    let manifest = build_dataset(&spec, a.count, seed, &a.out)?;
    emit(&manifest.display().to_string())?;
    Ok(())
}

/// Writes one line to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e).into()),
        _ => Ok(()),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&a.config, &a.overrides)?;
    cfg.resolve_seed(a.seed)?;
    let path = train_run(&cfg)?;
    emit(&path.display().to_string())?;
    Ok(())
}

/// Loads or initializes the base network named by a config.
pub fn base_model(cfg: &RunConfig) -> Result<Dit, CliError> {
    match &cfg.paths.base_checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config.model != cfg.model {
                return Err(Error::Dimension(format!(
                    "base checkpoint {} was built for a different model config",
                    p.display()
                ))
                .into());
            }
            Ok(ck.model()?)
        }
        None => Ok(Dit::new(cfg.model.clone(), cfg.seed)?),
    }
}

/// Full training run: reads the manifest, trains, and writes the loss log,
/// checkpoints and resolved config into `paths.out_dir`. Returns the path of
/// the bundled checkpoint.
pub fn train_run(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let manifest = cfg
        .paths
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::usage("paths.manifest is required for training"))?;
    let pairs = load_dataset(manifest)?;
    if pairs.is_empty() {
        return Err(CliError::no_data(format!("manifest {} lists no pairs", manifest.display())));
    }
    let model = base_model(cfg)?;
    if cfg.paths.base_checkpoint.is_none() && cfg.tuning_mode != TuningMode::Full {
        eprintln!(
            "warning: {} tuning on a freshly initialized base; its zero output projection passes no gradient upstream",
            cfg.tuning_mode
        );
    }
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg_path = out.join(RESOLVED_CONFIG);
    fs::write(&cfg_path, cfg.canonical_json()).map_err(io_err(&cfg_path))?;

    let csv_path = out.join(LOSS_CSV);
    let file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "step,loss").map_err(io_err(&csv_path))?;
    let trained = train(cfg, model, &pairs, |step, loss| {
        writeln!(csv, "{step},{loss}").map_err(io_err(&csv_path))
    });
    csv.flush().map_err(io_err(&csv_path))?;
    let trained = trained?;

    let step = cfg.optimizer.train_steps as u64;
    let mut bundle = Checkpoint::new(CheckpointKind::Base, step, cfg.clone()).with_base(&trained.model);
    if let Some(ad) = &trained.adapter {
        bundle = bundle.with_adapter(ad);
        let p = out.join(ADAPTER_FILE);
        Checkpoint::new(CheckpointKind::Lora, step, cfg.clone()).with_adapter(ad).save(&p)?;
    }
    if let Some(pr) = &trained.prompt {
        bundle = bundle.with_prompt(pr);
        let p = out.join(PROMPT_FILE);
        Checkpoint::new(CheckpointKind::Prompt, step, cfg.clone()).with_prompt(pr).save(&p)?;
    }
    let path = out.join(CHECKPOINT_FILE);
    bundle.save(&path)?;
    Ok(path)
}

fn parse_caption(text: &str) -> Result<Vec<u32>, CliError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("caption token {s:?} is not an unsigned integer")))
        })
        .collect()
}

fn load_adapter(path: &Path) -> Result<LoraAdapter, CliError> {
    Checkpoint::load(path)?
        .adapter()?
        .ok_or_else(|| CliError::usage(format!("{} holds no adapter", path.display())))
}

fn cmd_sample(a: SampleArgs) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let adapters = if a.adapters.is_empty() {
        ck.adapter()?.into_iter().collect()
    } else {
        a.adapters.iter().map(|p| load_adapter(p)).collect::<Result<Vec<_>, _>>()?
    };
    let adapter = combine_adapters(&model, &adapters)?;
    let prompt = match &a.prompt {
        Some(p) => Some(
            Checkpoint::load(p)?
                .prompt()
                .ok_or_else(|| CliError::usage(format!("{} holds no prompt tokens", p.display())))?,
        ),
        None => ck.prompt(),
    };
    let caption = match &a.caption {
        Some(c) => parse_caption(c)?,
        None => padded_caption(&task_description(ck.config.task.kind)),
    };
    let seed = resolve_seed(a.seed, ck.config.seed)?;
    let steps = a.steps.unwrap_or(ck.config.flow.sample_steps);
    if steps == 0 {
        return Err(CliError::usage("--steps must be positive"));
    }
    let left = image_io::read_canvas(&a.left)?;
    let every = a.dump_attn.as_ref().map(|_| ck.config.flow.attention_every);
    let out = sample_batch(
        &model,
        adapter.as_ref(),
        prompt.as_ref(),
        &[SampleItem { left, caption }],
        steps,
        seed,
        every,
    )?;
    image_io::write_canvas(&a.out, &out.outputs[0])?;
    if let Some(dir) = &a.dump_attn {
        attention_heatmaps(&out.attention, dir, a.heatmap_scale)?;
    }
    emit(&a.out.display().to_string())?;
    Ok(())
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>, CliError> {
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") && entry.path().is_file() {
            names.insert(name);
        }
    }
    Ok(names)
}

fn parse_metrics(text: &str) -> Result<Vec<Metric>, CliError> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: Metric = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(CliError::usage("--metrics names no metric"));
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let metrics = parse_metrics(&a.metrics)?;
    let pred = png_names(&a.pred)?;
    let gt = png_names(&a.gt)?;
    let skipped: Vec<String> = pred.symmetric_difference(&gt).cloned().collect();
    let mut pairs = Vec::new();
    for name in pred.intersection(&gt) {
        let p = image_io::read_canvas(&a.pred.join(name))?;
        let g = image_io::read_canvas(&a.gt.join(name))?;
        pairs.push((name.clone(), p, g));
    }
    if pairs.is_empty() {
        return Err(CliError::no_data("no prediction has a ground-truth file of the same name"));
    }
    let digest = match &a.config {
        Some(p) => RunConfig::load(p, &[])?.digest(),
        None => {
            let names: Vec<&str> = metrics.iter().map(|m| m.name()).collect();
            sha256_hex(names.join(",").as_bytes())
        }
    };
    let report = evaluate_pairs(&pairs, &metrics, skipped, digest)?;
    let text = serde_json::to_string_pretty(&report).expect("report serialises");
    match &a.out {
        Some(p) => fs::write(p, text + "\n").map_err(io_err(p))?,
        None => emit(&text)?,
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<(), CliError> {
    let bytes = fs::read(&a.path).map_err(io_err(&a.path))?;
    let ck = Checkpoint::from_bytes(&bytes, &a.path)?;
    let (header, _) = Checkpoint::read_header(&bytes, &a.path)?;
    let mut v = serde_json::to_value(&header).expect("header serialises");
    let params: usize = ck.tensors.values().map(|t| t.numel()).sum();
    v["num_params"] = params.into();
    v["config_digest"] = ck.config.digest().into();
    if ck.config.tuning_mode == TuningMode::Lora {
        if let Some(ad) = ck.adapter()? {
            v["adapter_params"] = ad.num_params().into();
        }
    }
    emit(&serde_json::to_string_pretty(&v).expect("value serialises"))?;
    Ok(())
}
