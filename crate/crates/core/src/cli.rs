//! Command-line runs: dataset synthesis, staged training, inference,
//! evaluation and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric abort.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::codec::{build_prompt, decode_text, encode_text, parse_instances, Diagnostic, PromptTask, TextInstance};
use crate::data::{inline_image, load_items, write_jsonl, Dataset, DatasetRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, PredictionRecord};
use crate::model::{Model, ModelConfig};
use crate::synth::{generate_dataset, ChartFormat, Family, GeneratorConfig, Image};
use crate::train::{
    load_checkpoint, load_checkpoint_for, read_checkpoint_info, run_stage, save_checkpoint, MixtureSpec, StageConfig,
    Trainer,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Dataset file name inside a synthesis output directory.
pub const DATASET_FILE: &str = "data.jsonl";
/// Training log file name inside a training output directory.
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "stage,step,loss,token_accuracy,lr,image_size";

pub fn checkpoint_name(stage: u8) -> String {
    format!("stage{stage}.ckpt")
}

/// A named preset (`"desk"`) or explicit dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Explicit(ModelConfig),
}

impl ModelSpec {
    /// The desk preset takes its coordinate bins from the generator.
    pub fn resolve(&self, bins: u32) -> Result<ModelConfig> {
        let cfg = match self {
            ModelSpec::Preset(name) if name == "desk" => ModelConfig::desk_with_bins(bins),
            ModelSpec::Preset(name) if name == "full_scale" => {
                return Err(Error::Config("the full_scale preset is too large to instantiate".into()))
            }
            ModelSpec::Preset(name) => {
                return Err(Error::Config(format!("unknown model preset {name:?}; presets: desk")))
            }
            ModelSpec::Explicit(cfg) => cfg.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything a run depends on besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    /// Generator settings; its `seed` is replaced by the run seed.
    pub generator: GeneratorConfig,
    /// Samples per family, keyed by family name.
    pub counts: BTreeMap<String, usize>,
    /// Embed images in the JSONL instead of writing image files.
    pub inline_images: bool,
    pub stages: Vec<StageConfig>,
    pub mixture: MixtureSpec,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub finetune_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSpec::Preset("desk".into()),
            generator: GeneratorConfig::default(),
            counts: Family::ALL.iter().map(|f| (f.name().to_string(), 32)).collect(),
            inline_images: false,
            stages: (1..=3).map(|s| StageConfig::desk(s, 0.1).expect("desk presets are valid")).collect(),
            mixture: MixtureSpec::default(),
            seed: 0,
            data: None,
            finetune_data: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.family_counts()?;
        self.model_config()?;
        self.mixture.validate()?;
        let mut seen = [false; 4];
        for s in &self.stages {
            s.validate()?;
            if std::mem::replace(&mut seen[s.stage as usize], true) {
                return Err(Error::Config(format!("stage {} is configured twice", s.stage)));
            }
        }
        if let (Ok(s2), Ok(s3)) = (self.stage(2), self.stage(3)) {
            if s2.finetune_with_steps(s3.steps) != *s3 {
                return Err(Error::Config("stage 3 must keep every stage-2 setting except the step count".into()));
            }
        }
        Ok(())
    }

    pub fn family_counts(&self) -> Result<Vec<(Family, usize)>> {
        let mut out = Vec::with_capacity(self.counts.len());
        for (name, &n) in &self.counts {
            out.push((name.parse::<Family>()?, n));
        }
        out.sort_by_key(|&(f, _)| Family::ALL.iter().position(|&g| g == f));
        Ok(out)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve(self.generator.bins)
    }

    pub fn stage(&self, stage: u8) -> Result<&StageConfig> {
        self.stages
            .iter()
            .find(|s| s.stage == stage)
            .ok_or_else(|| Error::Config(format!("stage {stage} is not configured")))
    }

    fn seeded_generator(&self) -> GeneratorConfig {
        GeneratorConfig { seed: self.seed, ..self.generator.clone() }
    }
}

/// Writes `data.jsonl` and the images it references into `out_dir`.
pub fn cmd_synth(config: &RunConfig, out_dir: &Path, stdout: &mut dyn Write) -> Result<PathBuf> {
    config.validate()?;
    let counts = config.family_counts()?;
    let samples = generate_dataset(&config.seeded_generator(), &counts)?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let image = match &s.image {
            Some(img) if config.inline_images => Some(inline_image(img)),
            Some(img) => {
                let ext = if img.channels == 1 { "pgm" } else { "ppm" };
                let rel = format!("images/{}.{ext}", s.id);
                img.save(&out_dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        records.push(DatasetRecord::from_sample(s, image));
    }
    let path = out_dir.join(DATASET_FILE);
    write_jsonl(&path, &records)?;
    for (family, n) in &counts {
        say(stdout, &format!("{family}\t{n}"))?;
    }
    say(stdout, &format!("wrote {} records to {}", records.len(), path.display()))?;
    Ok(path)
}

/// Options for [`cmd_train`] beyond the run configuration.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub stages: Vec<u8>,
    /// Checkpoint to continue from instead of a fresh initialization.
    pub init: Option<PathBuf>,
    /// Dataset for stage 3; the main dataset when absent.
    pub finetune_data: Option<PathBuf>,
}

/// Runs the requested stages in order, writing `stage<N>.ckpt` after each
/// and appending to `train_log.csv`. Returns the checkpoint paths.
pub fn cmd_train(
    config: &RunConfig,
    data: &Path,
    out_dir: &Path,
    options: &TrainOptions,
    stdout: &mut dyn Write,
) -> Result<Vec<PathBuf>> {
    config.validate()?;
    if options.stages.is_empty() || options.stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("stages must be a non-empty increasing list".into()));
    }
    let stages = options.stages.iter().map(|&s| config.stage(s).cloned()).collect::<Result<Vec<_>>>()?;
    let model_cfg = config.model_config()?;
    let vocab = model_cfg.vocab()?;
    let items = load_items(&Dataset::load(data)?, &vocab)?;
    let finetune_items = match &options.finetune_data {
        Some(p) if options.stages.contains(&3) => Some(load_items(&Dataset::load(p)?, &vocab)?),
        _ => None,
    };
    let mut trainer = match &options.init {
        Some(p) => load_checkpoint_for(p, &model_cfg)?,
        None => Trainer::new(model_cfg, config.seed)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    if log.metadata().map_err(|e| Error::io(&log_path, e))?.len() == 0 {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }
    let mut written = Vec::with_capacity(stages.len());
    for stage in &stages {
        let data = match (&finetune_items, stage.stage) {
            (Some(ft), 3) => ft,
            _ => &items,
        };
        let outcome = run_stage(&mut trainer, stage, &config.mixture, data)?;
        for r in &outcome.log {
            writeln!(log, "{},{},{},{},{},{}", r.stage, r.step, r.loss, r.token_accuracy, r.lr, r.image_size)
                .map_err(|e| Error::io(&log_path, e))?;
        }
        let path = out_dir.join(checkpoint_name(stage.stage));
        save_checkpoint(&trainer, &path)?;
        let loss = outcome.final_loss.map_or("none".to_string(), |l| format!("{l:.6}"));
        say(
            stdout,
            &format!(
                "stage {}: {} steps, final loss {loss}, {} overlong samples skipped, wrote {}",
                stage.stage,
                stage.steps,
                outcome.overflow_skips,
                path.display()
            ),
        )?;
        written.push(path);
    }
    Ok(written)
}

/// One decoded model answer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inference {
    pub task: PromptTask,
    pub prompt: String,
    pub output: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<TextInstance>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Vec<Diagnostic>>,
}

/// Greedy answer to `prompt`. The image must already have the encoder's
/// input size.
pub fn infer(model: &Model<f32>, task: PromptTask, image: Option<&Image>, prompt: &str) -> Result<Inference> {
    let side = model.config.encoder.input_size;
    if let Some(img) = image {
        if img.width != side || img.height != side {
            return Err(Error::Config(format!(
                "image is {}x{} but the model takes {side}x{side}; resize it to {side}x{side} first (no automatic resizing)",
                img.width, img.height
            )));
        }
    } else if task != PromptTask::PureText {
        return Err(Error::Config(format!("task {task} needs an image")));
    }
    let prompt_ids = encode_text(prompt);
    let prefix = if image.is_some() { model.config.sampler.prefix_len() } else { 0 };
    let used = prefix + prompt_ids.len() + 1;
    let max_seq = model.config.decoder.max_seq;
    if used >= max_seq {
        return Err(Error::SequenceLength { len: used + 1, max: max_seq });
    }
    let tensor = image.map(|i| i.to_tensor::<f32>());
    let ids = model.generate(tensor.as_ref(), &prompt_ids, max_seq - used)?;
    let output = decode_text(&ids, &model.vocab);
    let (instances, diagnostics) = match image {
        Some(img) if task.emits_instances() => {
            let (inst, diag) = parse_instances(&ids, &model.vocab, img.width as f64, img.height as f64);
            (Some(inst), Some(diag))
        }
        _ => (None, None),
    };
    Ok(Inference { task, prompt: prompt.to_string(), output, instances, diagnostics })
}

/// Predictions for every record of `dataset` (optionally one task only),
/// using each record's own prompt.
pub fn predict_dataset(model: &Model<f32>, dataset: &Dataset, task: Option<PromptTask>) -> Result<Vec<PredictionRecord>> {
    dataset
        .records
        .iter()
        .filter(|r| task.is_none_or(|t| t == r.task))
        .map(|r| {
            let image = r.load_image(dataset.base_dir())?;
            let inf = infer(model, r.task, image.as_ref(), &r.prompt)?;
            Ok(PredictionRecord { id: r.id.clone(), task: Some(r.task.name().to_string()), output: inf.output })
        })
        .collect()
}

/// What [`cmd_infer`] runs on.
#[derive(Debug, Clone)]
pub enum InferInput {
    /// One image (or none for pure text) with a task and template bindings.
    Single { image: Option<PathBuf>, task: PromptTask, params: BTreeMap<String, String> },
    /// Every record of a dataset, predictions written as JSONL to `out`.
    Dataset { data: PathBuf, task: Option<PromptTask>, out: PathBuf },
}

pub fn cmd_infer(checkpoint: &Path, input: &InferInput, stdout: &mut dyn Write) -> Result<()> {
    let trainer = load_checkpoint(checkpoint)?;
    match input {
        InferInput::Single { image, task, params } => {
            let image = image.as_deref().map(Image::load).transpose()?;
            let prompt = build_prompt(*task, params)?;
            let inf = infer(&trainer.model, *task, image.as_ref(), &prompt)?;
            say(stdout, &inf.output)?;
            if inf.instances.is_some() {
                say(stdout, &serde_json::to_string(&inf)?)?;
            }
        }
        InferInput::Dataset { data, task, out } => {
            let preds = predict_dataset(&trainer.model, &Dataset::load(data)?, *task)?;
            write_jsonl(out, &preds)?;
            say(stdout, &format!("wrote {} predictions to {}", preds.len(), out.display()))?;
        }
    }
    Ok(())
}

/// Prints the report JSON. Scores never affect the result; only
/// structural problems do.
pub fn cmd_eval(config: &RunConfig, pred: &Path, gt: &Path, task: Option<PromptTask>, stdout: &mut dyn Write) -> Result<()> {
    let vocab = config.model_config()?.vocab()?;
    let report = evaluate_run(pred, gt, task, &vocab)?;
    say(stdout, &report.to_json())
}

pub fn cmd_inspect(checkpoint: &Path, stdout: &mut dyn Write) -> Result<()> {
    let info = read_checkpoint_info(checkpoint)?;
    say(stdout, &serde_json::to_string_pretty(&info)?)
}

fn say(w: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io("<stdout>", e))
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn parse_task(s: &str) -> std::result::Result<PromptTask, String> {
    s.parse::<PromptTask>().map_err(|e| e.to_string())
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse::<Family>().map_err(|e| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<ChartFormat, String> {
    match s.to_ascii_lowercase().as_str() {
        "csv" => Ok(ChartFormat::Csv),
        "markdown" => Ok(ChartFormat::Markdown),
        "json" => Ok(ChartFormat::Json),
        _ => Err(format!("unknown format {s:?}; valid formats: csv, markdown, json")),
    }
}

fn parse_param(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("parameter {s:?} is not KEY=VALUE"))
}

#[derive(Debug, Parser)]
#[command(name = "stxv3", version, about = "Desk-scale vision-language model for text-rich images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generate only this family.
        #[arg(long, value_parser = parse_family)]
        task: Option<Family>,
        /// Samples per generated family.
        #[arg(long)]
        count: Option<usize>,
        /// Chart table format: csv, markdown or json.
        #[arg(long, value_parser = parse_format)]
        format: Option<ChartFormat>,
    },
    /// Train the requested stages, one checkpoint per stage.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset JSONL.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated stages, e.g. 1,2,3.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        stage: Vec<u8>,
        /// Checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Dataset for stage 3.
        #[arg(long)]
        finetune_data: Option<PathBuf>,
    },
    /// Greedy inference on one image or a whole dataset.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "data")]
        image: Option<PathBuf>,
        #[arg(long, value_parser = parse_task)]
        task: Option<PromptTask>,
        /// Template binding KEY=VALUE; repeatable.
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, String)>,
        /// Binds the chart-parsing format: csv, markdown or json.
        #[arg(long, value_parser = parse_format)]
        format: Option<ChartFormat>,
        /// Dataset JSONL to predict for.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Prediction JSONL (with --data).
        #[arg(long, requires = "data")]
        out: Option<PathBuf>,
    },
    /// Score predictions against ground truth; prints report JSON.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_parser = parse_task)]
        task: Option<PromptTask>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dump a checkpoint header and per-tensor statistics.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn usage(msg: &str, stderr: &mut dyn Write) -> i32 {
    let _ = writeln!(stderr, "error: {msg}");
    EXIT_USAGE
}

fn dispatch(command: Command, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Synth { config, seed, out, task, count, format } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(f) = task {
                let n = count.or_else(|| cfg.counts.get(f.name()).copied()).unwrap_or(0);
                cfg.counts = BTreeMap::from([(f.name().to_string(), n)]);
            } else if let Some(n) = count {
                cfg.counts.values_mut().for_each(|c| *c = n);
            }
            if let Some(f) = format {
                cfg.generator.chart_formats = vec![f];
            }
            let Some(out) = out.or(cfg.out.clone()) else { return Ok(usage("synth needs --out", stderr)) };
            cmd_synth(&cfg, &out, stdout)?;
        }
        Command::Train { config, seed, data, out, stage, init, finetune_data } => {
            let cfg = load_config(&config, seed)?;
            let Some(data) = data.or(cfg.data.clone()) else { return Ok(usage("train needs --data", stderr)) };
            let Some(out) = out.or(cfg.out.clone()) else { return Ok(usage("train needs --out", stderr)) };
            let options = TrainOptions { stages: stage, init, finetune_data: finetune_data.or(cfg.finetune_data.clone()) };
            cmd_train(&cfg, &data, &out, &options, stdout)?;
        }
        Command::Infer { checkpoint, image, task, params, format, data, out } => {
            let input = match (data, out) {
                (Some(data), Some(out)) => InferInput::Dataset { data, task, out },
                (Some(_), None) => return Ok(usage("infer --data needs --out", stderr)),
                _ => {
                    let Some(task) = task else { return Ok(usage("infer needs --task", stderr)) };
                    let mut params: BTreeMap<String, String> = params.into_iter().collect();
                    if let Some(f) = format {
                        params.insert("format".into(), f.name().into());
                    }
                    InferInput::Single { image, task, params }
                }
            };
            cmd_infer(&checkpoint, &input, stdout)?;
        }
        Command::Eval { pred, gt, task, config } => {
            let cfg = load_config(&config, None)?;
            cmd_eval(&cfg, &pred, &gt, task, stdout)?;
        }
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint, stdout)?,
    }
    Ok(EXIT_OK)
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return EXIT_OK;
            }
            let _ = write!(stderr, "{}", e.render());
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(err) => {
            let _ = writeln!(stderr, "error: {err}");
            exit_code(&err)
        }
    }
}
