//! Command-line entry point.
//!
//! Every flag is also a config key. Values resolve as
//! default < config file < `CELDECOMP_SEED` (seed only) < flag.
//! A config file is a JSON object; top-level keys apply to every command that
//! knows them and a section named after the command (e.g. `"train": {..}`)
//! overrides those.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::checkpoint::file_hash;
use crate::compositor::{recompose, write_png, write_stack_dir, LayerStack, RasterImage};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, Predictor, Summary};
use crate::flowtrain::{decompose, encode_samples, pretrain_backbone, train_to_dir, TrainConfig};
use crate::latentcodec::{layer_images, train_codec, Codec, CodecConfig, CodecTrainConfig};
use crate::layernet::Model;
use crate::objective::Ablation;
use crate::synthgen::{generate_dataset, load_dataset, validate_sample, DatasetIndex, SampleSpec};

pub const SEED_ENV: &str = "CELDECOMP_SEED";
pub const MANIFEST_FILE: &str = "run_manifest.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_VALIDATION,
    }
}

#[derive(Debug, Parser)]
#[command(name = "celdecomp", about = "Decompose cel-shaded illustrations into lineart, flat, highlight and shadow layers")]
pub struct Cli {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic layered dataset.
    GenData(GenDataArgs),
    /// Train the latent codec on a dataset.
    TrainCodec(TrainCodecArgs),
    /// Pretrain (or load) a backbone and fine-tune the adapters.
    Train(TrainArgs),
    /// Split one image into four layers.
    Decompose(DecomposeArgs),
    /// Flatten a stack directory into one PNG.
    Recompose(RecomposeArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train full, no_lse and no_lwloss back to back and compare.
    Ablate(AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainCodec(_) => "train-codec",
            Command::Train(_) => "train",
            Command::Decompose(_) => "decompose",
            Command::Recompose(_) => "recompose",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataConfig {
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub height: usize,
    pub width: usize,
}

fn gen_data_defaults() -> Value {
    json!({ "n": 45, "seed": 0, "height": 64, "width": 48 })
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct TrainCodecArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rgb_steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rgba_steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_channels: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCodecConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub rgb_steps: usize,
    pub rgba_steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub latent_channels: usize,
}

fn train_codec_defaults() -> Value {
    json!({ "rgb_steps": 250, "rgba_steps": 1000, "batch": 8, "lr": 2e-3, "seed": 0, "latent_channels": 8 })
}

/// Adapter training flags shared by `train` and `ablate`.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codec: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Frozen backbone checkpoint; pretrained into `<out>/backbone.ckpt` when absent.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_ablation)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub euler_steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone_steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone_lr: Option<f32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone_seed: Option<u64>,
    /// Held-out dataset for `ablate`; defaults to `--data`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_data: Option<PathBuf>,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse::<Ablation>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCmdConfig {
    pub data: PathBuf,
    pub codec: PathBuf,
    pub out: PathBuf,
    pub backbone: Option<PathBuf>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    pub ablation: Ablation,
    pub euler_steps: usize,
    pub checkpoint_every: usize,
    pub backbone_steps: usize,
    pub backbone_lr: f32,
    pub backbone_seed: u64,
    pub eval_data: Option<PathBuf>,
}

fn train_defaults() -> Value {
    let d = TrainConfig::desk();
    json!({
        "backbone": null,
        "steps": d.steps,
        "batch": d.batch,
        "lr": d.lr,
        "seed": 0,
        "ablation": "full",
        "euler_steps": d.euler_steps,
        "checkpoint_every": 0,
        "backbone_steps": d.backbone_steps,
        "backbone_lr": d.backbone_lr,
        "backbone_seed": 0,
        "eval_data": null,
    })
}

impl TrainCmdConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            ablation: self.ablation,
            euler_steps: self.euler_steps,
            checkpoint_every: self.checkpoint_every,
            backbone_steps: self.backbone_steps,
            backbone_lr: self.backbone_lr,
            ..TrainConfig::desk()
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct DecomposeArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codec: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeConfig {
    pub image: PathBuf,
    pub checkpoint: PathBuf,
    pub codec: PathBuf,
    pub out: PathBuf,
    pub steps: usize,
    pub seed: u64,
}

fn decompose_defaults() -> Value {
    json!({ "steps": 20, "seed": 0 })
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct RecomposeArgs {
    /// Stack directory (five PNGs plus manifest.json).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stack: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecomposeConfig {
    pub stack: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub codec: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Score the ground-truth layers instead of a model.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub data: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub codec: Option<PathBuf>,
    pub out: PathBuf,
    pub steps: usize,
    pub seed: u64,
    pub ground_truth: bool,
}

fn eval_defaults() -> Value {
    json!({ "checkpoint": null, "codec": null, "steps": 20, "seed": 0, "ground_truth": false })
}

#[derive(Debug, Clone, Default, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
}

/// Merges `default < file < env seed < flags` and deserializes the result.
pub fn resolve<T: DeserializeOwned>(
    command: &str,
    defaults: Value,
    file: Option<&Value>,
    env_seed: Option<&str>,
    flags: Value,
    known: &[&str],
) -> Result<T> {
    let mut merged = match defaults {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    if let Some(Value::Object(file)) = file {
        for (k, v) in file {
            if known.contains(&k.as_str()) && !v.is_object() {
                merged.insert(k.clone(), v.clone());
            }
        }
        match file.get(command) {
            Some(Value::Object(sec)) => {
                for (k, v) in sec {
                    if !known.contains(&k.as_str()) {
                        return Err(Error::Config(format!("unknown key `{k}` in config section `{command}`")));
                    }
                    merged.insert(k.clone(), v.clone());
                }
            }
            Some(_) => return Err(Error::Config(format!("config section `{command}` must be an object"))),
            None => {}
        }
    } else if file.is_some() {
        return Err(Error::Config("config file must hold a JSON object".into()));
    }
    if let Some(s) = env_seed {
        if known.contains(&"seed") {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
            merged.insert("seed".into(), seed.into());
        }
    }
    if let Value::Object(flags) = flags {
        merged.extend(flags);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(format!("{command}: {e}")))
}

pub const GEN_DATA_KEYS: &[&str] = &["n", "seed", "out", "height", "width"];
pub const TRAIN_CODEC_KEYS: &[&str] = &["data", "out", "rgb_steps", "rgba_steps", "batch", "lr", "seed", "latent_channels"];
pub const TRAIN_KEYS: &[&str] = &[
    "data",
    "codec",
    "out",
    "backbone",
    "steps",
    "batch",
    "lr",
    "seed",
    "ablation",
    "euler_steps",
    "checkpoint_every",
    "backbone_steps",
    "backbone_lr",
    "backbone_seed",
    "eval_data",
];
pub const DECOMPOSE_KEYS: &[&str] = &["image", "checkpoint", "codec", "out", "steps", "seed"];
pub const RECOMPOSE_KEYS: &[&str] = &["stack", "out"];
pub const EVAL_KEYS: &[&str] = &["data", "checkpoint", "codec", "out", "steps", "seed", "ground_truth"];

fn to_flags<A: Serialize>(a: &A) -> Result<Value> {
    serde_json::to_value(a).map_err(|e| Error::Parse(e.to_string()))
}

/// One append-only record of a command run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    /// Input path -> sha256 of the file (directories hash their index or manifest).
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::load(&path, e))
    }

    /// Appends `entry` unless it equals the last one, so identical reruns
    /// leave the file byte-identical.
    pub fn append(dir: &Path, entry: ManifestEntry) -> Result<()> {
        let mut m = Self::load(dir)?;
        if m.entries.last() != Some(&entry) {
            m.entries.push(entry);
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn hash_input(path: &Path) -> Result<(String, String)> {
    let target = if path.is_dir() {
        ["index.json", "manifest.json"]
            .iter()
            .map(|f| path.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| Error::load(path, "directory has no index.json or manifest.json"))?
    } else {
        path.to_path_buf()
    };
    Ok((path.display().to_string(), file_hash(&target)?))
}

fn hash_outputs(dir: &Path, files: &[&str]) -> Result<Vec<(String, String)>> {
    files.iter().map(|f| Ok((f.to_string(), file_hash(&dir.join(f))?))).collect()
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn config_value<T: Serialize>(cfg: &T) -> Value {
    serde_json::to_value(cfg).unwrap_or(Value::Null)
}

pub fn cmd_gen_data(cfg: &GenDataConfig) -> Result<DatasetIndex> {
    let template = SampleSpec::default().sized(cfg.height, cfg.width);
    template.validate()?;
    let index = generate_dataset(cfg.n, cfg.seed, &cfg.out, &template)?;
    for dir in index.sample_dirs(&cfg.out) {
        let report = validate_sample(&dir)?;
        if !report.passed() {
            return Err(Error::Precondition(format!("generated sample failed validation:\n{report}")));
        }
    }
    RunManifest::append(
        &cfg.out,
        ManifestEntry {
            command: "gen-data".into(),
            config: config_value(cfg),
            seeds: vec![cfg.seed],
            inputs: vec![],
            outputs: hash_outputs(&cfg.out, &["index.json"])?,
        },
    )?;
    Ok(index)
}

fn load_pairs(data: &Path) -> Result<Vec<crate::synthgen::StoredSample>> {
    let samples = load_dataset(data)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", data.display())));
    }
    Ok(samples)
}

pub fn cmd_train_codec(cfg: &TrainCodecConfig) -> Result<Codec> {
    let samples = load_pairs(&cfg.data)?;
    let sources: Vec<RasterImage> = samples.iter().map(|s| s.source.clone()).collect();
    let layers: Vec<[RasterImage; 4]> = samples.iter().map(|s| layer_images(&s.stack)).collect();
    let tc = CodecTrainConfig {
        codec: CodecConfig {
            channels: 3,
            latent_channels: cfg.latent_channels,
            ..CodecConfig::default()
        },
        rgb_steps: cfg.rgb_steps,
        rgba_steps: cfg.rgba_steps,
        batch: cfg.batch,
        lr: cfg.lr,
        seed: cfg.seed,
    };
    let (codec, report) = train_codec(&sources, &layers, &tc)?;
    mkdir(&cfg.out)?;
    codec.save(&cfg.out.join("codec.ckpt"))?;
    let csv_path = cfg.out.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::load(&csv_path, e))?;
    w.write_record(["step", "phase", "mse"]).map_err(|e| Error::load(&csv_path, e))?;
    for (i, l) in report.losses.iter().enumerate() {
        let phase = if i < report.rgb_steps { "rgb" } else { "rgba" };
        w.write_record([(i + 1).to_string(), phase.to_string(), format!("{l:.8}")])
            .map_err(|e| Error::load(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    RunManifest::append(
        &cfg.out,
        ManifestEntry {
            command: "train-codec".into(),
            config: config_value(cfg),
            seeds: vec![cfg.seed],
            inputs: vec![hash_input(&cfg.data)?],
            outputs: hash_outputs(&cfg.out, &["codec.ckpt", "metrics.csv"])?,
        },
    )?;
    Ok(codec)
}

/// Loads the given backbone or pretrains one into `<out>/backbone.ckpt`.
fn obtain_backbone(cfg: &TrainCmdConfig, codec: &Codec, template: &SampleSpec) -> Result<(Model, PathBuf)> {
    if let Some(p) = &cfg.backbone {
        return Ok((Model::load(p)?, p.clone()));
    }
    let tc = TrainConfig {
        seed: cfg.backbone_seed,
        ..cfg.train_config()
    };
    let (model, _) = pretrain_backbone(codec, &tc, template)?;
    mkdir(&cfg.out)?;
    let path = cfg.out.join("backbone.ckpt");
    model.save(&path)?;
    Ok((model, path))
}

fn final_checkpoint(out: &Path, steps: usize) -> PathBuf {
    out.join("checkpoints").join(format!("step_{steps}"))
}

pub fn cmd_train(cfg: &TrainCmdConfig) -> Result<Model> {
    let index = DatasetIndex::load(&cfg.data)?;
    let samples = load_pairs(&cfg.data)?;
    let codec = Codec::load(&cfg.codec)?;
    let (backbone, backbone_path) = obtain_backbone(cfg, &codec, &index.spec)?;
    let tc = cfg.train_config();
    let pairs: Vec<_> = samples.iter().map(|s| (&s.source, &s.stack)).collect();
    let data = encode_samples(&codec, &pairs, &tc.clone().resolved()?.model)?;
    let out = train_to_dir(&data, &backbone, &tc, &cfg.out)?;
    let ck = final_checkpoint(&cfg.out, cfg.steps);
    RunManifest::append(
        &cfg.out,
        ManifestEntry {
            command: "train".into(),
            config: config_value(cfg),
            seeds: vec![cfg.seed, cfg.backbone_seed],
            inputs: vec![
                hash_input(&cfg.data)?,
                hash_input(&cfg.codec)?,
                hash_input(&backbone_path)?,
            ],
            outputs: vec![
                ("config.json".into(), file_hash(&cfg.out.join("config.json"))?),
                ("metrics.csv".into(), file_hash(&cfg.out.join("metrics.csv"))?),
                (format!("checkpoints/step_{}", cfg.steps), file_hash(&ck)?),
            ],
        },
    )?;
    Ok(out.model)
}

pub fn cmd_decompose(cfg: &DecomposeConfig) -> Result<LayerStack> {
    let image = crate::compositor::read_png(&cfg.image)?;
    let model = Model::load(&cfg.checkpoint)?;
    let codec = Codec::load(&cfg.codec)?;
    let stack = decompose(&image, &model, &codec, cfg.steps, cfg.seed)?;
    // Quantize first so recomposed.png matches the PNG layers on disk.
    let q = LayerStack::from_layers(stack.layers().clone().map(|l| l.quantized()))?;
    mkdir(&cfg.out)?;
    write_stack_dir(&cfg.out, &image, &q)?;
    write_png(&cfg.out.join("recomposed.png"), &recompose(&q)?)?;
    let files = ["source.png", "lineart.png", "flat.png", "highlight.png", "shadow.png", "manifest.json", "recomposed.png"];
    RunManifest::append(
        &cfg.out,
        ManifestEntry {
            command: "decompose".into(),
            config: config_value(cfg),
            seeds: vec![cfg.seed],
            inputs: vec![hash_input(&cfg.image)?, hash_input(&cfg.checkpoint)?, hash_input(&cfg.codec)?],
            outputs: hash_outputs(&cfg.out, &files)?,
        },
    )?;
    Ok(q)
}

pub fn cmd_recompose(cfg: &RecomposeConfig) -> Result<RasterImage> {
    let (_, stack) = crate::compositor::read_stack_dir(&cfg.stack)?;
    let img = recompose(&stack)?;
    if let Some(parent) = cfg.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    write_png(&cfg.out, &img)?;
    Ok(img)
}

pub fn cmd_eval(cfg: &EvalConfig) -> Result<Summary> {
    let samples = load_pairs(&cfg.data)?;
    let mut inputs = vec![hash_input(&cfg.data)?];
    let summary = if cfg.ground_truth {
        evaluate(&cfg.out, &samples, Predictor::GroundTruth, &config_value(cfg))?
    } else {
        let (ck, cp) = match (&cfg.checkpoint, &cfg.codec) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Config("eval needs --checkpoint and --codec unless --ground-truth".into())),
        };
        let model = Model::load(ck)?;
        let codec = Codec::load(cp)?;
        inputs.push(hash_input(ck)?);
        inputs.push(hash_input(cp)?);
        let mut hashed = config_value(cfg);
        hashed["input_hashes"] = json!(inputs);
        let pred = Predictor::Model {
            model: &model,
            codec: &codec,
            euler_steps: cfg.steps,
            seed: cfg.seed,
        };
        evaluate(&cfg.out, &samples, pred, &hashed)?
    };
    RunManifest::append(
        &cfg.out,
        ManifestEntry {
            command: "eval".into(),
            config: config_value(cfg),
            seeds: vec![cfg.seed],
            inputs,
            outputs: hash_outputs(&cfg.out, &["metrics.csv", "summary.json"])?,
        },
    )?;
    Ok(summary)
}

/// One row of the ablation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub psnr: f64,
    pub ssim: f64,
    pub lmse: f64,
    pub leak_mean: f64,
    pub final_loss: f64,
}

pub fn cmd_ablate(cfg: &TrainCmdConfig) -> Result<Vec<AblationRow>> {
    let index = DatasetIndex::load(&cfg.data)?;
    let samples = load_pairs(&cfg.data)?;
    let eval_dir = cfg.eval_data.clone().unwrap_or_else(|| cfg.data.clone());
    let eval_samples = load_pairs(&eval_dir)?;
    let codec = Codec::load(&cfg.codec)?;
    let (backbone, backbone_path) = obtain_backbone(cfg, &codec, &index.spec)?;
    let pairs: Vec<_> = samples.iter().map(|s| (&s.source, &s.stack)).collect();
    let data = encode_samples(&codec, &pairs, &cfg.train_config().resolved()?.model)?;
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for ablation in Ablation::ALL {
        let sub = cfg.out.join(ablation.tag());
        let tc = TrainConfig {
            ablation,
            ..cfg.train_config()
        };
        let out = train_to_dir(&data, &backbone, &tc, &sub)?;
        let pred = Predictor::Model {
            model: &out.model,
            codec: &codec,
            euler_steps: cfg.euler_steps,
            seed: cfg.seed,
        };
        let s = evaluate(&sub.join("eval"), &eval_samples, pred, &json!({ "ablation": ablation, "train": config_value(cfg) }))?;
        let tail = out.history.len().clamp(1, 50);
        let final_loss = out.history.iter().rev().take(tail).map(|b| b.total).sum::<f64>() / tail as f64;
        rows.push(AblationRow {
            ablation,
            psnr: s.mean("psnr"),
            ssim: s.mean("ssim"),
            lmse: s.mean("lmse"),
            leak_mean: s.mean("leak_mean"),
            final_loss,
        });
        let ck = format!("{}/checkpoints/step_{}", ablation.tag(), cfg.steps);
        outputs.push((ck.clone(), file_hash(&cfg.out.join(&ck))?));
        outputs.push((format!("{}/eval/summary.json", ablation.tag()), file_hash(&sub.join("eval/summary.json"))?));
    }
    rows.sort_by(|a, b| b.psnr.total_cmp(&a.psnr));
    let path = cfg.out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::load(&path, e))?;
    w.write_record(["ablation", "psnr", "ssim", "lmse", "leak_mean", "final_loss"])
        .map_err(|e| Error::load(&path, e))?;
    for r in &rows {
        w.write_record([
            r.ablation.tag().to_string(),
            format!("{:.6}", r.psnr),
            format!("{:.6}", r.ssim),
            format!("{:.6}", r.lmse),
            format!("{:.6}", r.leak_mean),
            format!("{:.6}", r.final_loss),
        ])
        .map_err(|e| Error::load(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    outputs.push(("ablation.csv".into(), file_hash(&path)?));
    RunManifest::append(
        &cfg.out,
        ManifestEntry {
            command: "ablate".into(),
            config: config_value(cfg),
            seeds: vec![cfg.seed, cfg.backbone_seed],
            inputs: vec![
                hash_input(&cfg.data)?,
                hash_input(&eval_dir)?,
                hash_input(&cfg.codec)?,
                hash_input(&backbone_path)?,
            ],
            outputs,
        },
    )?;
    Ok(rows)
}

fn print_summary(s: &Summary) {
    println!("{:<16} {:>12} {:>12}", "metric", "mean", "std");
    for (k, m) in &s.means {
        println!("{:<16} {:>12.6} {:>12.6}", k, m, s.stds.get(k).copied().unwrap_or(0.0));
    }
    println!("samples: {}  config: {}", s.count, s.config_hash);
}

fn read_config_file(path: Option<&PathBuf>) -> Result<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn dispatch(cli: &Cli, env_seed: Option<&str>) -> Result<()> {
    let file = read_config_file(cli.config.as_ref())?;
    let name = cli.command.name();
    macro_rules! resolved {
        ($keys:expr, $a:expr, $defaults:expr) => {
            resolve(name, $defaults, file.as_ref(), env_seed, to_flags($a)?, $keys)?
        };
    }
    match &cli.command {
        Command::GenData(a) => {
            let cfg: GenDataConfig = resolved!(GEN_DATA_KEYS, a, gen_data_defaults());
            let index = cmd_gen_data(&cfg)?;
            println!("wrote {} samples to {}", index.samples.len(), cfg.out.display());
        }
        Command::TrainCodec(a) => {
            let cfg: TrainCodecConfig = resolved!(TRAIN_CODEC_KEYS, a, train_codec_defaults());
            cmd_train_codec(&cfg)?;
            println!("codec written to {}", cfg.out.join("codec.ckpt").display());
        }
        Command::Train(a) => {
            let cfg: TrainCmdConfig = resolved!(TRAIN_KEYS, a, train_defaults());
            cmd_train(&cfg)?;
            println!("final checkpoint {}", final_checkpoint(&cfg.out, cfg.steps).display());
        }
        Command::Decompose(a) => {
            let cfg: DecomposeConfig = resolved!(DECOMPOSE_KEYS, a, decompose_defaults());
            cmd_decompose(&cfg)?;
            println!("layers written to {}", cfg.out.display());
        }
        Command::Recompose(a) => {
            let cfg: RecomposeConfig = resolved!(RECOMPOSE_KEYS, a, json!({}));
            cmd_recompose(&cfg)?;
            println!("wrote {}", cfg.out.display());
        }
        Command::Eval(a) => {
            let cfg: EvalConfig = resolved!(EVAL_KEYS, a, eval_defaults());
            print_summary(&cmd_eval(&cfg)?);
        }
        Command::Ablate(a) => {
            let cfg: TrainCmdConfig = resolved!(TRAIN_KEYS, &a.train, train_defaults());
            let rows = cmd_ablate(&cfg)?;
            println!("{:<10} {:>9} {:>8} {:>9} {:>10} {:>10}", "ablation", "psnr", "ssim", "lmse", "leak_mean", "loss");
            for r in rows {
                println!(
                    "{:<10} {:>9.3} {:>8.4} {:>9.5} {:>10.5} {:>10.4}",
                    r.ablation.tag(),
                    r.psnr,
                    r.ssim,
                    r.lmse,
                    r.leak_mean,
                    r.final_loss
                );
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match dispatch(&cli, env_seed.as_deref()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
