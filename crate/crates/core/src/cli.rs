//! Command-line front end. Every command resolves its config from defaults,
//! an optional config file and `--set key=value` overrides, writes the
//! resolved config as JSON next to its outputs, then runs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::check::{run_gradcheck, GradcheckConfig, GradcheckOutcome};
use crate::checkpoint::Checkpoint;
use crate::config::{gather, resolve, to_pretty_json};
use crate::dataset::{write_rows, Manifest, ManifestRow};
use crate::error::{Error, Result};
use crate::flow::{infer_batch, FlowConfig, FlowMode, InferOptions};
use crate::metrics::{evaluate_dataset, prediction_path, MetricsReport};
use crate::paip::mix_dataset;
use crate::prompt::PromptId;
use crate::synth::{make_dataset, SynthConfig, SPLITS};
use crate::tensor::Tensor;
use crate::train::{resolve_manifest, run_train, TrainConfig};

pub const CONFIG_ECHO: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "flowseg", version, about = "Flow-matching segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic shape dataset.
    GenData(ConfigArgs),
    /// Write an instance-paired (two-object) copy of a dataset.
    Augment(ConfigArgs),
    /// Train a velocity model.
    Train(ConfigArgs),
    /// Predict masks for a dataset split.
    Infer(ConfigArgs),
    /// Score predictions against ground truth.
    Eval(ConfigArgs),
    /// Check analytic gradients of the training loss.
    Gradcheck(ConfigArgs),
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// `key = value` lines or a JSON object.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set iterations=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve<C: serde::de::DeserializeOwned + Serialize + Default>(&self) -> Result<C> {
        resolve(gather(self.config.as_deref(), &self.sets)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub out_dir: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub resolution: usize,
    pub channels: usize,
    pub two_shape_fraction: f64,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            out_dir: PathBuf::from("data"),
            n_train: s.n_train,
            n_val: s.n_val,
            resolution: s.resolution,
            channels: s.channels,
            two_shape_fraction: s.two_shape_fraction,
            seed: s.seed,
        }
    }
}

impl GenDataConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_train: self.n_train,
            n_val: self.n_val,
            resolution: self.resolution,
            channels: self.channels,
            two_shape_fraction: self.two_shape_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Source manifest or dataset directory.
    pub data: PathBuf,
    pub out_dir: PathBuf,
    /// Only this split; every split when null.
    pub split: Option<String>,
    pub channels: usize,
    pub allow_upscale: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            out_dir: PathBuf::from("data_mixed"),
            split: None,
            channels: 1,
            allow_upscale: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub checkpoint: PathBuf,
    /// Manifest or dataset directory listing the images.
    pub data: PathBuf,
    pub split: Option<String>,
    pub out_dir: PathBuf,
    pub steps: usize,
    /// Schedule shape; defaults to the checkpoint's training distribution.
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// Defaults to the mode the checkpoint was trained with.
    pub mode: Option<FlowMode>,
    /// Prompt id used for every image instead of the manifest's.
    pub prompt: Option<usize>,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("runs/default/model.ckpt"),
            data: PathBuf::from("data"),
            split: Some("val".into()),
            out_dir: PathBuf::from("preds"),
            steps: 2,
            alpha: None,
            beta: None,
            mode: None,
            prompt: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub pred_dir: PathBuf,
    pub data: PathBuf,
    pub split: Option<String>,
    /// Defaults to `<pred_dir>/report.json`.
    pub report: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pred_dir: PathBuf::from("preds"),
            data: PathBuf::from("data"),
            split: Some("val".into()),
            report: None,
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_echo<C: Serialize>(dir: &Path, cfg: &C) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join(CONFIG_ECHO);
    fs::write(&path, to_pretty_json(cfg)?).map_err(|e| Error::io(&path, e))
}

pub fn cmd_gen_data(cfg: &GenDataConfig) -> Result<Manifest> {
    let m = make_dataset(&cfg.synth(), &cfg.out_dir)?;
    write_echo(&cfg.out_dir, cfg)?;
    Ok(m)
}

pub fn cmd_augment(cfg: &AugmentConfig) -> Result<Manifest> {
    let src = Manifest::load(&resolve_manifest(&cfg.data))?;
    let splits: Vec<String> = match &cfg.split {
        Some(s) => vec![s.clone()],
        None => SPLITS.iter().map(|s| s.to_string()).collect(),
    };
    create_dir(&cfg.out_dir)?;
    let mut rows = Vec::new();
    for (si, split) in splits.iter().enumerate() {
        let samples = src.load_split(split, cfg.channels)?;
        if samples.len() < 2 {
            log::warn!("split `{split}` has fewer than two samples, skipped");
            continue;
        }
        for sub in ["images", "masks"] {
            create_dir(&cfg.out_dir.join(split).join(sub))?;
        }
        for (i, m) in mix_dataset(&samples, cfg.allow_upscale, cfg.seed, si as u64)? {
            let image = format!("{split}/images/{i:06}.png");
            let mask = format!("{split}/masks/{i:06}.png");
            m.triplet.image.save(&cfg.out_dir.join(&image))?;
            m.triplet.mask.save(&cfg.out_dir.join(&mask))?;
            rows.push(ManifestRow {
                image,
                mask,
                prompt_id: m.triplet.prompt.0,
                prompt_text: m.triplet.prompt.text(),
                split: split.clone(),
                scene: Some(m.triplet.scene.clone()),
                option: Some(m.option.label().to_string()),
            });
        }
    }
    let path = cfg.out_dir.join("manifest.jsonl");
    write_rows(&path, &rows)?;
    write_echo(&cfg.out_dir, cfg)?;
    Ok(Manifest { path, rows })
}

pub fn cmd_train(cfg: &TrainConfig) -> Result<()> {
    run_train(cfg).map(|_| ())
}

/// Writes one 8-bit grayscale mask per image under `out_dir`, mirroring the
/// manifest's relative image paths. Returns the number of masks written.
pub fn cmd_infer(cfg: &InferConfig) -> Result<usize> {
    let ck = Checkpoint::load(&cfg.checkpoint)?;
    let trained: FlowConfig = match ck.meta.get("flow") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: bad flow metadata: {e}", cfg.checkpoint.display())))?,
        None => FlowConfig::default(),
    };
    let mode = cfg.mode.unwrap_or(trained.mode);
    if mode != trained.mode {
        return Err(Error::Config(format!(
            "checkpoint was trained with {:?} flow, inference asked for {mode:?}",
            trained.mode
        )));
    }
    let prompt_override = cfg.prompt.map(PromptId::new).transpose()?;
    let net = ck.into_net()?;
    let channels = net.config().in_channels;
    let manifest = Manifest::load(&resolve_manifest(&cfg.data))?;
    let rows: Vec<&ManifestRow> = manifest
        .rows
        .iter()
        .filter(|r| cfg.split.as_deref().is_none_or(|s| r.split == s))
        .collect();
    if rows.is_empty() {
        return Err(Error::Config(format!("{} has no rows to infer", manifest.path.display())));
    }
    let opts = InferOptions {
        steps: cfg.steps,
        alpha: cfg.alpha.unwrap_or(trained.t_alpha),
        beta: cfg.beta.unwrap_or(trained.t_beta),
        mode,
        noise_seed: cfg.seed,
    };
    write_echo(&cfg.out_dir, cfg)?;
    for (i, r) in rows.iter().enumerate() {
        let image = crate::raster::Image::load(&manifest.resolve(&r.image), channels)?;
        let prompt = match prompt_override {
            Some(p) => p,
            None => PromptId::new(r.prompt_id)?,
        };
        let o = InferOptions {
            noise_seed: opts.noise_seed.wrapping_add(i as u64),
            ..opts
        };
        let x: Tensor<f32> = image.to_tensor();
        let mask = infer_batch(&net, &x, &[prompt], trained.codec, &o)?.remove(0);
        let out = prediction_path(&cfg.out_dir, &r.image);
        if let Some(parent) = out.parent() {
            create_dir(parent)?;
        }
        mask.save(&out)?;
    }
    Ok(rows.len())
}

pub fn cmd_eval(cfg: &EvalConfig) -> Result<MetricsReport> {
    let manifest = Manifest::load(&resolve_manifest(&cfg.data))?;
    let mut report = evaluate_dataset(&cfg.pred_dir, &manifest, cfg.split.as_deref())?;
    report.config.insert("run".into(), serde_json::to_value(cfg)?);
    let path = cfg.report.clone().unwrap_or_else(|| cfg.pred_dir.join("report.json"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&path, to_pretty_json(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

pub fn cmd_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckOutcome> {
    run_gradcheck(cfg)
}

/// Runs one command; `Ok(false)` means the command ran but its check failed.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => {
            let cfg: GenDataConfig = a.resolve()?;
            log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
            let m = cmd_gen_data(&cfg)?;
            println!("wrote {} samples to {}", m.rows.len(), cfg.out_dir.display());
        }
        Command::Augment(a) => {
            let cfg: AugmentConfig = a.resolve()?;
            log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
            let m = cmd_augment(&cfg)?;
            println!("wrote {} mixed samples to {}", m.rows.len(), cfg.out_dir.display());
        }
        Command::Train(a) => {
            let cfg: TrainConfig = a.resolve()?;
            log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
            cmd_train(&cfg)?;
            println!("checkpoint and history written to {}", cfg.out_dir.display());
        }
        Command::Infer(a) => {
            let cfg: InferConfig = a.resolve()?;
            log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
            let n = cmd_infer(&cfg)?;
            println!("wrote {n} masks to {}", cfg.out_dir.display());
        }
        Command::Eval(a) => {
            let cfg: EvalConfig = a.resolve()?;
            log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
            let r = cmd_eval(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&r.mean)?);
        }
        Command::Gradcheck(a) => {
            let cfg: GradcheckConfig = a.resolve()?;
            log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
            let out = cmd_gradcheck(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
            if !out.passed {
                eprintln!(
                    "gradient check failed: worst op `{}`, full-loss error {:.3e} at `{}`",
                    out.worst_op, out.full_loss.max_rel_err, out.worst_parameter
                );
            }
            return Ok(out.passed);
        }
    }
    Ok(true)
}
