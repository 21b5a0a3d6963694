//! Training loop: batch sampling, optional instance pairing, prompt dropout,
//! AdamW with step halving, and periodic validation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Manifest, Triplet};
use crate::error::{Error, Result};
use crate::flow::{check_compatible, fm_training_step, infer_batch, Codec, FlowConfig, FlowMode, InferOptions};
use crate::metrics;
use crate::model::{ModelConfig, VelocityNet};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::paip::{paip_batch, PaipConfig};
use crate::prompt::{PromptId, VOCAB_SIZE};
use crate::raster::Mask;
use crate::rng::stream;
use crate::tensor::Tensor;

// stream tags, so each consumer of randomness is independent
const TAG_BATCH: u64 = 1;
const TAG_PAIP: u64 = 2;
const TAG_DROPOUT: u64 = 3;
const TAG_FLOW: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Dataset manifest (or the directory containing `manifest.jsonl`).
    pub data: PathBuf,
    pub out_dir: PathBuf,
    /// Image channels the model consumes (1 or 3).
    pub channels: usize,
    pub seed: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub halving_steps: Vec<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub mode: FlowMode,
    pub codec_factor: usize,
    /// Beta law of the training times, also the inference schedule shape.
    /// Mass sits close to t = 1 because for any t < 1 the concatenated image
    /// lets the net read the mask straight off z_t.
    pub t_alpha: f64,
    pub t_beta: f64,
    pub use_text: bool,
    pub use_image_concat: bool,
    pub widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub paip: bool,
    pub paip_fraction: f64,
    pub allow_upscale: bool,
    /// Probability of replacing a sample's prompt by the null prompt.
    pub prompt_dropout: f64,
    /// Validate every this many iterations (0 disables periodic validation).
    pub eval_every: u64,
    pub eval_steps: usize,
    /// At most this many validation samples are scored (0 = all).
    pub eval_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            data: PathBuf::from("data/manifest.jsonl"),
            out_dir: PathBuf::from("runs/default"),
            channels: 1,
            seed: 0,
            iterations: 3000,
            batch_size: 8,
            lr: 1e-3,
            halving_steps: vec![512, 2048, 4096, 8192],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            mode: FlowMode::Deterministic,
            codec_factor: 1,
            t_alpha: 50.0,
            t_beta: 1.0,
            use_text: m.use_text,
            use_image_concat: m.use_image_concat,
            widths: m.widths,
            time_embed_dim: m.time_embed_dim,
            paip: true,
            paip_fraction: 0.5,
            allow_upscale: true,
            prompt_dropout: 0.1,
            eval_every: 250,
            eval_steps: 2,
            eval_limit: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, in_channels: usize) -> ModelConfig {
        ModelConfig {
            in_channels,
            use_image_concat: self.use_image_concat,
            use_text: self.use_text,
            widths: self.widths.clone(),
            time_embed_dim: self.time_embed_dim,
            vocab_size: VOCAB_SIZE,
        }
    }

    pub fn flow_config(&self) -> Result<FlowConfig> {
        Ok(FlowConfig {
            mode: self.mode,
            codec: Codec::avg_pool(self.codec_factor)?,
            t_alpha: self.t_alpha,
            t_beta: self.t_beta,
        })
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn paip_config(&self) -> PaipConfig {
        PaipConfig {
            enabled_fraction: if self.paip { self.paip_fraction } else { 0.0 },
            allow_upscale: self.allow_upscale,
        }
    }

    pub fn infer_options(&self) -> InferOptions {
        InferOptions {
            steps: self.eval_steps,
            alpha: self.t_alpha,
            beta: self.t_beta,
            mode: self.mode,
            noise_seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.paip && self.paip_fraction > 0.0 && self.batch_size < 2 {
            return Err(Error::Config("paip needs batch_size >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.paip_fraction) || !(0.0..=1.0).contains(&self.prompt_dropout) {
            return Err(Error::Config("paip_fraction and prompt_dropout must lie in [0, 1]".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.halving_steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("halving_steps must be strictly increasing".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.eval_steps == 0 {
            return Err(Error::Config("eval_steps must be at least 1".into()));
        }
        self.model_config(self.channels).validate()?;
        check_compatible(&self.model_config(self.channels), &self.flow_config()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValScores {
    pub mae: f64,
    pub f_max: f64,
    pub f_weighted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    /// Validation after this iteration's update, when scheduled.
    pub val: Option<ValScores>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("iteration,loss,lr,val_mae,val_fmax,val_fw\n");
    for r in rows {
        let (a, b, c) = match &r.val {
            Some(v) => (v.mae.to_string(), v.f_max.to_string(), v.f_weighted.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        s.push_str(&format!("{},{},{},{a},{b},{c}\n", r.iteration, r.loss, r.lr));
    }
    s
}

/// Mean MAE, max F and weighted F of inferred masks on `samples`.
pub fn validate_net(
    net: &VelocityNet<f32>,
    samples: &[Triplet],
    codec: Codec,
    opts: &InferOptions,
) -> Result<ValScores> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no validation samples".into()));
    }
    let preds = predict_masks(net, samples, codec, opts)?;
    let (mut mae, mut fmax, mut fw, mut n_fw) = (0.0, 0.0, 0.0, 0usize);
    for (p, s) in preds.iter().zip(samples) {
        mae += metrics::mae(p, &s.mask)?;
        fmax += metrics::f_max(p, &s.mask, metrics::FMAX_BETA_SQ)?;
        if let Ok(v) = metrics::f_weighted(p, &s.mask) {
            fw += v;
            n_fw += 1;
        }
    }
    let n = samples.len() as f64;
    Ok(ValScores {
        mae: mae / n,
        f_max: fmax / n,
        f_weighted: if n_fw == 0 { 0.0 } else { fw / n_fw as f64 },
    })
}

/// Inference over `samples` in chunks, using each sample's own prompt.
pub fn predict_masks(
    net: &VelocityNet<f32>,
    samples: &[Triplet],
    codec: Codec,
    opts: &InferOptions,
) -> Result<Vec<Mask>> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(samples.len());
    for (ci, chunk) in samples.chunks(CHUNK).enumerate() {
        let images = Tensor::stack_batch(&chunk.iter().map(|s| s.image.to_tensor::<f32>()).collect::<Vec<_>>())?;
        let prompts: Vec<PromptId> = chunk.iter().map(|s| s.prompt).collect();
        let o = InferOptions {
            noise_seed: opts.noise_seed.wrapping_add(ci as u64),
            ..*opts
        };
        out.extend(infer_batch(net, &images, &prompts, codec, &o)?);
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub net: VelocityNet<f32>,
    pub history: Vec<HistoryRow>,
}

/// Trains from an initialization seeded by `cfg.seed`. `on_row` sees every
/// history row as it is produced.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Triplet],
    val_set: &[Triplet],
    mut on_row: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let channels = first.image.channels;
    let flow = cfg.flow_config()?;
    let mut net = VelocityNet::<f32>::new(cfg.model_config(channels), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer(), net.params());
    let paip = cfg.paip_config();
    let val: &[Triplet] = if cfg.eval_limit > 0 && val_set.len() > cfg.eval_limit {
        &val_set[..cfg.eval_limit]
    } else {
        val_set
    };
    let bs = cfg.batch_size.min(train_set.len());
    if paip.enabled_fraction > 0.0 && bs < 2 {
        return Err(Error::Config("paip needs at least two training samples per batch".into()));
    }

    let mut history = Vec::with_capacity(cfg.iterations as usize);
    for it in 0..cfg.iterations {
        let mut rng = stream(cfg.seed, TAG_BATCH, it);
        let idx = sample(&mut rng, train_set.len(), bs);
        let mut batch: Vec<Triplet> = idx.iter().map(|i| train_set[i].clone()).collect();
        if paip.enabled_fraction > 0.0 {
            batch = paip_batch(&batch, &paip, cfg.seed ^ TAG_PAIP, it)?.0;
        }
        if net.config().use_text && cfg.prompt_dropout > 0.0 {
            let mut rng = stream(cfg.seed, TAG_DROPOUT, it);
            for s in &mut batch {
                if rng.gen_bool(cfg.prompt_dropout) {
                    s.prompt = PromptId::NULL;
                }
            }
        }
        let lr = lr_at(it, cfg.lr, &cfg.halving_steps);
        let loss = fm_training_step(&mut net, &batch, &flow, &mut stream(cfg.seed, TAG_FLOW, it))?;
        if !loss.is_finite() {
            return Err(Error::Optimizer(format!("loss diverged at iteration {it}")));
        }
        opt.step_with_lr(net.params_mut(), lr)?;
        let done = it + 1;
        let scheduled = cfg.eval_every > 0 && done % cfg.eval_every == 0;
        let val_scores = if !val.is_empty() && (scheduled || done == cfg.iterations) {
            Some(validate_net(&net, val, flow.codec, &cfg.infer_options())?)
        } else {
            None
        };
        let row = HistoryRow {
            iteration: it,
            loss,
            lr,
            val: val_scores,
        };
        on_row(&row);
        history.push(row);
    }
    Ok(TrainOutcome { net, history })
}

pub fn resolve_manifest(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.jsonl")
    } else {
        data.to_path_buf()
    }
}

/// Loads the dataset, trains and writes `model.ckpt`, `history.csv` and
/// `config.json` under `cfg.out_dir`.
pub fn run_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::load(&resolve_manifest(&cfg.data))?;
    let train_set = manifest.load_split("train", cfg.channels)?;
    let val_set = manifest.load_split("val", cfg.channels)?;
    if train_set.is_empty() {
        return Err(Error::Config(format!("{} has no training rows", manifest.path.display())));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let cfg_path = cfg.out_dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;

    let hist_path = cfg.out_dir.join("history.csv");
    let mut hist = fs::File::create(&hist_path).map_err(|e| Error::io(&hist_path, e))?;
    hist.write_all(b"iteration,loss,lr,val_mae,val_fmax,val_fw\n")
        .map_err(|e| Error::io(&hist_path, e))?;
    let mut write_err = None;
    let outcome = train(cfg, &train_set, &val_set, |row| {
        let line = history_csv(std::slice::from_ref(row));
        let body = line.split_once('\n').map(|(_, b)| b).unwrap_or("");
        if let Err(e) = hist.write_all(body.as_bytes()) {
            write_err.get_or_insert(e);
        }
        if let Some(v) = &row.val {
            log::info!(
                "iter {} loss {:.5} lr {:.2e} val mae {:.4} fmax {:.4} fw {:.4}",
                row.iteration,
                row.loss,
                row.lr,
                v.mae,
                v.f_max,
                v.f_weighted
            );
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&hist_path, e));
    }
    let meta = serde_json::json!({
        "flow": cfg.flow_config()?,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
    });
    Checkpoint::from_net(&outcome.net, meta).save(&cfg.out_dir.join("model.ckpt"))?;
    Ok(outcome)
}
