//! Gradient check of the complete flow-matching loss on a tiny 64-bit model,
//! plus the per-op checks, summarized into one report.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{make_flow_batch, flow_loss_on_tape, Codec, FlowConfig, FlowMode};
use crate::model::{ModelConfig, VelocityNet};
use crate::prompt::{PromptId, VOCAB_SIZE};
use crate::rng::stream;
use crate::synth::sample_triplet;
use crate::tensor::{check_registered_ops, gradient_check_many, GradCheckReport, OpKind, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Input side length in pixels.
    pub size: usize,
    pub batch: usize,
    pub channels: usize,
    pub widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub mode: FlowMode,
    pub use_text: bool,
    pub use_image_concat: bool,
    pub h: f64,
    pub tol: f64,
    /// Name of an op whose backward rule is deliberately broken.
    pub corrupt_op: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 8,
            batch: 2,
            channels: 1,
            widths: vec![4, 8],
            time_embed_dim: 8,
            mode: FlowMode::Deterministic,
            use_text: true,
            use_image_concat: true,
            h: 1e-6,
            tol: 1e-4,
            corrupt_op: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OpError {
    pub op: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckOutcome {
    pub passed: bool,
    pub num_parameters: usize,
    pub full_loss: GradCheckReport,
    /// Parameter holding the worst full-loss coordinate.
    pub worst_parameter: String,
    /// Per-op results, worst first.
    pub ops: Vec<OpError>,
    pub worst_op: &'static str,
    pub seconds: f64,
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckOutcome> {
    let start = Instant::now();
    let fault = match &cfg.corrupt_op {
        None => None,
        Some(name) => Some(
            OpKind::from_name(name)
                .filter(|k| *k != OpKind::Leaf)
                .ok_or_else(|| Error::Config(format!("unknown op `{name}` for corrupt_op")))?,
        ),
    };
    if cfg.batch == 0 || cfg.size == 0 {
        return Err(Error::Config("gradcheck needs a positive batch and size".into()));
    }
    let model = ModelConfig {
        in_channels: cfg.channels,
        use_image_concat: cfg.use_image_concat,
        use_text: cfg.use_text,
        widths: cfg.widths.clone(),
        time_embed_dim: cfg.time_embed_dim,
        vocab_size: VOCAB_SIZE,
    };
    let flow = FlowConfig {
        mode: cfg.mode,
        codec: Codec::IDENTITY,
        ..FlowConfig::default()
    };
    crate::flow::check_compatible(&model, &flow)?;
    let mut net = VelocityNet::<f64>::new(model, cfg.seed)?;
    // move off the zero-initialized output layer so every path carries gradient
    net.perturb(cfg.seed ^ 0x5eed, 0.3);

    let mut samples = Vec::with_capacity(cfg.batch);
    for i in 0..cfg.batch {
        let mut rng = stream(cfg.seed, 0, i as u64);
        let mut t = sample_triplet(&mut rng, cfg.size, cfg.size, cfg.channels, 0.0)?.triplet;
        if i % 2 == 1 {
            t.prompt = PromptId::NULL;
        }
        samples.push(t);
    }
    let batch = make_flow_batch::<f64, _>(&samples, &flow, &mut stream(cfg.seed, 1, 0))?;
    let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
    let values: Vec<Tensor<f64>> = net.params().iter().map(|p| p.value.clone()).collect();
    let full_loss = gradient_check_many(
        |tape, vars| {
            tape.inject_fault(fault);
            flow_loss_on_tape(&net, tape, vars, &batch)
        },
        &values,
        cfg.h,
        cfg.tol,
    )?;

    let mut ops: Vec<OpError> = check_registered_ops(cfg.seed, cfg.h, cfg.tol, fault)?
        .into_iter()
        .map(|c| OpError {
            op: c.op,
            max_rel_err: c.report.max_rel_err,
            passed: c.report.passed,
        })
        .collect();
    ops.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
    let worst_op = ops.first().map(|o| o.op).unwrap_or("none");
    Ok(GradcheckOutcome {
        passed: full_loss.passed && ops.iter().all(|o| o.passed),
        num_parameters: net.num_parameters(),
        worst_parameter: names[full_loss.worst_tensor].clone(),
        full_loss,
        ops,
        worst_op,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_passes_and_corruption_fails() {
        let ok = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert!(ok.passed, "{:?}", ok.full_loss);
        let bad = run_gradcheck(&GradcheckConfig {
            corrupt_op: Some("silu".into()),
            ..Default::default()
        })
        .unwrap();
        assert!(!bad.passed);
        assert!(!bad.full_loss.passed);
        assert_eq!(bad.worst_op, "silu");
    }

    #[test]
    fn unknown_op_is_rejected() {
        let cfg = GradcheckConfig {
            corrupt_op: Some("warp".into()),
            ..Default::default()
        };
        assert!(run_gradcheck(&cfg).is_err());
    }
}
