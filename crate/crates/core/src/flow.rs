//! Flow-matching mathematics: the image-to-mask interpolation path, target
//! velocity, Beta timesteps, the training loss and Euler inference.

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Triplet;
use crate::error::{Error, Result};
use crate::model::VelocityNet;
use crate::prompt::PromptId;
use crate::raster::{Image, Mask};
use crate::special::beta_inverse_cdf;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    /// The flow starts at the encoded image.
    Deterministic,
    /// The flow starts at Gaussian noise; the image is still concatenated.
    Denoising,
}

impl std::str::FromStr for FlowMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(Self::Deterministic),
            "denoising" => Ok(Self::Denoising),
            _ => Err(Error::Config(format!("unknown flow mode `{s}` (deterministic|denoising)"))),
        }
    }
}

/// Encoder/decoder pair between pixels and the flow space: identity for
/// `factor == 1`, otherwise `factor x factor` average pooling with a
/// nearest-neighbour decode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codec {
    pub factor: usize,
}

impl Codec {
    pub const IDENTITY: Codec = Codec { factor: 1 };

    pub fn avg_pool(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("codec factor must be at least 1".into()));
        }
        Ok(Self { factor })
    }

    pub fn is_identity(&self) -> bool {
        self.factor == 1
    }

    /// `[n, c, h, w] -> [n, c, h / k, w / k]`.
    pub fn encode<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.factor;
        if k == 1 {
            return Ok(x.clone());
        }
        let &[n, c, h, w] = x.shape() else {
            return Err(Error::bad_shape("codec_encode", format!("expected [n, c, h, w], got {:?}", x.shape())));
        };
        if h % k != 0 || w % k != 0 {
            return Err(Error::bad_shape("codec_encode", format!("{h}x{w} not divisible by {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let norm = T::of(1.0 / (k * k) as f64);
        let src = x.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * oh + y / k) * ow + xx / k] += src[(p * h + y) * w + xx] * norm;
                }
            }
        }
        Tensor::new(&[n, c, oh, ow], out)
    }

    /// Nearest-neighbour upsampling back to `h x w`.
    pub fn decode<T: Scalar>(&self, z: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let k = self.factor;
        let &[n, c, zh, zw] = z.shape() else {
            return Err(Error::bad_shape("codec_decode", format!("expected [n, c, h, w], got {:?}", z.shape())));
        };
        if zh * k != h || zw * k != w {
            return Err(Error::bad_shape("codec_decode", format!("{zh}x{zw} latent does not decode to {h}x{w}")));
        }
        if k == 1 {
            return Ok(z.clone());
        }
        let src = z.data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    out.push(src[(p * zh + y / k) * zw + x / k]);
                }
            }
        }
        Tensor::new(&[n, c, h, w], out)
    }
}

/// Inference timesteps, stored ascending: `steps[0] = 0`, `steps[n] = 1`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimeSchedule {
    steps: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl TimeSchedule {
    /// Number of integration steps.
    pub fn n(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Builds a schedule from arbitrary points; they must rise strictly from 0 to 1.
    pub fn from_steps(steps: Vec<f64>) -> Result<Self> {
        if steps.len() < 2 || steps[0] != 0.0 || *steps.last().unwrap() != 1.0 {
            return Err(Error::InvalidArgument("schedule must run from 0 to 1 with at least one step".into()));
        }
        if steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("schedule must be strictly increasing".into()));
        }
        Ok(Self {
            steps,
            alpha: f64::NAN,
            beta: f64::NAN,
        })
    }
}

/// `(1 - t) z_m + t z_i`.
pub fn interpolate<T: Scalar>(z_m: &Tensor<T>, z_i: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_time(t)?;
    let (a, b) = (T::of(1.0 - t), T::of(t));
    z_m.zip_map(z_i, "interpolate", |m, i| a * m + b * i)
}

/// `z_i - z_m`; the path's velocity, constant in time.
pub fn target_velocity<T: Scalar>(z_i: &Tensor<T>, z_m: &Tensor<T>) -> Result<Tensor<T>> {
    z_i.sub(z_m)
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

/// One Beta(alpha, beta) draw by inverting the CDF at an open-interval uniform.
pub fn sample_train_t<R: Rng + ?Sized>(rng: &mut R, alpha: f64, beta: f64) -> Result<f64> {
    let u: f64 = rng.sample(Open01);
    beta_inverse_cdf(u, alpha, beta)
}

/// Equidistant quantiles `i / n` mapped through the inverse Beta CDF.
pub fn build_schedule(n: usize, alpha: f64, beta: f64) -> Result<TimeSchedule> {
    if n < 1 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    let steps = (0..=n)
        .map(|i| beta_inverse_cdf(i as f64 / n as f64, alpha, beta))
        .collect::<Result<Vec<_>>>()?;
    Ok(TimeSchedule { steps, alpha, beta })
}

/// Anything that can play the role of `v(z_t, z_I, t, prompt)` on a batch.
pub trait VelocityField<T: Scalar> {
    fn velocity(&self, z_t: &Tensor<T>, z_i: &Tensor<T>, times: &[f64], prompts: &[PromptId]) -> Result<Tensor<T>>;
}

impl<T: Scalar> VelocityField<T> for VelocityNet<T> {
    fn velocity(&self, z_t: &Tensor<T>, z_i: &Tensor<T>, times: &[f64], prompts: &[PromptId]) -> Result<Tensor<T>> {
        self.predict(z_t, z_i, times, prompts)
    }
}

/// A field that ignores its inputs and returns a fixed tensor.
#[derive(Clone, Debug)]
pub struct ConstantField<T>(pub Tensor<T>);

impl<T: Scalar> VelocityField<T> for ConstantField<T> {
    fn velocity(&self, z_t: &Tensor<T>, _: &Tensor<T>, _: &[f64], _: &[PromptId]) -> Result<Tensor<T>> {
        if z_t.shape() != self.0.shape() {
            return Err(Error::shape("constant_field", z_t.shape(), self.0.shape()));
        }
        Ok(self.0.clone())
    }
}

/// Wraps a closure `(z_t, t) -> v` as a field.
pub struct FnField<F>(pub F);

impl<T: Scalar, F: Fn(&Tensor<T>, f64) -> Tensor<T>> VelocityField<T> for FnField<F> {
    fn velocity(&self, z_t: &Tensor<T>, _: &Tensor<T>, times: &[f64], _: &[PromptId]) -> Result<Tensor<T>> {
        Ok((self.0)(z_t, times[0]))
    }
}

/// Backward Euler from `t = 1` (starting at `z_i`) down to `t = 0`.
pub fn euler_integrate<T: Scalar, V: VelocityField<T> + ?Sized>(
    field: &V,
    z_i: &Tensor<T>,
    sched: &TimeSchedule,
    prompts: &[PromptId],
) -> Result<Tensor<T>> {
    euler_integrate_from(field, z_i.clone(), z_i, sched, prompts)
}

/// Backward Euler from an arbitrary state at `t = 1`, with `z_i` as the conditioning image.
pub fn euler_integrate_from<T: Scalar, V: VelocityField<T> + ?Sized>(
    field: &V,
    start: Tensor<T>,
    z_i: &Tensor<T>,
    sched: &TimeSchedule,
    prompts: &[PromptId],
) -> Result<Tensor<T>> {
    let batch = start.shape()[0];
    let mut z = start;
    let s = sched.steps();
    for n in (0..sched.n()).rev() {
        let (t_next, t_n) = (s[n + 1], s[n]);
        let v = field.velocity(&z, z_i, &vec![t_next; batch], prompts)?;
        let dt = T::of(t_n - t_next);
        z = z.zip_map(&v, "euler_step", |a, b| a + b * dt)?;
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferOptions {
    pub steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub mode: FlowMode,
    /// Seed for the starting noise in denoising mode.
    pub noise_seed: u64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            steps: 2,
            alpha: 2.5,
            beta: 1.0,
            mode: FlowMode::Deterministic,
            noise_seed: 0,
        }
    }
}

/// Runs inference on a batch of images `[n, c, h, w]` and returns the
/// decoded, channel-averaged and clipped masks.
pub fn infer_batch<T: Scalar, V: VelocityField<T> + ?Sized>(
    field: &V,
    images: &Tensor<T>,
    prompts: &[PromptId],
    codec: Codec,
    opts: &InferOptions,
) -> Result<Vec<Mask>> {
    if opts.steps < 1 {
        return Err(Error::InvalidArgument("inference needs at least one step".into()));
    }
    if images.data().iter().any(|v| !(T::zero()..=T::one()).contains(v)) {
        return Err(Error::InvalidArgument("image values outside [0, 1]".into()));
    }
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::bad_shape("infer", format!("expected [n, c, h, w], got {:?}", images.shape())));
    };
    let z_i = codec.encode(images)?;
    let sched = build_schedule(opts.steps, opts.alpha, opts.beta)?;
    let start = match opts.mode {
        FlowMode::Deterministic => z_i.clone(),
        FlowMode::Denoising => gaussian_like(&z_i, &mut ChaCha8Rng::seed_from_u64(opts.noise_seed)),
    };
    let z0 = euler_integrate_from(field, start, &z_i, &sched, prompts)?;
    let decoded = codec.decode(&z0, h, w)?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let img = Image::new(w, h, c, decoded.batch_item(i)?.data().iter().map(|v| v.as_f64() as f32).collect())?;
        let mut m = img.grayscale();
        m.clip_unit();
        out.push(m);
    }
    Ok(out)
}

pub fn infer_mask<T: Scalar, V: VelocityField<T> + ?Sized>(
    field: &V,
    image: &Image,
    prompt: PromptId,
    codec: Codec,
    opts: &InferOptions,
) -> Result<Mask> {
    let mut masks = infer_batch(field, &image.to_tensor(), &[prompt], codec, opts)?;
    Ok(masks.remove(0))
}

fn gaussian_like<T: Scalar, R: Rng>(like: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    let data = (0..like.numel()).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(like.shape(), data).expect("same shape as a valid tensor")
}

/// Inputs and regression target of one flow-matching step.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch<T> {
    pub z_t: Tensor<T>,
    pub z_i: Tensor<T>,
    pub target: Tensor<T>,
    pub times: Vec<f64>,
    pub prompts: Vec<PromptId>,
}

/// `z_t = (1 - t) z_m + t src`, target `src - z_m`, per sample. `src` is
/// `z_i` for deterministic flow or noise for the denoising baseline.
pub fn assemble_batch<T: Scalar>(
    z_i: &[Tensor<T>],
    z_m: &[Tensor<T>],
    src: &[Tensor<T>],
    times: &[f64],
    prompts: &[PromptId],
) -> Result<FlowBatch<T>> {
    let n = z_i.len();
    if n == 0 || z_m.len() != n || src.len() != n || times.len() != n || prompts.len() != n {
        return Err(Error::InvalidArgument("flow batch parts must be non-empty and equally long".into()));
    }
    let mut zt = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    for i in 0..n {
        if z_i[i].shape() != z_m[i].shape() {
            return Err(Error::shape("flow_batch", z_i[i].shape(), z_m[i].shape()));
        }
        zt.push(interpolate(&z_m[i], &src[i], times[i])?);
        target.push(target_velocity(&src[i], &z_m[i])?);
    }
    Ok(FlowBatch {
        z_t: Tensor::stack_batch(&zt)?,
        z_i: Tensor::stack_batch(z_i)?,
        target: Tensor::stack_batch(&target)?,
        times: times.to_vec(),
        prompts: prompts.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub mode: FlowMode,
    pub codec: Codec,
    pub t_alpha: f64,
    pub t_beta: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            mode: FlowMode::Deterministic,
            codec: Codec::IDENTITY,
            t_alpha: 2.5,
            t_beta: 1.0,
        }
    }
}

/// Draws times (and noise in denoising mode) for `batch` and assembles the
/// step inputs. Draw order per sample: `t`, then the noise tensor.
pub fn make_flow_batch<T: Scalar, R: Rng>(
    batch: &[Triplet],
    cfg: &FlowConfig,
    rng: &mut R,
) -> Result<FlowBatch<T>> {
    let mut z_i = Vec::with_capacity(batch.len());
    let mut z_m = Vec::with_capacity(batch.len());
    let mut src = Vec::with_capacity(batch.len());
    let mut times = Vec::with_capacity(batch.len());
    for s in batch {
        if (s.mask.width, s.mask.height) != (s.image.width, s.image.height) {
            return Err(Error::bad_shape(
                "flow_batch",
                format!("mask {}x{} for image {}x{}", s.mask.width, s.mask.height, s.image.width, s.image.height),
            ));
        }
        let zi = cfg.codec.encode(&s.image.to_tensor::<T>())?;
        let zm = cfg.codec.encode(&s.mask.to_tensor::<T>(s.image.channels))?;
        times.push(sample_train_t(rng, cfg.t_alpha, cfg.t_beta)?);
        src.push(match cfg.mode {
            FlowMode::Deterministic => zi.clone(),
            FlowMode::Denoising => gaussian_like(&zi, rng),
        });
        z_i.push(zi);
        z_m.push(zm);
    }
    let prompts: Vec<PromptId> = batch.iter().map(|s| s.prompt).collect();
    assemble_batch(&z_i, &z_m, &src, &times, &prompts)
}

/// Records `mse(v(z_t, z_i, t, c), target)` on `tape`.
pub fn flow_loss_on_tape<T: Scalar>(
    net: &VelocityNet<T>,
    tape: &mut Tape<T>,
    params: &[Var],
    batch: &FlowBatch<T>,
) -> Result<Var> {
    let zt = tape.constant(batch.z_t.clone());
    let zi = tape.constant(batch.z_i.clone());
    let target = tape.constant(batch.target.clone());
    let pred = net.forward(tape, params, zt, zi, &batch.times, &batch.prompts)?;
    tape.mse(pred, target)
}

/// Loss of an arbitrary field on an assembled batch, without gradients.
pub fn flow_loss<T: Scalar, V: VelocityField<T> + ?Sized>(field: &V, batch: &FlowBatch<T>) -> Result<f64> {
    let v = field.velocity(&batch.z_t, &batch.z_i, &batch.times, &batch.prompts)?;
    let n = v.numel() as f64;
    let d = v.sub(&batch.target)?;
    Ok(d.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>() / n)
}

pub fn check_compatible(net_cfg: &crate::model::ModelConfig, flow: &FlowConfig) -> Result<()> {
    if flow.mode == FlowMode::Denoising && !net_cfg.use_image_concat {
        return Err(Error::Config(
            "denoising flow needs use_image_concat = true: the image is the only conditioning".into(),
        ));
    }
    Ok(())
}

/// One forward/backward pass: draws a flow batch, accumulates parameter
/// gradients into `net` and returns the loss.
pub fn fm_training_step<T: Scalar, R: Rng>(
    net: &mut VelocityNet<T>,
    batch: &[Triplet],
    cfg: &FlowConfig,
    rng: &mut R,
) -> Result<f64> {
    check_compatible(net.config(), cfg)?;
    if batch.iter().any(|s| s.image.channels != net.config().in_channels) {
        return Err(Error::Config(format!(
            "model expects {} channels, batch images differ",
            net.config().in_channels
        )));
    }
    let fb = make_flow_batch(batch, cfg, rng)?;
    let mut tape = Tape::new();
    let params = net.params().bind(&mut tape, true);
    let loss = flow_loss_on_tape(net, &mut tape, &params, &fb)?;
    tape.backward(loss)?;
    net.params_mut().accumulate_grads(&tape, &params)?;
    Ok(tape.value(loss)?.item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn interpolation_endpoints() {
        let zm = t(&[3], &[0.0, 1.0, 0.5]);
        let zi = t(&[3], &[2.0, -1.0, 0.25]);
        assert_eq!(interpolate(&zm, &zi, 0.0).unwrap(), zm);
        assert_eq!(interpolate(&zm, &zi, 1.0).unwrap(), zi);
        let mid = interpolate(&t(&[1], &[0.0]), &t(&[1], &[2.0]), 0.5).unwrap();
        assert_eq!(mid.data(), &[1.0]);
        assert!(interpolate(&zm, &zi, 1.1).is_err());
    }

    #[test]
    fn velocity_matches_time_derivative() {
        let zm = t(&[3], &[0.0, 1.0, 0.5]);
        let zi = t(&[3], &[2.0, -1.0, 0.25]);
        let v = target_velocity(&zi, &zm).unwrap();
        let h = 1e-6;
        let a = interpolate(&zm, &zi, 0.4 + h).unwrap();
        let b = interpolate(&zm, &zi, 0.4 - h).unwrap();
        for i in 0..3 {
            let fd = (a.data()[i] - b.data()[i]) / (2.0 * h);
            assert!((fd - v.data()[i]).abs() < 1e-9);
        }
        assert!(target_velocity(&zi, &zi).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn schedules() {
        assert_eq!(build_schedule(1, 2.5, 1.0).unwrap().steps(), &[0.0, 1.0]);
        let u = build_schedule(4, 1.0, 1.0).unwrap();
        for (a, b) in u.steps().iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((a - b).abs() < 1e-11);
        }
        let s = build_schedule(2, 2.5, 1.0).unwrap();
        assert!((s.steps()[1] - 0.757858).abs() < 1e-6);
        assert!(build_schedule(0, 2.5, 1.0).is_err());
    }

    #[test]
    fn codec_round_trip() {
        let x = t(&[1, 1, 2, 4], &[0.0, 1.0, 0.5, 0.5, 1.0, 0.0, 0.5, 0.5]);
        let id = Codec::IDENTITY;
        assert_eq!(id.decode(&id.encode(&x).unwrap(), 2, 4).unwrap(), x);
        let p = Codec::avg_pool(2).unwrap();
        let z = p.encode(&x).unwrap();
        assert_eq!(z.data(), &[0.5, 0.5]);
        assert_eq!(p.decode(&z, 2, 4).unwrap().data(), &[0.5; 8]);
    }

    #[test]
    fn single_step_formula() {
        let zi = t(&[1, 1, 1, 2], &[0.7, 0.2]);
        let v = t(&[1, 1, 1, 2], &[0.3, -0.5]);
        let s = build_schedule(1, 2.5, 1.0).unwrap();
        let out = euler_integrate(&ConstantField(v.clone()), &zi, &s, &[PromptId::NULL]).unwrap();
        assert_eq!(out, zi.sub(&v).unwrap());
    }

    #[test]
    fn denoising_needs_concat() {
        let cfg = crate::model::ModelConfig {
            use_image_concat: false,
            ..Default::default()
        };
        let flow = FlowConfig {
            mode: FlowMode::Denoising,
            ..Default::default()
        };
        assert!(check_compatible(&cfg, &flow).is_err());
    }
}
