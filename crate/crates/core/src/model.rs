//! Conditional convolutional velocity network `v(z_t, z_I, t, prompt)`.
//!
//! A small encoder/decoder with skip connections. The time embedding and the
//! prompt embedding are summed into one conditioning vector which modulates
//! every stage through per-channel scale and shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::prompt::{PromptId, VOCAB_SIZE};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels of `z_t` (and of `z_I`).
    pub in_channels: usize,
    pub use_image_concat: bool,
    pub use_text: bool,
    pub widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            use_image_concat: true,
            use_text: true,
            widths: vec![16, 32, 64],
            time_embed_dim: 64,
            vocab_size: VOCAB_SIZE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("widths must be non-empty and positive, got {:?}", self.widths)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time_embed_dim must be even, got {}", self.time_embed_dim)));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_in_channels(&self) -> usize {
        self.in_channels * if self.use_image_concat { 2 } else { 1 }
    }

    /// Spatial dims must be multiples of this.
    pub fn size_factor(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

/// Sinusoidal features `[sin(t f_0) .. sin(t f_{d/2-1}), cos(t f_0) ..]` with
/// `f_i = 1000^(2i/d)`, so the slowest frequency is 1 rad per unit time.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("embedding dim must be even, got {dim}")));
    }
    let freqs = time_frequencies(dim);
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    Ok(out)
}

pub fn time_frequencies(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half)
        .map(|i| (1000f64.ln() * i as f64 / half as f64).exp())
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct EncStage {
    down: Conv,
    film: Linear,
    conv: Conv,
}

#[derive(Clone, Debug)]
struct DecStage {
    up: Conv,
    fuse: Conv,
    film: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    time_in: Linear,
    prompt_table: ParamId,
    time_out: Linear,
    enc: Vec<EncStage>,
    global: Linear,
    /// `dec[i]` produces resolution level `i`, for `i < widths.len() - 1`.
    dec: Vec<DecStage>,
    out: Conv,
    /// Direct path from the network input to the output.
    skip: Conv,
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.gen_range(-bound..=bound))).collect();
        Tensor::new(shape, data).expect("valid shape")
    }
}

#[derive(Clone, Debug)]
pub struct VelocityNet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> VelocityNet<T> {
    /// Random initialization. The output and input-skip convolutions and the
    /// input weights reading the concatenated image channels start at zero, so
    /// the initial velocity is identically zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut params = ParamStore::new();
        let e = config.time_embed_dim;

        let linear = |params: &mut ParamStore<T>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, gain: f64| {
            let w = params.add(format!("{name}.weight"), init.uniform(&[fan_in, fan_out], gain * (3.0 / fan_in as f64).sqrt()));
            let b = params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
            Linear { w, b }
        };
        let conv = |params: &mut ParamStore<T>, init: &mut Init, name: &str, cin: usize, cout: usize| {
            let w = params.add(format!("{name}.weight"), init.uniform(&[cout, cin, 3, 3], (6.0 / (9 * cin) as f64).sqrt()));
            let b = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
            Conv { w, b }
        };

        let time_in = linear(&mut params, &mut init, "time_in", e, e, 1.0);
        let prompt_table = params.add("prompt_table", init.uniform(&[config.vocab_size, e], 1.0));
        let time_out = linear(&mut params, &mut init, "time_out", e, e, 1.0);

        let widths = config.widths.clone();
        let mut enc = Vec::new();
        let mut cin = config.effective_in_channels();
        for (i, &w) in widths.iter().enumerate() {
            let down = conv(&mut params, &mut init, &format!("enc{i}.down"), cin, w);
            let film = linear(&mut params, &mut init, &format!("enc{i}.film"), e, 2 * w, 0.1);
            let c = conv(&mut params, &mut init, &format!("enc{i}.conv"), w, w);
            enc.push(EncStage { down, film, conv: c });
            cin = w;
        }
        let last = *widths.last().expect("validated non-empty");
        let global = linear(&mut params, &mut init, "global", last, e, 1.0);
        let mut dec = Vec::new();
        for i in 0..widths.len() - 1 {
            let up = conv(&mut params, &mut init, &format!("dec{i}.up"), widths[i + 1], widths[i]);
            let fuse = conv(&mut params, &mut init, &format!("dec{i}.fuse"), 2 * widths[i], widths[i]);
            let film = linear(&mut params, &mut init, &format!("dec{i}.film"), e, 2 * widths[i], 0.1);
            dec.push(DecStage { up, fuse, film });
        }
        let out = conv(&mut params, &mut init, "out", widths[0], config.in_channels);
        let skip = conv(&mut params, &mut init, "skip", config.effective_in_channels(), config.in_channels);

        for film in enc.iter().map(|s| s.film).chain(dec.iter().map(|s| s.film)) {
            let b = params.get_mut(film.b);
            let c = b.value.numel() / 2;
            b.value.data_mut()[..c].fill(T::one());
        }
        for id in [out.w, out.b, skip.w, skip.b] {
            params.get_mut(id).value.data_mut().fill(T::zero());
        }
        if config.use_image_concat {
            let w = params.get_mut(enc[0].down.w);
            let (cout, cin_eff) = (w.value.shape()[0], w.value.shape()[1]);
            let per = 9;
            for co in 0..cout {
                for ci in config.in_channels..cin_eff {
                    let off = (co * cin_eff + ci) * per;
                    w.value.data_mut()[off..off + per].fill(T::zero());
                }
            }
        }

        Ok(Self {
            config,
            params,
            layout: Layout {
                time_in,
                prompt_table,
                time_out,
                enc,
                global,
                dec,
                out,
                skip,
            },
        })
    }

    /// Rebuilds a network from a config and a parameter store whose names and
    /// shapes must match the layout the config implies.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if net.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "model config expects {} parameters, checkpoint has {}",
                net.params.len(),
                params.len()
            )));
        }
        for (want, got) in net.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model expects `{}` {:?}, checkpoint has `{}` {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameter names grouped by layer prefix (text before the last `.`).
    pub fn parameter_groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = Vec::new();
        for p in self.params.iter() {
            let g = p.name.rsplit_once('.').map(|(g, _)| g).unwrap_or(&p.name).to_string();
            if !groups.contains(&g) {
                groups.push(g);
            }
        }
        groups
    }

    /// Adds uniform noise in `[-scale, scale]` to every parameter.
    pub fn perturb(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += T::of(rng.gen_range(-scale..=scale));
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> VelocityNet<U> {
        VelocityNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_inputs(&self, zt: &[usize], zi: &[usize], batch: usize, prompts: usize) -> Result<()> {
        if zt.len() != 4 || zt[1] != self.config.in_channels {
            return Err(Error::bad_shape(
                "velocity_forward",
                format!("z_t must be [n, {}, h, w], got {zt:?}", self.config.in_channels),
            ));
        }
        if zt != zi {
            return Err(Error::shape("velocity_forward", zt, zi));
        }
        let f = self.config.size_factor();
        if !zt[2].is_multiple_of(f) || !zt[3].is_multiple_of(f) {
            return Err(Error::bad_shape(
                "velocity_forward",
                format!("spatial size {}x{} not divisible by {f}", zt[2], zt[3]),
            ));
        }
        if batch != zt[0] || prompts != zt[0] {
            return Err(Error::bad_shape(
                "velocity_forward",
                format!("batch of {} with {batch} times and {prompts} prompts", zt[0]),
            ));
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape<T>, p: &[Var], x: Var, l: Linear) -> Result<Var> {
        let y = tape.matmul(x, p[l.w.0])?;
        tape.add_row_bias(y, p[l.b.0])
    }

    fn conv(&self, tape: &mut Tape<T>, p: &[Var], x: Var, c: Conv, stride: usize) -> Result<Var> {
        tape.conv2d(x, p[c.w.0], p[c.b.0], stride)
    }

    fn film(&self, tape: &mut Tape<T>, p: &[Var], x: Var, cond: Var, l: Linear) -> Result<Var> {
        let c = tape.shape(x)?[1];
        let ss = self.linear(tape, p, cond, l)?;
        let scale = tape.slice_cols(ss, 0, c)?;
        let shift = tape.slice_cols(ss, c, c)?;
        tape.channel_affine(x, scale, shift)
    }

    /// Records the forward pass on `tape`. `params` are the vars returned by
    /// binding this network's parameter store to the same tape.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        z_t: Var,
        z_i: Var,
        times: &[f64],
        prompts: &[PromptId],
    ) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bound parameters for a network with {}",
                params.len(),
                self.params.len()
            )));
        }
        let zt_shape = tape.shape(z_t)?.to_vec();
        self.check_inputs(&zt_shape, tape.shape(z_i)?, times.len(), prompts.len())?;
        let n = zt_shape[0];
        let e = self.config.time_embed_dim;
        let p = params;
        let l = &self.layout;

        let mut temb = Vec::with_capacity(n * e);
        for &t in times {
            temb.extend(time_embedding(t, e)?);
        }
        let temb = tape.constant(Tensor::from_f64(&[n, e], &temb)?);
        let rows: Vec<usize> = prompts
            .iter()
            .map(|&c| {
                if c.0 >= self.config.vocab_size {
                    return Err(Error::InvalidArgument(format!("prompt id {} outside vocabulary", c.0)));
                }
                Ok(if self.config.use_text { c.0 } else { PromptId::NULL.0 })
            })
            .collect::<Result<_>>()?;

        let h = self.linear(tape, p, temb, l.time_in)?;
        let emb = tape.gather(p[l.prompt_table.0], &rows)?;
        let h = tape.add(h, emb)?;
        let h = tape.silu(h)?;
        let cond = self.linear(tape, p, h, l.time_out)?;
        let cond = tape.silu(cond)?;

        let input = if self.config.use_image_concat {
            tape.concat_channels(z_t, z_i)?
        } else {
            z_t
        };
        let mut x = input;
        let mut skips = Vec::with_capacity(l.enc.len());
        for (i, st) in l.enc.iter().enumerate() {
            x = self.conv(tape, p, x, st.down, if i == 0 { 1 } else { 2 })?;
            x = self.film(tape, p, x, cond, st.film)?;
            x = tape.silu(x)?;
            x = self.conv(tape, p, x, st.conv, 1)?;
            x = tape.silu(x)?;
            skips.push(x);
        }
        let g = tape.spatial_mean(x)?;
        let g = self.linear(tape, p, g, l.global)?;
        let cond_dec = tape.add(cond, g)?;
        for i in (0..l.dec.len()).rev() {
            let st = &l.dec[i];
            x = tape.upsample2x(x)?;
            x = self.conv(tape, p, x, st.up, 1)?;
            x = tape.concat_channels(x, skips[i])?;
            x = self.conv(tape, p, x, st.fuse, 1)?;
            x = self.film(tape, p, x, cond_dec, st.film)?;
            x = tape.silu(x)?;
        }
        let y = self.conv(tape, p, x, l.out, 1)?;
        let direct = self.conv(tape, p, input, l.skip, 1)?;
        tape.add(y, direct)
    }

    /// Inference-only forward with frozen weights.
    pub fn predict(&self, z_t: &Tensor<T>, z_i: &Tensor<T>, times: &[f64], prompts: &[PromptId]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let zt = tape.constant(z_t.clone());
        let zi = tape.constant(z_i.clone());
        let out = self.forward(&mut tape, &params, zt, zi, times, prompts)?;
        Ok(tape.value(out)?.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            widths: vec![4, 8, 8],
            time_embed_dim: 8,
            ..Default::default()
        }
    }

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn time_embedding_endpoints_and_definition() {
        let e = time_embedding(0.0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        let f = time_frequencies(4);
        assert_eq!(f[0], 1.0);
        let e = time_embedding(0.5, 4).unwrap();
        assert_eq!(e, vec![(0.5 * f[0]).sin(), (0.5 * f[1]).sin(), (0.5 * f[0]).cos(), (0.5 * f[1]).cos()]);
        assert!(time_embedding(1.5, 4).is_err());
        assert!(time_embedding(0.5, 3).is_err());
    }

    #[test]
    fn time_embedding_injective_on_grid() {
        let rows: Vec<Vec<f64>> = (0..1000).map(|i| time_embedding(i as f64 / 999.0, 16).unwrap()).collect();
        for i in 1..rows.len() {
            for j in 0..i {
                assert_ne!(rows[i], rows[j], "rows {i} and {j} collide");
            }
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let net = VelocityNet::<f64>::new(small(), 1).unwrap();
        let z = noise(&[2, 1, 32, 32], 2);
        let out = net.predict(&z, &z, &[0.3, 0.9], &[PromptId(1), PromptId(2)]).unwrap();
        assert_eq!(out.shape(), z.shape());

        let cfg = ModelConfig {
            in_channels: 3,
            ..small()
        };
        let net = VelocityNet::<f64>::new(cfg, 1).unwrap();
        let z = noise(&[1, 3, 64, 64], 2);
        let out = net.predict(&z, &z, &[0.3], &[PromptId(1)]).unwrap();
        assert_eq!(out.shape(), z.shape());
    }

    #[test]
    fn zero_initialized_output() {
        let net = VelocityNet::<f64>::new(small(), 5).unwrap();
        let z = noise(&[1, 1, 16, 16], 3);
        let out = net.predict(&z, &noise(&[1, 1, 16, 16], 4), &[0.5], &[PromptId(3)]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_concat_ignores_image() {
        let cfg = ModelConfig {
            use_image_concat: false,
            ..small()
        };
        let mut net = VelocityNet::<f64>::new(cfg, 5).unwrap();
        net.perturb(9, 0.2);
        let z = noise(&[1, 1, 16, 16], 3);
        let a = net.predict(&z, &noise(&[1, 1, 16, 16], 4), &[0.5], &[PromptId(3)]).unwrap();
        let b = net.predict(&z, &noise(&[1, 1, 16, 16], 5), &[0.5], &[PromptId(3)]).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn no_text_ignores_prompt() {
        let cfg = ModelConfig {
            use_text: false,
            ..small()
        };
        let mut net = VelocityNet::<f64>::new(cfg, 5).unwrap();
        net.perturb(9, 0.2);
        let z = noise(&[1, 1, 16, 16], 3);
        let a = net.predict(&z, &z, &[0.5], &[PromptId(3)]).unwrap();
        let b = net.predict(&z, &z, &[0.5], &[PromptId(12)]).unwrap();
        assert_eq!(a, b);

        let mut net = VelocityNet::<f64>::new(small(), 5).unwrap();
        net.perturb(9, 0.2);
        let a = net.predict(&z, &z, &[0.5], &[PromptId(3)]).unwrap();
        let b = net.predict(&z, &z, &[0.5], &[PromptId(12)]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn input_errors() {
        let net = VelocityNet::<f64>::new(small(), 1).unwrap();
        let z = noise(&[1, 1, 18, 18], 2);
        assert!(net.predict(&z, &z, &[0.5], &[PromptId(1)]).is_err());
        let z = noise(&[1, 1, 16, 16], 2);
        let other = noise(&[1, 1, 8, 8], 2);
        assert!(net.predict(&z, &other, &[0.5], &[PromptId(1)]).is_err());
        assert!(net.predict(&z, &z, &[0.5], &[PromptId(99)]).is_err());
        assert!(net.predict(&z, &z, &[0.5, 0.2], &[PromptId(1)]).is_err());
        assert!(VelocityNet::<f64>::new(ModelConfig { widths: vec![], ..small() }, 0).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = VelocityNet::<f32>::new(small(), 11).unwrap();
        net.perturb(1, 0.1);
        let z = noise(&[2, 1, 16, 16], 3).cast::<f32>();
        let a = net.predict(&z, &z, &[0.1, 0.7], &[PromptId(1), PromptId(0)]).unwrap();
        let b = net.predict(&z, &z, &[0.1, 0.7], &[PromptId(1), PromptId(0)]).unwrap();
        assert_eq!(a, b);
        assert!(net.num_parameters() > 0);
    }
}
