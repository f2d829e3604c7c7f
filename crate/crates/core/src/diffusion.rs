//! Latent diffusion: linear noise schedule, a z₀-predicting transformer
//! denoiser with optional condition input, and ancestral sampling with
//! classifier-free guidance.

use std::collections::BTreeMap;

use dsdf_nn::{timestep_embeddings, Activation, AttentionBlock, LayerNorm, Linear, ParamStore};
use dsdf_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{Conditioning, DenoiserConfig, ScheduleConfig};
use crate::error::{CoreError, Result};
use crate::modulation::PointEncoder;
use crate::rng::{substream, Stream};

/// Precomputed linear-β schedule. Index `t` runs over `1..=T`; index 0 holds
/// `ᾱ_0 = 1` and is otherwise unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

impl Schedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = *config;
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(CoreError::Config(format!(
                "schedule needs T ≥ 2 and 0 < β_1 < β_T < 1, got T = {steps}, β = [{beta_start}, {beta_end}]"
            )));
        }
        let mut betas = vec![0.0; steps + 1];
        let mut alphas = vec![1.0; steps + 1];
        let mut alpha_bars = vec![1.0; steps + 1];
        let mut posterior_vars = vec![0.0; steps + 1];
        for t in 1..=steps {
            let frac = (t - 1) as f64 / (steps - 1) as f64;
            betas[t] = beta_start + frac * (beta_end - beta_start);
            alphas[t] = 1.0 - betas[t];
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
            posterior_vars[t] = (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]) * betas[t];
        }
        Ok(Self {
            steps,
            betas,
            alphas,
            alpha_bars,
            posterior_vars,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(CoreError::Config(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_vars[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.posterior_vars[t].sqrt()
    }

    /// `√ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
    pub fn q_sample(&self, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(t)?;
        if z0.len() != eps.len() {
            return Err(CoreError::Config(format!(
                "q_sample: z0 has {} entries, ε has {}",
                z0.len(),
                eps.len()
            )));
        }
        let (a, b) = (self.alpha_bars[t].sqrt(), (1.0 - self.alpha_bars[t]).sqrt());
        Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
    }

    /// Row-wise `q_sample` on the tape for `z0: [B, D]`, one timestep per row,
    /// so gradients can flow into `z0`.
    pub fn q_sample_var(&self, tape: &Tape, z0: &Var, ts: &[usize], eps: &Tensor) -> Result<Var> {
        let b = z0.shape()[0];
        if ts.len() != b || eps.shape() != z0.shape() {
            return Err(CoreError::Config("q_sample: batch sizes differ".into()));
        }
        for &t in ts {
            self.check(t)?;
        }
        let a: Vec<f64> = ts.iter().map(|&t| self.alpha_bars[t].sqrt()).collect();
        let s: Vec<f64> = ts.iter().map(|&t| (1.0 - self.alpha_bars[t]).sqrt()).collect();
        let scaled = tape.mul(z0, &tape.constant(Tensor::new(vec![b, 1], a)?))?;
        let noise = tape.mul(&tape.constant(eps.clone()), &tape.constant(Tensor::new(vec![b, 1], s)?))?;
        Ok(tape.add(&scaled, &noise)?)
    }

    /// Coefficients `(c_zt, c_z0)` of the posterior mean
    /// `μ̃ = c_zt · z_t + c_z0 · ẑ0`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let (ab, ab_prev) = (self.alpha_bars[t], self.alpha_bars[t - 1]);
        let c_zt = self.alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let c_z0 = ab_prev.sqrt() * self.betas[t] / (1.0 - ab);
        (c_zt, c_z0)
    }

    pub fn posterior_mean(&self, z0_hat: &[f64], zt: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check(t)?;
        let (c_zt, c_z0) = self.posterior_coefficients(t);
        Ok(zt.iter().zip(z0_hat).map(|(z, x)| c_zt * z + c_z0 * x).collect())
    }

    /// One ancestral step: `μ̃ + σ_t ε` for `t > 1`, plain `μ̃` at `t = 1`.
    pub fn posterior_step<R: Rng + ?Sized>(
        &self,
        z0_hat: &[f64],
        zt: &[f64],
        t: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut mean = self.posterior_mean(z0_hat, zt, t)?;
        if t > 1 {
            let sigma = self.sigma(t);
            for m in mean.iter_mut() {
                *m += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(mean)
    }
}

/// Replaces each row of `cond: [B, F]` with the all-zero mask with probability `p`.
pub fn condition_dropout<R: Rng + ?Sized>(cond: &Tensor, p: f64, rng: &mut R) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CoreError::Config(format!("dropout probability {p} outside [0, 1]")));
    }
    let f = *cond.shape().last().unwrap_or(&1);
    let mut data = cond.data().to_vec();
    for row in data.chunks_mut(f.max(1)) {
        if rng.random::<f64>() < p {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(Tensor::new(cond.shape().to_vec(), data)?)
}

#[derive(Debug, Clone)]
struct Block {
    self_norm: LayerNorm,
    self_attn: AttentionBlock,
    cross: Option<(LayerNorm, AttentionBlock)>,
    ff_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Transformer denoiser `Ω(z_t, γ(t) | π)` predicting `z0`, plus the
/// condition encoder `Υ` when conditioning is enabled. Parameters live under
/// `omega.` and `cond.`.
///
/// Tokens are `W_in·concat(z_t, γ(t))` and `W_t·γ(t)`, plus `W_c·π` in
/// concatenation mode. Each block applies pre-norm residual self-attention,
/// cross-attention to the single condition token (cross-attention mode), and
/// a feed-forward layer. The prediction is read from the first token.
///
/// The denoiser works on latents multiplied by `latent_scale`, fixed before
/// training so the training latents have unit RMS; [`sample`] divides it out.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub latent_scale: f64,
    pub store: ParamStore,
    input: Linear,
    time_token: Linear,
    cond_token: Option<Linear>,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    output: Linear,
    pub cond_encoder: Option<PointEncoder>,
}

impl Denoiser {
    /// `point_hidden` sizes the condition encoder when conditioning is enabled.
    pub fn new(
        config: DenoiserConfig,
        latent_dim: usize,
        feature_dim: usize,
        point_hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = substream(seed, Stream::Init, 1);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let input = Linear::new(&mut store, "omega.in", latent_dim + config.time_dim, d, &mut rng)?;
        let time_token = Linear::new(&mut store, "omega.time", config.time_dim, d, &mut rng)?;
        let cond_token = match config.conditioning {
            Conditioning::Concat => Some(Linear::without_bias(&mut store, "omega.cond", feature_dim, d, &mut rng)?),
            _ => None,
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let name = format!("omega.block{i}");
            let self_norm = LayerNorm::new(&mut store, &format!("{name}.self_norm"), d)?;
            let self_attn = AttentionBlock::new(&mut store, &format!("{name}.self"), d, d, config.heads, &mut rng)?;
            let cross = match config.conditioning {
                Conditioning::CrossAttention => Some((
                    LayerNorm::new(&mut store, &format!("{name}.cross_norm"), d)?,
                    AttentionBlock::new(&mut store, &format!("{name}.cross"), d, feature_dim, config.heads, &mut rng)?,
                )),
                _ => None,
            };
            let ff_norm = LayerNorm::new(&mut store, &format!("{name}.ff_norm"), d)?;
            let hidden = d * config.ff_mult.max(1);
            let ff_in = Linear::new(&mut store, &format!("{name}.ff_in"), d, hidden, &mut rng)?;
            let ff_out = Linear::new(&mut store, &format!("{name}.ff_out"), hidden, d, &mut rng)?;
            blocks.push(Block {
                self_norm,
                self_attn,
                cross,
                ff_norm,
                ff_in,
                ff_out,
            });
        }
        let out_norm = LayerNorm::new(&mut store, "omega.out_norm", d)?;
        let output = Linear::new(&mut store, "omega.out", d, latent_dim, &mut rng)?;
        let cond_encoder = match config.conditioning {
            Conditioning::None => None,
            _ => Some(PointEncoder::new(&mut store, "cond", point_hidden, feature_dim, &mut rng)?),
        };
        Ok(Self {
            config,
            latent_dim,
            feature_dim,
            latent_scale: 1.0,
            store,
            input,
            time_token,
            cond_token,
            blocks,
            out_norm,
            output,
            cond_encoder,
        })
    }

    pub fn is_conditional(&self) -> bool {
        self.config.conditioning != Conditioning::None
    }

    /// `π = Υ(y)` for condition clouds `[B, N, 3]`.
    pub fn encode_condition(&self, tape: &Tape, points: &Var) -> Result<Var> {
        let enc = self
            .cond_encoder
            .as_ref()
            .ok_or_else(|| CoreError::Config("unconditional denoiser has no condition encoder".into()))?;
        enc.forward(tape, &self.store, points)
    }

    /// `ẑ0 = Ω(z_t, γ(t) | π)` for `z_t: [B, D]`, one timestep per row and an
    /// optional condition `[B, F]`. Without a condition, cross-attention is
    /// skipped and concatenation mode uses the zero-mask token.
    pub fn forward(&self, tape: &Tape, zt: &Var, ts: &[usize], cond: Option<&Var>) -> Result<Var> {
        let store = &self.store;
        let zs = zt.shape().to_vec();
        if zs.len() != 2 || zs[1] != self.latent_dim || ts.len() != zs[0] {
            return Err(CoreError::Config(format!(
                "denoiser expects z_t [B, {}] with B timesteps, got {zs:?} and {} timesteps",
                self.latent_dim,
                ts.len()
            )));
        }
        if let Some(c) = cond {
            if c.shape() != [zs[0], self.feature_dim] {
                return Err(CoreError::Config(format!(
                    "condition must be [{}, {}], got {:?}",
                    zs[0],
                    self.feature_dim,
                    c.shape()
                )));
            }
        }
        let b = zs[0];
        let d = self.config.model_dim;
        let gamma = tape.constant(timestep_embeddings(ts, self.config.time_dim)?);
        let tok0 = self.input.forward(tape, store, &tape.concat(&[zt, &gamma], 1)?)?;
        let tok1 = self.time_token.forward(tape, store, &gamma)?;
        let mut tokens = vec![tape.reshape(&tok0, vec![b, 1, d])?, tape.reshape(&tok1, vec![b, 1, d])?];
        if let Some(w) = &self.cond_token {
            let c = match cond {
                Some(c) => c.clone(),
                None => tape.constant(Tensor::zeros(vec![b, self.feature_dim])),
            };
            tokens.push(tape.reshape(&w.forward(tape, store, &c)?, vec![b, 1, d])?);
        }
        let refs: Vec<&Var> = tokens.iter().collect();
        let mut x = tape.concat(&refs, 1)?;
        let cond_token = match cond {
            Some(c) => Some(tape.reshape(c, vec![b, 1, self.feature_dim])?),
            None => None,
        };
        for block in &self.blocks {
            let h = block.self_norm.forward(tape, store, &x)?;
            x = tape.add(&x, &block.self_attn.forward(tape, store, &h, &h)?)?;
            if let (Some((norm, attn)), Some(c)) = (&block.cross, &cond_token) {
                let h = norm.forward(tape, store, &x)?;
                x = tape.add(&x, &attn.forward(tape, store, &h, c)?)?;
            }
            let h = block.ff_norm.forward(tape, store, &x)?;
            let h = block.ff_in.forward(tape, store, &h)?;
            let h = Activation::Gelu.apply(tape, &h)?;
            x = tape.add(&x, &block.ff_out.forward(tape, store, &h)?)?;
        }
        let first = tape.reshape(&tape.slice(&x, 1, 0, 1)?, vec![b, d])?;
        let h = self.out_norm.forward(tape, store, &first)?;
        Ok(self.output.forward(tape, store, &h)?)
    }

    /// Mean squared error between `Ω(z_t, γ(t) | π)` and `z0`.
    pub fn loss(&self, tape: &Tape, z0: &Var, zt: &Var, ts: &[usize], cond: Option<&Var>) -> Result<(Var, Var)> {
        let pred = self.forward(tape, zt, ts, cond)?;
        let diff = tape.sub(&pred, z0)?;
        Ok((tape.mean(&tape.mul(&diff, &diff)?, None)?, pred))
    }

    /// Store tensors plus the latent scale under [`LATENT_SCALE_KEY`].
    pub fn parameters(&self) -> BTreeMap<String, Tensor> {
        let mut named = self.store.to_named();
        named.insert(LATENT_SCALE_KEY.to_string(), Tensor::new(vec![1], vec![self.latent_scale]).expect("scale is finite"));
        named
    }

    /// A missing latent scale loads as 1.
    pub fn load_parameters(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        self.store.load_named(named)?;
        self.latent_scale = match named.get(LATENT_SCALE_KEY) {
            Some(t) => latent_scale_value(t)?,
            None => 1.0,
        };
        Ok(())
    }

    /// Copies matching `psi.*` weights into the condition encoder `cond.*`.
    pub fn warm_start_condition_encoder(&mut self, psi: &BTreeMap<String, Tensor>) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in psi {
            let Some(rest) = name.strip_prefix("psi.") else { continue };
            if let Some(id) = self.store.id_of(&format!("cond.{rest}")) {
                self.store.set(id, value.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Checkpoint key of the latent scale.
pub const LATENT_SCALE_KEY: &str = "latent_scale";

fn latent_scale_value(t: &Tensor) -> Result<f64> {
    match t.data() {
        [v] if v.is_finite() && *v > 0.0 => Ok(*v),
        _ => Err(CoreError::Config(format!("latent scale must be one positive value, got {:?}", t.data()))),
    }
}

/// `1 / RMS` of the given latent values, or 1 when they are all zero.
pub fn unit_rms_scale(values: &[f64]) -> f64 {
    let ms = values.iter().map(|v| v * v).sum::<f64>() / values.len().max(1) as f64;
    if ms > 0.0 {
        1.0 / ms.sqrt()
    } else {
        1.0
    }
}

/// Guidance settings for [`sample`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance {
    pub omega: f64,
    /// Evaluate and combine the zero-mask prediction even when `ω = 0`.
    pub force: bool,
}

impl Default for Guidance {
    fn default() -> Self {
        Self {
            omega: 0.0,
            force: false,
        }
    }
}

/// Ancestral sampling from `z_T ~ N(0, I)` for a batch of rows, each drawing
/// from its own random stream so a row's result does not depend on the batch
/// it runs in. `cond` holds one feature row per stream.
///
/// With a condition and `ω > 0` (or `force`), every step combines
/// `(ω + 1)·ẑ0_c − ω·ẑ0_u` where `ẑ0_u` uses the zero-mask. The result is
/// divided by the model's latent scale.
pub fn sample<R: Rng>(
    model: &Denoiser,
    schedule: &Schedule,
    cond: Option<&Tensor>,
    guidance: Guidance,
    rngs: &mut [R],
) -> Result<Tensor> {
    let b = rngs.len();
    let dim = model.latent_dim;
    if b == 0 {
        return Ok(Tensor::zeros(vec![0, dim]));
    }
    if let Some(c) = cond {
        if c.shape() != [b, model.feature_dim] {
            return Err(CoreError::Config(format!(
                "condition must be [{b}, {}], got {:?}",
                model.feature_dim,
                c.shape()
            )));
        }
    }
    let mut z: Vec<f64> = Vec::with_capacity(b * dim);
    for rng in rngs.iter_mut() {
        z.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
    }
    let guided = cond.is_some() && (guidance.omega != 0.0 || guidance.force);
    let zero = Tensor::zeros(vec![b, model.feature_dim]);
    for t in (1..=schedule.steps()).rev() {
        let tape = Tape::inference();
        let zt = tape.constant(Tensor::new(vec![b, dim], z.clone())?);
        let ts = vec![t; b];
        let cond_var = cond.map(|c| tape.constant(c.clone()));
        let mut z0 = model.forward(&tape, &zt, &ts, cond_var.as_ref())?.value().data().to_vec();
        if guided {
            let u = model.forward(&tape, &zt, &ts, Some(&tape.constant(zero.clone())))?;
            let w = guidance.omega;
            for (c, u) in z0.iter_mut().zip(u.value().data()) {
                *c = (w + 1.0) * *c - w * u;
            }
        }
        let mut next = Vec::with_capacity(b * dim);
        for (r, rng) in rngs.iter_mut().enumerate() {
            let rows = r * dim..(r + 1) * dim;
            next.extend(schedule.posterior_step(&z0[rows.clone()], &z[rows], t, rng)?);
        }
        z = next;
    }
    let inv = 1.0 / model.latent_scale;
    Ok(Tensor::new(vec![b, dim], z.into_iter().map(|v| v * inv).collect())?)
}
