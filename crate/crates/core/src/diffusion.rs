//! Conditional denoising diffusion decoder for the SR residual.
//!
//! The chain models `x0 = HR - bicubic_up(closest LR)`. A small U-Net
//! predicts the injected noise from `x_t`, the step index and a conditioning
//! stack at HR resolution.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Width of the U-Net's top level; deeper levels use twice this.
    pub channels: usize,
    /// Width of the sinusoidal step embedding.
    pub embed_dim: usize,
    /// Conditioning feature channels after projection to HR.
    pub cond_channels: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            channels: 32,
            embed_dim: 32,
            cond_channels: 8,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.channels == 0 || self.cond_channels == 0 {
            return Err(Error::config("diffusion steps and widths must be positive"));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::config("diffusion embed_dim must be even and >= 2"));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_start <= beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }
}

/// Variance schedule; step `t` is one-based, stored at index `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        DiffusionConfig {
            steps,
            beta_start,
            beta_end,
            ..DiffusionConfig::default()
        }
        .validate()?;
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    pub fn from_config(cfg: &DiffusionConfig) -> Result<Self> {
        Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self {
            betas,
            alphas,
            alpha_bar,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// Posterior variance `beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let prev = if t > 1 { self.alpha_bar(t - 1) } else { 1.0 };
        self.beta(t) * (1.0 - prev) / (1.0 - self.alpha_bar(t))
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::domain(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn forward_sample(x0: &[f32], t: usize, noise: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    schedule.check(t)?;
    if x0.len() != noise.len() {
        return Err(Error::domain("noise and image differ in size"));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(noise)
        .map(|(&x, &n)| (a * x as f64 + b * n as f64) as f32)
        .collect())
}

/// One ancestral step: the posterior mean implied by `predicted_noise`, plus
/// `sigma_t z` for `t > 1`.
pub fn reverse_step(
    x_t: &[f32],
    t: usize,
    predicted_noise: &[f32],
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    schedule.check(t)?;
    if x_t.len() != predicted_noise.len() {
        return Err(Error::domain("noise prediction and state differ in size"));
    }
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
    let sigma = if t > 1 {
        schedule.posterior_variance(t).sqrt()
    } else {
        0.0
    };
    Ok(x_t
        .iter()
        .zip(predicted_noise)
        .map(|(&x, &e)| {
            let mean = inv_sqrt_alpha * (x as f64 - coef * e as f64);
            let z: f64 = if t > 1 { StandardNormal.sample(rng) } else { 0.0 };
            (mean + sigma * z) as f32
        })
        .collect())
}

pub fn standard_normal(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect()
}

/// Sinusoidal embedding of a step index, `dim` wide (sines then cosines).
pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    out
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            a: Conv2d::new(store, &format!("{name}.a"), c, c, 3, 2f64.sqrt(), rng),
            b: Conv2d::new(store, &format!("{name}.b"), c, c, 3, 0.5, rng),
        }
    }

    fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let h = self.a.forward(tape, x);
        let h = tape.leaky_relu(h, F::lit(0.2));
        let h = self.b.forward(tape, h);
        tape.add(x, h)
    }
}

/// Three-level U-Net noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    embed_in: Linear,
    embed_out: Linear,
    input: Conv2d,
    top: ResBlock,
    down1: Conv2d,
    mid: ResBlock,
    down2: Conv2d,
    bottom: ResBlock,
    up2: Conv2d,
    up1: Conv2d,
    output: Conv2d,
    embed_dim: usize,
    cond_channels: usize,
}

impl Denoiser {
    /// `cond_channels` extra HR-resolution channels are concatenated with
    /// the 3-channel state at the input.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &DiffusionConfig,
        cond_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let e = cfg.embed_dim;
        let n = |s: &str| format!("{name}.{s}");
        let g = 2f64.sqrt();
        Ok(Self {
            embed_in: Linear::new(store, &n("embed_in"), e, e, rng),
            embed_out: Linear::new(store, &n("embed_out"), e, c, rng),
            input: Conv2d::new(store, &n("input"), 3 + cond_channels, c, 3, g, rng),
            top: ResBlock::new(store, &n("top"), c, rng),
            down1: Conv2d::new(store, &n("down1"), c, 2 * c, 3, g, rng),
            mid: ResBlock::new(store, &n("mid"), 2 * c, rng),
            down2: Conv2d::new(store, &n("down2"), 2 * c, 2 * c, 3, g, rng),
            bottom: ResBlock::new(store, &n("bottom"), 2 * c, rng),
            up2: Conv2d::new(store, &n("up2"), 4 * c, 2 * c, 3, g, rng),
            up1: Conv2d::new(store, &n("up1"), 3 * c, c, 3, g, rng),
            output: Conv2d::new(store, &n("output"), c, 3, 3, 0.1, rng),
            embed_dim: e,
            cond_channels,
        })
    }

    pub fn cond_channels(&self) -> usize {
        self.cond_channels
    }

    /// Predicts the noise in `x_t: [1, 3, H, W]` (H and W divisible by 4)
    /// given `cond: [1, cond_channels, H, W]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x_t: Var, t: usize, cond: Var) -> Result<Var> {
        let (_, _, h, w) = tape.value(x_t).dims4();
        let (_, cc, ch, cw) = tape.value(cond).dims4();
        if (ch, cw) != (h, w) || cc != self.cond_channels {
            return Err(Error::config(format!(
                "conditioning is {cc}x{ch}x{cw}, noise predictor expects {}x{h}x{w}",
                self.cond_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::config(format!(
                "noise predictor needs sizes divisible by 4, got {h}x{w}"
            )));
        }
        let lrelu = F::lit(0.2);
        let emb: Vec<F> = step_embedding(t, self.embed_dim).into_iter().map(F::lit).collect();
        let emb = tape.input(Tensor::from_vec(&[1, self.embed_dim], emb));
        let emb = self.embed_in.forward(tape, emb);
        let emb = tape.leaky_relu(emb, lrelu);
        let emb = self.embed_out.forward(tape, emb);

        let x = tape.concat_channels(&[x_t, cond]);
        let x = self.input.forward(tape, x);
        let x = tape.add_channel_bias(x, emb);
        let x = tape.leaky_relu(x, lrelu);
        let skip0 = self.top.forward(tape, x);

        let x = tape.avg_pool2(skip0);
        let x = self.down1.forward(tape, x);
        let x = tape.leaky_relu(x, lrelu);
        let skip1 = self.mid.forward(tape, x);

        let x = tape.avg_pool2(skip1);
        let x = self.down2.forward(tape, x);
        let x = tape.leaky_relu(x, lrelu);
        let x = self.bottom.forward(tape, x);

        let x = tape.upsample2(x);
        let x = tape.concat_channels(&[x, skip1]);
        let x = self.up2.forward(tape, x);
        let x = tape.leaky_relu(x, lrelu);

        let x = tape.upsample2(x);
        let x = tape.concat_channels(&[x, skip0]);
        let x = self.up1.forward(tape, x);
        let x = tape.leaky_relu(x, lrelu);
        Ok(self.output.forward(tape, x))
    }
}

/// Runs the full reverse chain from pure noise and returns the generated
/// residual `[3 * H * W]`.
pub fn sample_residual(
    store: &ParamStore<f32>,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    cond: &Tensor<f32>,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    let (_, _, h, w) = cond.dims4();
    let mut x = standard_normal(3 * h * w, rng);
    for t in (1..=schedule.steps()).rev() {
        let eps = {
            let mut tape = Tape::new(store);
            let xv = tape.input(Tensor::from_vec(&[1, 3, h, w], x.clone()));
            let cv = tape.input(cond.clone());
            let out = denoiser.forward(&mut tape, xv, t, cv)?;
            tape.value(out).data().to_vec()
        };
        x = reverse_step(&x, t, &eps, schedule, rng)?;
    }
    Ok(x)
}
