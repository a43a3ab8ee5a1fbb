//! L1 training with Adam, step-decay learning rates and resumable
//! checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{select_input, ModelInput, ModelKind, ModelSpec, SrModel};
use crate::datapipe::{random_crop, NormStats};
use crate::diffusion::{forward_sample, standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::mae;
use crate::nn::{Gradients, ParamStore, Tape, Tensor};
use crate::sits::{Raster, SrSample, TimedSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub decay_interval: usize,
    pub seed: u64,
    /// Frames kept per series, closest to the reference date first.
    pub series_length: usize,
    pub loss: LossKind,
    /// Random LR crop size per training sample; whole samples when unset.
    pub crop: Option<usize>,
    pub val_every: usize,
    pub val_subset: usize,
    /// Global gradient-norm clip; diffusion kinds default to 1.0.
    pub grad_clip: Option<f64>,
    /// Percentile-normalise data before training; applied by the caller
    /// and recorded in the checkpoint.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::recipe(ModelKind::HighresnetLtae)
    }
}

impl TrainConfig {
    /// Full-scale recipe for `kind`.
    pub fn recipe(kind: ModelKind) -> Self {
        let (steps, batch_size, learning_rate) = match kind {
            ModelKind::HighresnetRecursive | ModelKind::HighresnetLtae => (300_000, 32, 6e-4),
            ModelKind::RrdbSisr | ModelKind::RrdbLtae => (300_000, 10, 2e-4),
            ModelKind::SrdiffBicubic | ModelKind::SrdiffRrdb => (400_000, 64, 2e-4),
            ModelKind::SrdiffHighresnetLtae => (325_000, 64, 2e-4),
        };
        Self {
            model: ModelSpec::new(kind),
            steps,
            batch_size,
            learning_rate,
            decay: 0.7,
            decay_interval: 50_000,
            seed: 0,
            series_length: 8,
            loss: LossKind::L1,
            crop: None,
            val_every: 1000,
            val_subset: 512,
            grad_clip: kind.is_diffusion().then_some(1.0),
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.decay_interval == 0 || self.val_every == 0 {
            return Err(Error::config("decay_interval and val_every must be positive"));
        }
        if self.series_length == 0 {
            return Err(Error::config("series_length must be at least 1"));
        }
        if self.crop == Some(0) {
            return Err(Error::config("crop must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// `base * decay^floor(step / interval)`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.learning_rate * cfg.decay.powi((step / cfg.decay_interval) as i32)
}

/// Mean absolute difference of two equally shaped tensors.
pub fn l1_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::domain(format!(
            "loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .sum();
    Ok(total / pred.numel().max(1) as f64)
}

/// First and second moment estimates, indexed like the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. Nothing changes if any gradient is
    /// non-finite.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::domain(format!("gradient shape mismatch for {}", store.name(id))));
                }
                if !g.is_finite() {
                    return Err(Error::Training(format!("non-finite gradient for {}", store.name(id))));
                }
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k] as f64;
                let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
                let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let upd = lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                p[k] = (p[k] as f64 - upd) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_mae: Option<f64>,
}

/// Receives one row per optimisation step.
pub trait LogSink {
    fn record(&mut self, row: &LogRow) -> Result<()>;
}

impl LogSink for Vec<LogRow> {
    fn record(&mut self, row: &LogRow) -> Result<()> {
        self.push(*row);
        Ok(())
    }
}

/// Writes `step,loss,lr,val_MAE` lines.
pub struct CsvSink<W: Write> {
    out: W,
    header: bool,
}

impl<W: Write> CsvSink<W> {
    pub fn new(out: W) -> Self {
        Self { out, header: false }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> LogSink for CsvSink<W> {
    fn record(&mut self, row: &LogRow) -> Result<()> {
        let io = |e| Error::io("training log", e);
        if !self.header {
            writeln!(self.out, "step,loss,lr,val_MAE").map_err(io)?;
            self.header = true;
        }
        let val = row.val_mae.map(|v| v.to_string()).unwrap_or_default();
        writeln!(self.out, "{},{},{},{}", row.step, row.loss, row.lr, val).map_err(io)
    }
}

/// Everything needed to continue training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed optimisation steps.
    pub step: usize,
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam: Adam,
    pub history: Vec<ValRecord>,
    /// Radiometric normalisation the model was trained under.
    pub norm: Option<NormStats>,
}

const MAGIC: &[u8; 8] = b"TESRCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: usize,
    adam_step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    history: Vec<ValRecord>,
    norm: Option<NormStats>,
    /// Parameters, then first moments, then second moments.
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<SrModel> {
        SrModel::from_parts(self.config.model.clone(), self.params.clone())
    }

    /// `TESRCKPT`, version (u32), JSON length (u64), JSON header, then raw
    /// little-endian f32 tensors.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<&Tensor<f32>> = Vec::new();
        for (name, t) in &self.params {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            });
            blobs.push(t);
        }
        for (tag, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for (t, (name, _)) in moments.iter().zip(&self.params) {
                tensors.push(TensorEntry {
                    name: format!("{tag}:{name}"),
                    shape: t.shape().to_vec(),
                });
                blobs.push(t);
            }
        }
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            adam_step: self.adam.step,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            eps: self.adam.eps,
            history: self.history.clone(),
            norm: self.norm.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + blobs.iter().map(|t| 4 * t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Parse(format!("checkpoint: {msg}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing TESRCKPT magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let mut offset = 20 + len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(&format!("truncated tensor {}", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((entry.name.clone(), Tensor::from_vec(&entry.shape, data)));
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        if tensors.len() % 3 != 0 {
            return Err(bad("moment tensors do not match parameters"));
        }
        let n = tensors.len() / 3;
        let mut rest = tensors.split_off(n);
        let v = rest.split_off(n).into_iter().map(|(_, t)| t).collect();
        let m = rest.into_iter().map(|(_, t)| t).collect();
        Ok(Self {
            config: header.config,
            step: header.step,
            params: tensors,
            adam: Adam {
                beta1: header.beta1,
                beta2: header.beta2,
                eps: header.eps,
                step: header.adam_step,
                m,
                v,
            },
            history: header.history,
            norm: header.norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn raster_tensor(r: &Raster) -> Tensor<f32> {
    let (c, h, w) = r.dims();
    Tensor::from_vec(&[1, c, h, w], r.data().iter().copied().collect())
}

/// The series a model of `kind` sees: the `t` frames closest to the
/// reference date, or only the closest frame for single-image kinds.
pub fn truncate_series(kind: ModelKind, series: &TimedSeries, t: usize) -> Result<TimedSeries> {
    let kept = if series.len() > t {
        series.keep_closest(t)?
    } else {
        series.clone()
    };
    select_input(kind, &kept)
}

/// A model with its optimiser state, advanced one step at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: SrModel,
    adam: Adam,
    step: usize,
    history: Vec<ValRecord>,
    norm: Option<NormStats>,
    schedule: Option<NoiseSchedule>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = SrModel::new(config.model.clone(), config.seed)?;
        let adam = Adam::new(model.params());
        Self::assemble(config, model, adam, 0, Vec::new(), None)
    }

    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = ckpt.model()?;
        if ckpt.adam.m.len() != model.params().len() {
            return Err(Error::State("optimizer state does not match the model".into()));
        }
        Self::assemble(ckpt.config, model, ckpt.adam, ckpt.step, ckpt.history, ckpt.norm)
    }

    fn assemble(
        config: TrainConfig,
        model: SrModel,
        adam: Adam,
        step: usize,
        history: Vec<ValRecord>,
        norm: Option<NormStats>,
    ) -> Result<Self> {
        let schedule = if config.model.kind.is_diffusion() {
            Some(NoiseSchedule::from_config(&config.model.diffusion)?)
        } else {
            None
        };
        Ok(Self {
            config,
            model,
            adam,
            step,
            history,
            norm,
            schedule,
        })
    }

    /// Records the normalisation the training data went through.
    pub fn set_norm(&mut self, norm: NormStats) {
        self.norm = Some(norm);
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &SrModel {
        &self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[ValRecord] {
        &self.history
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self
                .model
                .params()
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
            adam: self.adam.clone(),
            history: self.history.clone(),
            norm: self.norm.clone(),
        }
    }

    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x7472_6169_6e00_0000);
        rng.set_stream(step as u64);
        rng
    }

    fn prepare(&self, sample: &SrSample, rng: &mut impl Rng) -> Result<(TimedSeries, Raster)> {
        if sample.scale != self.config.model.scale {
            return Err(Error::config(format!(
                "model upscales by {}, data by {}",
                self.config.model.scale, sample.scale
            )));
        }
        let sample = match self.config.crop {
            Some(c) => random_crop(sample, c, rng)?,
            None => sample.clone(),
        };
        let series = truncate_series(self.config.model.kind, &sample.lr_series, self.config.series_length)?;
        Ok((series, sample.hr))
    }

    /// Loss and parameter gradients for one sample.
    fn sample_gradients(&self, series: &TimedSeries, hr: &Raster, rng: &mut impl Rng) -> Result<(f64, Gradients<f32>)> {
        let input = ModelInput::<f32>::new(&self.config.model, series)?;
        let network = self.model.network();
        let mut tape = Tape::new(self.model.params());
        let loss = match &self.schedule {
            None => {
                let (pred, _) = network.predict(&mut tape, &input)?;
                if tape.shape(pred) != [1, 3, hr.dims().1, hr.dims().2] {
                    return Err(Error::domain(format!(
                        "prediction {:?} does not match target {:?}",
                        tape.shape(pred),
                        hr.dims()
                    )));
                }
                let target = tape.input(raster_tensor(hr));
                tape.mean_abs_diff(pred, target)
            }
            Some(schedule) => {
                let anchor = input.anchor.as_ref().expect("diffusion anchor");
                let residual: Vec<f32> = hr.data().iter().zip(anchor.data()).map(|(h, a)| h - a).collect();
                if residual.len() != anchor.numel() {
                    return Err(Error::domain("target does not match the upsampled anchor"));
                }
                let t = rng.gen_range(1..=schedule.steps());
                let noise = standard_normal(residual.len(), rng);
                let x_t = forward_sample(&residual, t, &noise, schedule)?;
                let cond = network.diffusion_condition(&mut tape, &input)?;
                let xv = tape.input(Tensor::from_vec(anchor.shape(), x_t));
                let eps = network.predict_noise(&mut tape, xv, t, cond)?;
                let target = tape.input(Tensor::from_vec(anchor.shape(), noise));
                tape.mean_abs_diff(eps, target)
            }
        };
        let value = tape.value(loss).data()[0] as f64;
        Ok((value, tape.backward(loss)))
    }

    /// One optimisation step on a batch drawn from `train`.
    pub fn train_step(&mut self, train: &[SrSample]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::domain("empty training set"));
        }
        let mut rng = self.step_rng(self.step);
        let mut total = Gradients::default();
        let mut loss = 0.0;
        for _ in 0..self.config.batch_size {
            let sample = &train[rng.gen_range(0..train.len())];
            let (series, hr) = self.prepare(sample, &mut rng)?;
            let (l, g) = self.sample_gradients(&series, &hr, &mut rng)?;
            loss += l;
            total.accumulate(&g);
        }
        let b = self.config.batch_size as f64;
        loss /= b;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss diverged at step {}", self.step)));
        }
        total.scale(1.0 / b as f32);
        if let Some(clip) = self.config.grad_clip {
            let norm = total.global_norm() as f64;
            if norm > clip {
                total.scale((clip / norm) as f32);
            }
        }
        let lr = lr_schedule(self.step, &self.config);
        self.adam.update(self.model.params_mut(), &total, lr)?;
        self.step += 1;
        Ok(loss)
    }

    /// Mean byte-scale MAE of the model on the first `val_subset` samples.
    pub fn validate(&self, val: &[SrSample]) -> Result<f64> {
        let subset = &val[..val.len().min(self.config.val_subset)];
        if subset.is_empty() {
            return Err(Error::domain("empty validation set"));
        }
        let mut total = 0.0;
        for (i, sample) in subset.iter().enumerate() {
            let series = truncate_series(self.config.model.kind, &sample.lr_series, self.config.series_length)?;
            let sr = self.model.super_resolve_seeded(&series, i as u64)?;
            total += mae(&sr, &sample.hr)?;
        }
        Ok(total / subset.len() as f64)
    }

    /// Trains until `target` steps have been completed, validating every
    /// `val_every` steps when `val` is non-empty. On divergence the trainer
    /// keeps the last finite state and the error is returned.
    pub fn run_until(&mut self, target: usize, train: &[SrSample], val: &[SrSample], sink: &mut dyn LogSink) -> Result<()> {
        while self.step < target {
            let lr = lr_schedule(self.step, &self.config);
            let loss = self.train_step(train)?;
            let val_mae = if self.step % self.config.val_every == 0 && !val.is_empty() {
                let m = self.validate(val)?;
                self.history.push(ValRecord {
                    step: self.step,
                    mae: m,
                });
                Some(m)
            } else {
                None
            };
            sink.record(&LogRow {
                step: self.step,
                loss,
                lr,
                val_mae,
            })?;
        }
        Ok(())
    }
}

/// Runs `cfg.steps` steps from a fresh initialisation.
pub fn train(cfg: TrainConfig, train: &[SrSample], val: &[SrSample], sink: &mut dyn LogSink) -> Result<Checkpoint> {
    let steps = cfg.steps;
    let mut trainer = Trainer::new(cfg)?;
    trainer.run_until(steps, train, val, sink)?;
    Ok(trainer.checkpoint())
}
