//! Per-frame encoders, decoders and the assembled model zoo.

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::{bicubic_upsample, closest_frame};
use crate::diffusion::{sample_residual, DiffusionConfig, Denoiser, NoiseSchedule};
use crate::encoding::{relative_encoding, EncodingConfig, PositionalEncoding};
use crate::error::{Error, Result};
use crate::fusion::{median_reference, padded_order, AttentionMaps, Ltae2d, LtaeConfig, RecursiveFusion};
use crate::nn::{Conv2d, ParamStore, Real, Tape, Tensor, Var};
use crate::sits::{Raster, TimedSeries, ValueRange};

const LRELU: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RrdbSisr,
    HighresnetRecursive,
    HighresnetLtae,
    RrdbLtae,
    SrdiffBicubic,
    SrdiffRrdb,
    SrdiffHighresnetLtae,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::RrdbSisr,
        ModelKind::HighresnetRecursive,
        ModelKind::HighresnetLtae,
        ModelKind::RrdbLtae,
        ModelKind::SrdiffBicubic,
        ModelKind::SrdiffRrdb,
        ModelKind::SrdiffHighresnetLtae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::RrdbSisr => "rrdb_sisr",
            ModelKind::HighresnetRecursive => "highresnet_recursive",
            ModelKind::HighresnetLtae => "highresnet_ltae",
            ModelKind::RrdbLtae => "rrdb_ltae",
            ModelKind::SrdiffBicubic => "srdiff_bicubic",
            ModelKind::SrdiffRrdb => "srdiff_rrdb",
            ModelKind::SrdiffHighresnetLtae => "srdiff_highresnet_ltae",
        }
    }

    /// Single-image kinds take exactly one frame.
    pub fn is_sisr(self) -> bool {
        matches!(
            self,
            ModelKind::RrdbSisr | ModelKind::SrdiffBicubic | ModelKind::SrdiffRrdb
        )
    }

    pub fn is_diffusion(self) -> bool {
        matches!(
            self,
            ModelKind::SrdiffBicubic | ModelKind::SrdiffRrdb | ModelKind::SrdiffHighresnetLtae
        )
    }

    pub fn uses_attention(self) -> bool {
        matches!(
            self,
            ModelKind::HighresnetLtae | ModelKind::RrdbLtae | ModelKind::SrdiffHighresnetLtae
        )
    }

    fn uses_highres_encoder(self) -> bool {
        matches!(
            self,
            ModelKind::HighresnetRecursive | ModelKind::HighresnetLtae | ModelKind::SrdiffHighresnetLtae
        )
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ModelKind::ALL.iter().map(|k| k.name()).collect();
                Error::usage(format!("unknown model kind {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// How each x2 decoder stage enlarges the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampler {
    /// 3x3 convolution to 4C channels, then pixel shuffle.
    Pixelshuffle,
    /// Stride-2, kernel-2 transposed convolution, realised as a 1x1
    /// convolution to 4C channels followed by pixel shuffle.
    Transposed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub scale: usize,
    pub n_rrdb_blocks: usize,
    pub base_channels: usize,
    /// Channels added by each convolution of a dense block.
    pub growth_channels: usize,
    /// Residual blocks in the HighRes-net encoder.
    pub encoder_layers: usize,
    pub upsampler: Upsampler,
    pub ltae: LtaeConfig,
    pub encoding: EncodingConfig,
    pub diffusion: DiffusionConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::HighresnetLtae,
            scale: 4,
            n_rrdb_blocks: 8,
            base_channels: 64,
            growth_channels: 32,
            encoder_layers: 2,
            upsampler: Upsampler::Pixelshuffle,
            ltae: LtaeConfig::default(),
            encoding: EncodingConfig::default(),
            diffusion: DiffusionConfig::default(),
        }
    }
}

impl ModelSpec {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 4 | 8) {
            return Err(Error::config(format!(
                "scale must be 2, 4 or 8, got {}",
                self.scale
            )));
        }
        if self.n_rrdb_blocks == 0 {
            return Err(Error::config("n_rrdb_blocks must be at least 1"));
        }
        if self.base_channels == 0 || self.growth_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        self.encoding.validate()?;
        if self.kind.uses_attention() && self.base_channels % self.encoding.heads != 0 {
            return Err(Error::config(format!(
                "base_channels {} is not divisible by {} heads",
                self.base_channels, self.encoding.heads
            )));
        }
        if self.kind.is_diffusion() {
            self.diffusion.validate()?;
        }
        Ok(())
    }
}

/// Residual dense block: five convolutions with dense connections.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    convs: Vec<Conv2d>,
}

impl DenseBlock {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, c: usize, growth: usize, rng: &mut impl Rng) -> Self {
        let convs = (0..5)
            .map(|i| {
                let out = if i == 4 { c } else { growth };
                let gain = if i == 4 { 0.1 } else { 2f64.sqrt() };
                Conv2d::new(store, &format!("{name}.conv{}", i + 1), c + i * growth, out, 3, gain, rng)
            })
            .collect();
        Self { convs }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let mut feats = vec![x];
        for (i, conv) in self.convs.iter().enumerate() {
            let input = if feats.len() == 1 { x } else { tape.concat_channels(&feats) };
            let y = conv.forward(tape, input);
            if i < 4 {
                feats.push(tape.leaky_relu(y, F::lit(LRELU)));
            } else {
                let y = tape.scale(y, F::lit(0.2));
                return tape.add(x, y);
            }
        }
        unreachable!("five convolutions")
    }
}

/// Residual-in-residual dense block.
#[derive(Debug, Clone, PartialEq)]
pub struct Rrdb {
    blocks: [DenseBlock; 3],
}

impl Rrdb {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, c: usize, growth: usize, rng: &mut impl Rng) -> Self {
        Self {
            blocks: [
                DenseBlock::new(store, &format!("{name}.rdb1"), c, growth, rng),
                DenseBlock::new(store, &format!("{name}.rdb2"), c, growth, rng),
                DenseBlock::new(store, &format!("{name}.rdb3"), c, growth, rng),
            ],
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(tape, h);
        }
        let h = tape.scale(h, F::lit(0.2));
        tape.add(x, h)
    }
}

/// `first` convolution, RRDB stack and trunk convolution with a residual
/// around the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct RrdbEncoder {
    first: Conv2d,
    blocks: Vec<Rrdb>,
    trunk: Conv2d,
}

impl RrdbEncoder {
    fn new<F: Real>(store: &mut ParamStore<F>, spec: &ModelSpec, rng: &mut impl Rng) -> Self {
        let c = spec.base_channels;
        Self {
            first: Conv2d::new(store, "encoder.first", 3, c, 3, 1.0, rng),
            blocks: (0..spec.n_rrdb_blocks)
                .map(|i| Rrdb::new(store, &format!("encoder.rrdb{i}"), c, spec.growth_channels, rng))
                .collect(),
            trunk: Conv2d::new(store, "encoder.trunk", c, c, 3, 0.5, rng),
        }
    }

    fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let f = self.first.forward(tape, x);
        let mut h = f;
        for b in &self.blocks {
            h = b.forward(tape, h);
        }
        let h = self.trunk.forward(tape, h);
        tape.add(f, h)
    }
}

/// Encoder over `[LR, reference]` channel pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct HighresEncoder {
    first: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
}

impl HighresEncoder {
    fn new<F: Real>(store: &mut ParamStore<F>, spec: &ModelSpec, rng: &mut impl Rng) -> Self {
        let c = spec.base_channels;
        Self {
            first: Conv2d::new(store, "encoder.first", 6, c, 3, 2f64.sqrt(), rng),
            blocks: (0..spec.encoder_layers)
                .map(|i| {
                    (
                        Conv2d::new(store, &format!("encoder.res{i}.a"), c, c, 3, 2f64.sqrt(), rng),
                        Conv2d::new(store, &format!("encoder.res{i}.b"), c, c, 3, 0.5, rng),
                    )
                })
                .collect(),
        }
    }

    fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let h = self.first.forward(tape, x);
        let mut h = tape.leaky_relu(h, F::lit(LRELU));
        for (a, b) in &self.blocks {
            let r = a.forward(tape, h);
            let r = tape.leaky_relu(r, F::lit(LRELU));
            let r = b.forward(tape, r);
            h = tape.add(h, r);
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Encoder {
    Highres(HighresEncoder),
    Rrdb(RrdbEncoder),
}

#[derive(Debug, Clone, PartialEq)]
enum Fusion {
    None,
    Recursive(RecursiveFusion),
    Attention(Ltae2d),
}

/// Stack of x2 sub-pixel stages followed by a 3-channel convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    stages: Vec<Conv2d>,
    last: Conv2d,
}

impl Decoder {
    fn new<F: Real>(store: &mut ParamStore<F>, spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        if !spec.scale.is_power_of_two() || spec.scale < 2 {
            return Err(Error::config(format!(
                "decoder scale must be a power of two >= 2, got {}",
                spec.scale
            )));
        }
        let c = spec.base_channels;
        let k = match spec.upsampler {
            Upsampler::Pixelshuffle => 3,
            Upsampler::Transposed => 1,
        };
        let stages = (0..spec.scale.trailing_zeros())
            .map(|i| Conv2d::new(store, &format!("decoder.up{i}"), c, 4 * c, k, 2f64.sqrt(), rng))
            .collect();
        Ok(Self {
            stages,
            last: Conv2d::new(store, "decoder.last", c, 3, 3, 1.0, rng),
        })
    }

    fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var) -> Var {
        let mut h = x;
        for s in &self.stages {
            let y = s.forward(tape, h);
            let y = tape.pixel_shuffle(y, 2);
            h = tape.leaky_relu(y, F::lit(LRELU));
        }
        self.last.forward(tape, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DiffusionHead {
    /// Projects LR-resolution features to `cond_channels * scale^2` before
    /// pixel shuffling them to HR.
    project: Option<Conv2d>,
    denoiser: Denoiser,
}

/// Model modules; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    encoder: Option<Encoder>,
    fusion: Fusion,
    decoder: Option<Decoder>,
    diffusion: Option<DiffusionHead>,
}

/// Tensors prepared from a series for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<F> {
    /// `[T, 3, h, w]` frames in series order.
    pub frames: Tensor<F>,
    /// Median reference `[1, 3, h, w]` for HighRes-net encoders.
    pub reference: Option<Tensor<F>>,
    pub encoding: Option<PositionalEncoding>,
    /// Recursive fusion order (padded to a power of two).
    pub order: Vec<usize>,
    pub closest: usize,
    /// Bicubic upsample of the closest frame, `[1, 3, H, W]`; diffusion only.
    pub anchor: Option<Tensor<F>>,
}

fn raster_tensor<F: Real>(r: &Raster) -> Tensor<F> {
    let (c, h, w) = r.dims();
    Tensor::from_vec(&[1, c, h, w], r.data().iter().map(|&v| F::lit(v as f64)).collect())
}

fn tensor_raster<F: Real>(t: &Tensor<F>) -> Raster {
    let (_, c, h, w) = t.dims4();
    let data = Array3::from_shape_vec((c, h, w), t.data().iter().map(|v| v.as_f64() as f32).collect())
        .expect("consistent shape");
    Raster::new(data, ValueRange::Unit).expect("non-empty")
}

impl<F: Real> ModelInput<F> {
    pub fn new(spec: &ModelSpec, series: &TimedSeries) -> Result<Self> {
        let t = series.len();
        let (c, h, w) = series.frame_dims();
        if c != 3 {
            return Err(Error::domain(format!("models take 3-channel frames, got {c}")));
        }
        if spec.kind.is_sisr() && t != 1 {
            return Err(Error::usage(format!(
                "{} takes a single frame, got a series of {t}; select the closest frame first",
                spec.kind
            )));
        }
        if !series.frames().iter().all(|f| f.raster.is_finite()) {
            return Err(Error::domain("series contains non-finite values"));
        }
        let stack = series.stack();
        let frames = Tensor::from_vec(
            &[t, c, h, w],
            stack.iter().map(|&v| F::lit(v as f64)).collect(),
        );
        let reference = spec
            .kind
            .uses_highres_encoder()
            .then(|| raster_tensor(&median_reference(series)));
        let encoding = if spec.kind.uses_attention() {
            Some(relative_encoding(&series.timestamps(), series.t_ref(), &spec.encoding)?)
        } else {
            None
        };
        let order = padded_order(&series.timestamps(), series.t_ref());
        let closest = closest_frame(series);
        let anchor = spec
            .kind
            .is_diffusion()
            .then(|| raster_tensor(&bicubic_upsample(&series.frames()[closest].raster, spec.scale)));
        Ok(Self {
            frames,
            reference,
            encoding,
            order,
            closest,
            anchor,
        })
    }
}

/// Reduces a series to what the model consumes: the closest frame for
/// single-image kinds, the series itself otherwise.
pub fn select_input(kind: ModelKind, series: &TimedSeries) -> Result<TimedSeries> {
    if kind.is_sisr() {
        series.select(&[closest_frame(series)])
    } else {
        Ok(series.clone())
    }
}

/// Outputs of the deterministic part of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Fused LR-resolution features `[1, C, h, w]`, absent for bicubic
    /// conditioning.
    pub features: Option<Var>,
    /// Attention node for kinds with temporal attention.
    pub attention: Option<Var>,
}

impl Network {
    pub fn build<F: Real>(spec: &ModelSpec, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let kind = spec.kind;
        let encoder = match kind {
            ModelKind::SrdiffBicubic => None,
            k if k.uses_highres_encoder() => Some(Encoder::Highres(HighresEncoder::new(store, spec, rng))),
            _ => Some(Encoder::Rrdb(RrdbEncoder::new(store, spec, rng))),
        };
        let fusion = match kind {
            ModelKind::HighresnetRecursive => {
                Fusion::Recursive(RecursiveFusion::new(store, "fusion", spec.base_channels, rng))
            }
            k if k.uses_attention() => Fusion::Attention(Ltae2d::new(
                store,
                "fusion",
                spec.base_channels,
                &spec.ltae,
                &spec.encoding,
                rng,
            )?),
            _ => Fusion::None,
        };
        let (decoder, diffusion) = if kind.is_diffusion() {
            let cc = spec.diffusion.cond_channels;
            let project = (kind != ModelKind::SrdiffBicubic).then(|| {
                Conv2d::new(
                    store,
                    "diffusion.project",
                    spec.base_channels,
                    cc * spec.scale * spec.scale,
                    3,
                    1.0,
                    rng,
                )
            });
            let cond = 3 + if project.is_some() { cc } else { 0 };
            let denoiser = Denoiser::new(store, "diffusion.unet", &spec.diffusion, cond, rng)?;
            (None, Some(DiffusionHead { project, denoiser }))
        } else {
            (Some(Decoder::new(store, spec, rng)?), None)
        };
        Ok(Self {
            spec: spec.clone(),
            encoder,
            fusion,
            decoder,
            diffusion,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Encodes every frame: `[T, 3, h, w]` -> `[T, C, h, w]`.
    fn encode<F: Real>(&self, tape: &mut Tape<'_, F>, input: &ModelInput<F>) -> Result<Option<Var>> {
        let Some(encoder) = &self.encoder else {
            return Ok(None);
        };
        let x = tape.input(input.frames.clone());
        Ok(Some(match encoder {
            Encoder::Rrdb(e) => e.forward(tape, x),
            Encoder::Highres(e) => {
                let reference = input
                    .reference
                    .as_ref()
                    .ok_or_else(|| Error::domain("HighRes-net encoder needs a reference image"))?;
                let t = input.frames.shape()[0];
                let r = tape.input(reference.clone());
                let refs = tape.concat_batch(&vec![r; t]);
                let joined = tape.concat_channels(&[x, refs]);
                e.forward(tape, joined)
            }
        }))
    }

    /// Per-frame encoding followed by temporal fusion.
    pub fn features<F: Real>(&self, tape: &mut Tape<'_, F>, input: &ModelInput<F>) -> Result<Forward> {
        let Some(encoded) = self.encode(tape, input)? else {
            return Ok(Forward {
                features: None,
                attention: None,
            });
        };
        Ok(match &self.fusion {
            Fusion::None => Forward {
                features: Some(encoded),
                attention: None,
            },
            Fusion::Recursive(f) => Forward {
                features: Some(f.forward(tape, encoded, &input.order)),
                attention: None,
            },
            Fusion::Attention(l) => {
                let enc = input
                    .encoding
                    .as_ref()
                    .ok_or_else(|| Error::domain("attention fusion needs date encodings"))?;
                let (fused, attn) = l.forward(tape, encoded, enc)?;
                Forward {
                    features: Some(fused),
                    attention: Some(attn),
                }
            }
        })
    }

    /// SR prediction `[1, 3, H, W]` of a deterministic kind.
    pub fn predict<F: Real>(&self, tape: &mut Tape<'_, F>, input: &ModelInput<F>) -> Result<(Var, Forward)> {
        let decoder = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::usage(format!("{} is sampled, not decoded", self.spec.kind)))?;
        let fwd = self.features(tape, input)?;
        let feats = fwd.features.expect("decoder kinds always encode");
        Ok((decoder.forward(tape, feats), fwd))
    }

    /// Conditioning stack for the noise predictor, `[1, cond, H, W]`.
    pub fn diffusion_condition<F: Real>(&self, tape: &mut Tape<'_, F>, input: &ModelInput<F>) -> Result<Var> {
        let head = self
            .diffusion
            .as_ref()
            .ok_or_else(|| Error::usage(format!("{} has no diffusion decoder", self.spec.kind)))?;
        let anchor = input
            .anchor
            .as_ref()
            .ok_or_else(|| Error::domain("diffusion input lacks the upsampled anchor"))?;
        let anchor = tape.input(anchor.clone());
        let fwd = self.features(tape, input)?;
        Ok(match (&head.project, fwd.features) {
            (Some(p), Some(f)) => {
                let projected = p.forward(tape, f);
                let projected = tape.pixel_shuffle(projected, self.spec.scale);
                tape.concat_channels(&[anchor, projected])
            }
            (None, _) => anchor,
            (Some(_), None) => return Err(Error::config("conditioner produced no features")),
        })
    }

    pub fn predict_noise<F: Real>(&self, tape: &mut Tape<'_, F>, x_t: Var, t: usize, cond: Var) -> Result<Var> {
        let head = self
            .diffusion
            .as_ref()
            .ok_or_else(|| Error::usage(format!("{} has no diffusion decoder", self.spec.kind)))?;
        head.denoiser.forward(tape, x_t, t, cond)
    }
}

/// A model specification with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SrModel {
    network: Network,
    params: ParamStore<f32>,
}

impl SrModel {
    /// Freshly initialised model; initialisation is a pure function of
    /// `spec` and `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let network = Network::build(&spec, &mut params, &mut rng)?;
        Ok(Self { network, params })
    }

    /// Rebuilds the architecture and installs saved parameters, checking
    /// names and shapes.
    pub fn from_parts(spec: ModelSpec, saved: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        if saved.len() != model.params.len() {
            return Err(Error::State(format!(
                "checkpoint has {} tensors, architecture expects {}",
                saved.len(),
                model.params.len()
            )));
        }
        for (name, value) in saved {
            let id = model
                .params
                .find(&name)
                .ok_or_else(|| Error::State(format!("unexpected tensor {name}")))?;
            if model.params.get(id).shape() != value.shape() {
                return Err(Error::State(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    value.shape(),
                    model.params.get(id).shape()
                )));
            }
            model.params.set(id, value);
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        self.network.spec()
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Per-frame features `[C, h, w]` of one LR frame (HighRes-net kinds
    /// need the reference image, RRDB kinds must not get one).
    pub fn encode_frame(&self, lr: &Raster, reference: Option<&Raster>) -> Result<Array3<f32>> {
        let encoder = self
            .network
            .encoder
            .as_ref()
            .ok_or_else(|| Error::usage(format!("{} has no frame encoder", self.spec().kind)))?;
        let mut tape = Tape::new(&self.params);
        let x = tape.input(raster_tensor(lr));
        let out = match (encoder, reference) {
            (Encoder::Highres(e), Some(r)) => {
                if r.dims() != lr.dims() {
                    return Err(Error::domain(format!(
                        "reference is {:?}, frame is {:?}",
                        r.dims(),
                        lr.dims()
                    )));
                }
                let rv = tape.input(raster_tensor(r));
                let joined = tape.concat_channels(&[x, rv]);
                e.forward(&mut tape, joined)
            }
            (Encoder::Rrdb(e), None) => e.forward(&mut tape, x),
            (Encoder::Highres(_), None) => {
                return Err(Error::domain("HighRes-net encoder needs a reference image"))
            }
            (Encoder::Rrdb(_), Some(_)) => {
                return Err(Error::domain("RRDB encoder takes no reference image"))
            }
        };
        Ok(tensor_raster(tape.value(out)).into_data())
    }

    /// Decodes a fused feature map `[C, h, w]` to an unclipped raster.
    pub fn decode(&self, fused: &Array3<f32>) -> Result<Raster> {
        let decoder = self
            .network
            .decoder
            .as_ref()
            .ok_or_else(|| Error::usage(format!("{} has no decoder", self.spec().kind)))?;
        let (c, h, w) = fused.dim();
        if c != self.spec().base_channels {
            return Err(Error::domain(format!(
                "decoder expects {} channels, got {c}",
                self.spec().base_channels
            )));
        }
        if !fused.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("feature map contains non-finite values"));
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.input(Tensor::from_vec(&[1, c, h, w], fused.iter().copied().collect()));
        let y = decoder.forward(&mut tape, x);
        Ok(tensor_raster(tape.value(y)))
    }

    /// Super-resolves `series` at its reference date. Diffusion kinds use
    /// sampling seed 0; see [`SrModel::super_resolve_seeded`].
    pub fn super_resolve(&self, series: &TimedSeries) -> Result<Raster> {
        self.super_resolve_seeded(series, 0)
    }

    pub fn super_resolve_seeded(&self, series: &TimedSeries, seed: u64) -> Result<Raster> {
        Ok(self.run(series, seed, false)?.0)
    }

    /// Super-resolution together with the attention maps, when the kind has
    /// temporal attention.
    pub fn super_resolve_with_attention(&self, series: &TimedSeries) -> Result<(Raster, Option<AttentionMaps>)> {
        self.run(series, 0, true)
    }

    fn run(&self, series: &TimedSeries, seed: u64, want_maps: bool) -> Result<(Raster, Option<AttentionMaps>)> {
        let spec = self.spec();
        let input = ModelInput::<f32>::new(spec, series)?;
        if spec.kind.is_diffusion() {
            let head = self.network.diffusion.as_ref().expect("diffusion kind");
            let (cond, maps) = {
                let mut tape = Tape::new(&self.params);
                let cond = self.network.diffusion_condition(&mut tape, &input)?;
                (tape.value(cond).clone(), None)
            };
            let schedule = NoiseSchedule::from_config(&spec.diffusion)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let residual = sample_residual(&self.params, &head.denoiser, &schedule, &cond, &mut rng)?;
            let anchor = input.anchor.as_ref().expect("diffusion anchor");
            let data: Vec<f32> = anchor.data().iter().zip(&residual).map(|(a, r)| a + r).collect();
            let out = Tensor::from_vec(anchor.shape(), data);
            return Ok((tensor_raster(&out).clipped(), maps));
        }
        let mut tape = Tape::new(&self.params);
        let (y, fwd) = self.network.predict(&mut tape, &input)?;
        let maps = match (want_maps, fwd.attention) {
            (true, Some(a)) => {
                let (t, _, h, w) = input.frames.dims4();
                Some(AttentionMaps {
                    heads: spec.encoding.heads,
                    frames: t,
                    height: h,
                    width: w,
                    weights: tape.attention_weights(a).expect("attention node").to_vec(),
                })
            }
            _ => None,
        };
        Ok((tensor_raster(tape.value(y)).clipped(), maps))
    }
}
