//! Image quality metrics and time-gap stratified reports.
//!
//! Every metric compares images on the 0..255 byte scale: unit-range rasters
//! are rescaled (and clipped) first.

use std::fmt;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backbones::{select_input, SrModel};
use crate::datapipe::{bicubic_upsample, closest_frame};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape, Tensor};
use crate::sits::{Raster, SrSample};

fn byte_pair(a: &Raster, b: &Raster) -> Result<(Array3<f64>, Array3<f64>)> {
    if a.dims() != b.dims() {
        return Err(Error::domain(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((
        a.to_byte_scale().data().mapv(|v| v as f64),
        b.to_byte_scale().data().mapv(|v| v as f64),
    ))
}

pub fn mae(a: &Raster, b: &Raster) -> Result<f64> {
    let (a, b) = byte_pair(a, b)?;
    Ok((&a - &b).mapv(f64::abs).mean().unwrap_or(0.0))
}

fn mse(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    (a - b).mapv(|d| d * d).mean().unwrap_or(0.0)
}

pub fn rmse(a: &Raster, b: &Raster) -> Result<f64> {
    let (a, b) = byte_pair(a, b)?;
    Ok(mse(&a, &b).sqrt())
}

/// `10 log10(255^2 / MSE)`; `+inf` for identical images.
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    let (a, b) = byte_pair(a, b)?;
    let m = mse(&a, &b);
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64 * 255.0 / m).log10()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftMaeConfig {
    /// Largest shift in pixels; must be even.
    pub delta: usize,
}

impl Default for ShiftMaeConfig {
    fn default() -> Self {
        Self { delta: 6 }
    }
}

impl ShiftMaeConfig {
    pub fn margin(&self) -> usize {
        self.delta / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta % 2 != 0 {
            return Err(Error::config(format!(
                "shift delta must be even, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Smallest MAE between the centre crop of `sr` (margin `delta / 2` on every
/// border) and the equally sized HR windows with top-left corner in
/// `{0..=delta}^2`. The unshifted alignment is offset `(margin, margin)`.
pub fn shift_mae(sr: &Raster, hr: &Raster, cfg: &ShiftMaeConfig) -> Result<f64> {
    Ok(shift_mae_with_offset(sr, hr, cfg)?.0)
}

/// [`shift_mae`] together with the minimising offset `(u, v)`; ties go to
/// the first offset in row-major order.
pub fn shift_mae_with_offset(sr: &Raster, hr: &Raster, cfg: &ShiftMaeConfig) -> Result<(f64, (usize, usize))> {
    cfg.validate()?;
    let (sr, hr) = byte_pair(sr, hr)?;
    let (_, h, w) = sr.dim();
    let m = cfg.margin();
    if h < 2 * m + 1 || w < 2 * m + 1 {
        return Err(Error::domain(format!(
            "{h}x{w} image is too small for shift margin {m}"
        )));
    }
    let (ch, cw) = (h - 2 * m, w - 2 * m);
    let center = sr.slice(s![.., m..m + ch, m..m + cw]);
    let mut best = (f64::INFINITY, (0, 0));
    for u in 0..=cfg.delta {
        for v in 0..=cfg.delta {
            let window = hr.slice(s![.., u..u + ch, v..v + cw]);
            let total: f64 = window
                .iter()
                .zip(center.iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            let value = total / center.len() as f64;
            if value < best.0 {
                best = (value, (u, v));
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    Array2::from_shape_fn((size, size), |(i, j)| g[i] * g[j] / (total * total))
}

/// Weighted local statistics over every full window position.
fn filter_valid(img: ArrayView2<f64>, win: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = win.nrows();
    Array2::from_shape_fn((h - k + 1, w - k + 1), |(y, x)| {
        let patch = img.slice(s![y..y + k, x..x + k]);
        (&patch * win).sum()
    })
}

fn ssim_plane(a: ArrayView2<f64>, b: ArrayView2<f64>, win: &Array2<f64>, c1: f64, c2: f64) -> f64 {
    let mu_a = filter_valid(a, win);
    let mu_b = filter_valid(b, win);
    let aa = filter_valid((&a * &a).view(), win);
    let bb = filter_valid((&b * &b).view(), win);
    let ab = filter_valid((&a * &b).view(), win);
    let mut acc = 0.0;
    for (((ma, mb), (xaa, xbb)), xab) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter().zip(bb.iter()))
        .zip(ab.iter())
    {
        let va = xaa - ma * ma;
        let vb = xbb - mb * mb;
        let cov = xab - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    acc / mu_a.len() as f64
}

/// Mean SSIM over Gaussian-weighted windows fully inside the image,
/// averaged over channels.
pub fn ssim_with(a: &Raster, b: &Raster, cfg: &SsimConfig) -> Result<f64> {
    let (a, b) = byte_pair(a, b)?;
    let (c, h, w) = a.dim();
    if h < cfg.window || w < cfg.window {
        return Err(Error::domain(format!(
            "{h}x{w} image is smaller than the {0}x{0} SSIM window",
            cfg.window
        )));
    }
    let win = gaussian_window(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * 255.0).powi(2);
    let c2 = (cfg.k2 * 255.0).powi(2);
    let total: f64 = (0..c)
        .map(|ch| ssim_plane(a.index_axis(Axis(0), ch), b.index_axis(Axis(0), ch), &win, c1, c2))
        .sum();
    Ok(total / c as f64)
}

pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

/// Maps an image to a pyramid of feature maps `[C, H, W]`.
pub trait FeatureExtractor {
    fn features(&self, image: &Raster) -> Result<Vec<Array3<f64>>>;
}

/// Deterministic stand-in for a learned perceptual network: random 3x3
/// convolutions with leaky ReLU and 2x pooling between levels. Its
/// distances are only comparable with each other, not with LPIPS.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomPyramid {
    weights: Vec<Tensor<f64>>,
}

impl RandomPyramid {
    pub fn new(levels: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let weights = (0..levels)
            .map(|_| {
                let w = Tensor::uniform(&[channels, cin, 3, 3], (6.0 / (cin * 9) as f64).sqrt(), &mut rng);
                cin = channels;
                w
            })
            .collect();
        Self { weights }
    }
}

impl Default for RandomPyramid {
    fn default() -> Self {
        Self::new(3, 16, 0x5eed)
    }
}

impl FeatureExtractor for RandomPyramid {
    fn features(&self, image: &Raster) -> Result<Vec<Array3<f64>>> {
        let unit = image.to_byte_scale().data().mapv(|v| v as f64 / 255.0);
        let (c, h, w) = unit.dim();
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let mut x = tape.input(Tensor::from_vec(&[1, c, h, w], unit.iter().copied().collect()));
        let mut out = Vec::new();
        for (i, weight) in self.weights.iter().enumerate() {
            if i > 0 {
                let (_, _, hh, ww) = tape.value(x).dims4();
                if hh < 2 || ww < 2 {
                    break;
                }
                if hh % 2 == 1 || ww % 2 == 1 {
                    let t = tape.value(x).clone();
                    let (n, cc, _, _) = t.dims4();
                    let cropped = Array3::from_shape_vec((cc, hh, ww), t.into_data())
                        .expect("shape")
                        .slice(s![.., ..hh / 2 * 2, ..ww / 2 * 2])
                        .to_owned();
                    x = tape.input(Tensor::from_vec(&[n, cc, hh / 2 * 2, ww / 2 * 2], cropped.iter().copied().collect()));
                }
                x = tape.avg_pool2(x);
            }
            let wv = tape.input(weight.clone());
            let y = tape.conv2d(x, wv, None, 1);
            x = tape.leaky_relu(y, 0.2);
            let (_, cc, hh, ww) = tape.value(x).dims4();
            out.push(
                Array3::from_shape_vec((cc, hh, ww), tape.value(x).data().to_vec()).expect("shape"),
            );
        }
        Ok(out)
    }
}

/// Mean over scales of the per-pixel squared distance between
/// channel-normalised features.
pub fn perceptual_distance(a: &Raster, b: &Raster, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::domain("shape mismatch"));
    }
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    if fa.len() != fb.len() || fa.is_empty() {
        return Err(Error::domain("extractor returned mismatched pyramids"));
    }
    let normalise = |f: &Array3<f64>| {
        let norm = f.map_axis(Axis(0), |v| v.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-10);
        f / &norm.insert_axis(Axis(0))
    };
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let d = normalise(x) - normalise(y);
        let per_pixel = d.mapv(|v| v * v).sum_axis(Axis(0));
        total += per_pixel.mean().unwrap_or(0.0);
    }
    Ok(total / fa.len() as f64)
}

/// Bins of the gap between the reference date and the closest acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GapStratum {
    #[serde(rename = "<10")]
    Under10,
    #[serde(rename = "10-30")]
    From10To30,
    #[serde(rename = ">30")]
    Over30,
}

impl GapStratum {
    pub const ALL: [GapStratum; 3] = [GapStratum::Under10, GapStratum::From10To30, GapStratum::Over30];

    pub fn of_gap(days: i64) -> Self {
        match days.abs() {
            d if d < 10 => GapStratum::Under10,
            d if d <= 30 => GapStratum::From10To30,
            _ => GapStratum::Over30,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GapStratum::Under10 => "<10",
            GapStratum::From10To30 => "10-30",
            GapStratum::Over30 => ">30",
        }
    }
}

impl fmt::Display for GapStratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// JSON has no infinities: non-finite values travel as strings.
mod lenient_float {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub mae: f64,
    pub shift_mae: f64,
    pub rmse: f64,
    #[serde(with = "lenient_float")]
    pub psnr: f64,
    pub ssim: f64,
    /// Proxy perceptual distance; absent when disabled.
    pub perceptual: Option<f64>,
}

impl MetricValues {
    fn mean<'a>(values: impl Iterator<Item = &'a MetricValues> + Clone) -> Option<Self> {
        let n = values.clone().count();
        if n == 0 {
            return None;
        }
        let avg = |f: &dyn Fn(&MetricValues) -> f64| values.clone().map(f).sum::<f64>() / n as f64;
        let perceptual = values
            .clone()
            .map(|v| v.perceptual)
            .collect::<Option<Vec<f64>>>()
            .map(|p| p.iter().sum::<f64>() / n as f64);
        Some(Self {
            mae: avg(&|v| v.mae),
            shift_mae: avg(&|v| v.shift_mae),
            rmse: avg(&|v| v.rmse),
            psnr: avg(&|v| v.psnr),
            ssim: avg(&|v| v.ssim),
            perceptual,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub block_id: u64,
    /// Days between the reference date and the closest acquisition.
    pub gap_days: i64,
    pub stratum: GapStratum,
    pub frames: usize,
    #[serde(flatten)]
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub stratum: GapStratum,
    pub count: usize,
    /// Absent for an empty stratum.
    pub mean: Option<MetricValues>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    /// Frames kept per series (closest to the reference date), if limited.
    pub series_length: Option<usize>,
    pub samples: Vec<SampleMetrics>,
    pub mean: Option<MetricValues>,
    pub strata: Vec<StratumSummary>,
}

impl MetricsReport {
    pub fn from_samples(model: impl Into<String>, series_length: Option<usize>, samples: Vec<SampleMetrics>) -> Self {
        let mean = MetricValues::mean(samples.iter().map(|s| &s.values));
        let strata = GapStratum::ALL
            .iter()
            .map(|&stratum| {
                let members = samples.iter().filter(|s| s.stratum == stratum).map(|s| &s.values);
                StratumSummary {
                    stratum,
                    count: members.clone().count(),
                    mean: MetricValues::mean(members),
                }
            })
            .collect();
        Self {
            model: model.into(),
            series_length,
            samples,
            mean,
            strata,
        }
    }

    pub fn stratum(&self, stratum: GapStratum) -> &StratumSummary {
        self.strata
            .iter()
            .find(|s| s.stratum == stratum)
            .expect("all strata present")
    }

    /// Aggregate and per-stratum means as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,series_length,group,count,mae,shift_mae,rmse,psnr,ssim,perceptual\n");
        let n = self.series_length.map(|n| n.to_string()).unwrap_or_default();
        let mut row = |group: &str, count: usize, v: &Option<MetricValues>| {
            let cells = match v {
                Some(v) => format!(
                    "{},{},{},{},{},{}",
                    v.mae,
                    v.shift_mae,
                    v.rmse,
                    v.psnr,
                    v.ssim,
                    v.perceptual.map(|p| p.to_string()).unwrap_or_default()
                ),
                None => ",,,,,".to_string(),
            };
            out.push_str(&format!("{},{n},{group},{count},{cells}\n", self.model));
        };
        row("all", self.samples.len(), &self.mean);
        for s in &self.strata {
            row(s.stratum.label(), s.count, &s.mean);
        }
        out
    }
}

/// Anything that turns a sample into an SR estimate of its target.
pub trait Predictor {
    fn name(&self) -> String;
    fn scale(&self) -> usize;
    fn predict(&self, sample: &SrSample) -> Result<Raster>;
}

/// Runs a trained model on the sample's series, limited to the closest
/// `series_length` frames when set.
#[derive(Debug, Clone)]
pub struct ModelPredictor<'m> {
    pub model: &'m SrModel,
    pub series_length: Option<usize>,
    pub seed: u64,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        self.model.spec().kind.to_string()
    }

    fn scale(&self) -> usize {
        self.model.spec().scale
    }

    fn predict(&self, sample: &SrSample) -> Result<Raster> {
        let series = match self.series_length {
            Some(n) => sample.lr_series.keep_closest(n)?,
            None => sample.lr_series.clone(),
        };
        let input = select_input(self.model.spec().kind, &series)?;
        self.model.super_resolve_seeded(&input, self.seed)
    }
}

/// Bicubic upsample of the closest frame.
#[derive(Debug, Clone, Copy)]
pub struct BicubicBaseline {
    pub scale: usize,
}

impl Predictor for BicubicBaseline {
    fn name(&self) -> String {
        "bicubic".into()
    }

    fn scale(&self) -> usize {
        self.scale
    }

    fn predict(&self, sample: &SrSample) -> Result<Raster> {
        let k = closest_frame(&sample.lr_series);
        Ok(bicubic_upsample(&sample.lr_series.frames()[k].raster, self.scale).clipped())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub shift: ShiftMaeConfig,
    pub ssim: SsimConfig,
    pub perceptual: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shift: ShiftMaeConfig::default(),
            ssim: SsimConfig::default(),
            perceptual: true,
        }
    }
}

/// All metrics for one prediction.
pub fn compare(sr: &Raster, hr: &Raster, cfg: &EvalConfig, extractor: &dyn FeatureExtractor) -> Result<MetricValues> {
    Ok(MetricValues {
        mae: mae(sr, hr)?,
        shift_mae: shift_mae(sr, hr, &cfg.shift)?,
        rmse: rmse(sr, hr)?,
        psnr: psnr(sr, hr)?,
        ssim: ssim_with(sr, hr, &cfg.ssim)?,
        perceptual: if cfg.perceptual {
            Some(perceptual_distance(sr, hr, extractor)?)
        } else {
            None
        },
    })
}

/// Scores `predictor` on every sample and stratifies by reference gap.
pub fn evaluate(
    predictor: &dyn Predictor,
    samples: &[SrSample],
    cfg: &EvalConfig,
    series_length: Option<usize>,
) -> Result<MetricsReport> {
    let extractor = RandomPyramid::default();
    let mut rows = Vec::with_capacity(samples.len());
    for (index, sample) in samples.iter().enumerate() {
        if sample.scale != predictor.scale() {
            return Err(Error::config(format!(
                "model upscales by {}, sample {index} by {}",
                predictor.scale(),
                sample.scale
            )));
        }
        let sr = predictor.predict(sample)?.clipped();
        let series = &sample.lr_series;
        let gap = series.frames()[closest_frame(series)]
            .time
            .days_since(series.t_ref())
            .abs();
        rows.push(SampleMetrics {
            index,
            block_id: sample.block_id,
            gap_days: gap,
            stratum: GapStratum::of_gap(gap),
            frames: series_length.map_or(series.len(), |n| n.min(series.len())),
            values: compare(&sr, &sample.hr, cfg, &extractor)?,
        });
    }
    Ok(MetricsReport::from_samples(predictor.name(), series_length, rows))
}
