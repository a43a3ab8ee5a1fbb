//! Synthetic paired LR series / HR target generator.
//!
//! Each sample comes from a continuous scene function `S(x, t)`: Voronoi
//! parcels with a base colour and a linear per-parcel drift, plus a smooth
//! static field. The HR target is `S(., t_ref)` on the HR grid; every LR frame
//! is a blurred, downsampled, radiometrically perturbed and noisy render of
//! `S(., t_k)`, optionally with clouds painted on top.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{bicubic_resample, gaussian_blur, Factor};
use crate::error::{Error, Result};
use crate::sits::{Frame, Raster, SrSample, TimedSeries, Timestamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub samples: usize,
    /// LR side length in pixels; HR is `lr_size * scale`.
    pub lr_size: usize,
    pub scale: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Closest acquisition lies `U{0..=max_ref_gap}` days from `t_ref`.
    pub max_ref_gap: u32,
    /// Revisit gaps are `revisit_unit * U{1..=revisit_max_mult}` days.
    pub revisit_unit: u32,
    pub revisit_max_mult: u32,
    /// Gaussian blur before downsampling, in HR pixels.
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Per-frame, per-channel gain drawn from `1 +/- gain_jitter`.
    pub gain_jitter: f64,
    pub bias_jitter: f64,
    pub cloud_p: f64,
    /// Cloud ellipse semi-axis upper bound, in LR pixels.
    pub blob_size: f64,
    /// Largest per-day drift of a parcel's green channel.
    pub dynamics_rate: f64,
    pub parcels: usize,
    /// Samples sharing a geographic block.
    pub block_size: usize,
    /// First possible reference date.
    pub start: Timestamp,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            lr_size: 32,
            scale: 4,
            min_len: 8,
            max_len: 26,
            max_ref_gap: 60,
            revisit_unit: 5,
            revisit_max_mult: 3,
            blur_sigma: 1.6,
            noise_sigma: 0.04,
            gain_jitter: 0.05,
            bias_jitter: 0.02,
            cloud_p: 0.2,
            blob_size: 8.0,
            dynamics_rate: 0.004,
            parcels: 20,
            block_size: 16,
            start: Timestamp(17_532), // 2018-01-01
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        prob("cloud_p", self.cloud_p)?;
        prob("gain_jitter", self.gain_jitter)?;
        prob("bias_jitter", self.bias_jitter)?;
        if self.samples == 0 || self.lr_size == 0 || self.scale == 0 || self.parcels == 0 {
            return Err(Error::config(
                "samples, lr_size, scale and parcels must be positive",
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "series length range {}..={} is empty",
                self.min_len, self.max_len
            )));
        }
        if self.revisit_unit == 0 || self.revisit_max_mult == 0 || self.block_size == 0 {
            return Err(Error::config(
                "revisit_unit, revisit_max_mult and block_size must be positive",
            ));
        }
        for (name, v) in [
            ("blur_sigma", self.blur_sigma),
            ("noise_sigma", self.noise_sigma),
            ("blob_size", self.blob_size),
            ("dynamics_rate", self.dynamics_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.cloud_p > 0.0 && self.blob_size < 1.0 {
            return Err(Error::config("blob_size must be at least 1 LR pixel"));
        }
        Ok(())
    }

    pub fn hr_size(&self) -> usize {
        self.lr_size * self.scale
    }
}

/// Static sinusoid shared by all dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: [f64; 3],
    /// Cycles per HR pixel.
    pub freq: [f64; 2],
    pub phase: f64,
}

/// Continuous scene function sampled on the HR grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneModel {
    pub height: usize,
    pub width: usize,
    /// Date at which the drift term vanishes.
    pub origin: Timestamp,
    /// Parcel seeds as `(y, x)` in HR pixel units.
    pub seeds: Vec<[f64; 2]>,
    pub base: Vec<[f64; 3]>,
    /// Per-day change of each parcel.
    pub rate: Vec<[f64; 3]>,
    pub waves: Vec<Wave>,
}

impl SceneModel {
    fn draw(cfg: &SynthConfig, origin: Timestamp, rng: &mut impl Rng) -> Self {
        let size = cfg.hr_size() as f64;
        let seeds = (0..cfg.parcels)
            .map(|_| [rng.gen_range(0.0..size), rng.gen_range(0.0..size)])
            .collect();
        // independent colours and drift directions, so a single frame does
        // not reveal how far a parcel has drifted
        let base = (0..cfg.parcels)
            .map(|_| std::array::from_fn(|_| rng.gen_range(0.25..0.65)))
            .collect();
        let rate = (0..cfg.parcels)
            .map(|_| std::array::from_fn(|_| cfg.dynamics_rate * rng.gen_range(-1.0..=1.0)))
            .collect();
        let waves = (0..3)
            .map(|_| Wave {
                amplitude: [
                    rng.gen_range(-0.03..0.03),
                    rng.gen_range(-0.03..0.03),
                    rng.gen_range(-0.03..0.03),
                ],
                freq: [rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)],
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            })
            .collect();
        Self {
            height: cfg.hr_size(),
            width: cfg.hr_size(),
            origin,
            seeds,
            base,
            rate,
            waves,
        }
    }

    /// Nearest seed for every HR pixel centre (ties to the lower index).
    pub fn parcel_map(&self) -> Array2<usize> {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (i, s) in self.seeds.iter().enumerate() {
                let d = (s[0] - py).powi(2) + (s[1] - px).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            best.1
        })
    }

    fn static_part(&self, parcels: &Array2<usize>) -> Array3<f64> {
        Array3::from_shape_fn((3, self.height, self.width), |(c, y, x)| {
            let waves: f64 = self
                .waves
                .iter()
                .map(|w| {
                    w.amplitude[c]
                        * (std::f64::consts::TAU * (w.freq[0] * y as f64 + w.freq[1] * x as f64)
                            + w.phase)
                            .sin()
                })
                .sum();
            self.base[parcels[[y, x]]][c] + waves
        })
    }

    /// Per-pixel, per-channel drift in units per day, `[3, H, W]`.
    pub fn dynamics(&self) -> Array3<f32> {
        let parcels = self.parcel_map();
        Array3::from_shape_fn((3, self.height, self.width), |(c, y, x)| {
            self.rate[parcels[[y, x]]][c] as f32
        })
    }

    /// HR render of the scene at date `t`.
    pub fn render(&self, t: Timestamp) -> Raster {
        let parcels = self.parcel_map();
        self.render_with(&parcels, &self.static_part(&parcels), t)
    }

    fn render_with(&self, parcels: &Array2<usize>, fixed: &Array3<f64>, t: Timestamp) -> Raster {
        let dt = t.days_since(self.origin) as f64;
        let data = Array3::from_shape_fn(fixed.dim(), |(c, y, x)| {
            (fixed[[c, y, x]] + self.rate[parcels[[y, x]]][c] * dt) as f32
        });
        Raster::unit(data).expect("scene is non-empty")
    }
}

/// Soft-edged elliptical cloud in LR pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudBlob {
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub angle: f64,
    pub brightness: f32,
}

/// Share of the normalised radius over which a cloud fades out.
const CLOUD_EDGE: f64 = 0.35;

impl CloudBlob {
    pub fn alpha(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.center[0], x - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.axes[1];
        let v = (-s * dx + c * dy) / self.axes[0];
        let r = (u * u + v * v).sqrt();
        ((1.0 - r) / CLOUD_EDGE).clamp(0.0, 1.0)
    }
}

/// Paints blobs over `raster` in place and returns the combined opacity mask.
pub fn paint_clouds(raster: &mut Raster, blobs: &[CloudBlob]) -> Array2<f32> {
    let (c, h, w) = raster.dims();
    let mut mask = Array2::<f32>::zeros((h, w));
    let mut data = raster.data().clone();
    for blob in blobs {
        for y in 0..h {
            for x in 0..w {
                let a = blob.alpha(y as f64 + 0.5, x as f64 + 0.5) as f32;
                if a == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    let v = &mut data[[ch, y, x]];
                    *v = *v * (1.0 - a) + blob.brightness * a;
                }
                mask[[y, x]] = mask[[y, x]].max(a);
            }
        }
    }
    *raster = Raster::new(data, raster.value_range())
        .expect("same shape")
        .with_channels(raster.channel_labels().to_vec())
        .expect("same channels");
    mask
}

fn draw_blob(lr_size: usize, max_axis: f64, rng: &mut impl Rng) -> CloudBlob {
    // centre on a pixel centre so at least that pixel is fully opaque
    let cy = rng.gen_range(0..lr_size) as f64 + 0.5;
    let cx = rng.gen_range(0..lr_size) as f64 + 0.5;
    let lo = (max_axis / 2.0).max(1.0);
    CloudBlob {
        center: [cy, cx],
        axes: [rng.gen_range(lo..=max_axis), rng.gen_range(lo..=max_axis)],
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        brightness: rng.gen_range(0.85..=1.0),
    }
}

/// Acquisition dates around `t_ref`: the nearest one `gap` days away and, for
/// series longer than one, frames on both sides.
fn draw_dates(cfg: &SynthConfig, t_ref: Timestamp, rng: &mut impl Rng) -> Vec<Timestamp> {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let gap = rng.gen_range(0..=cfg.max_ref_gap) as i64;
    let revisit = |rng: &mut dyn rand::RngCore| {
        (cfg.revisit_unit * rng.gen_range(1..=cfg.revisit_max_mult)) as i64
    };
    if len == 1 {
        let sign = if rng.gen_bool(0.5) { 1 } else { -1 };
        return vec![t_ref.shifted(sign * gap)];
    }
    let before = rng.gen_range(1..len);
    let after = len - before;
    let near_is_before = rng.gen_bool(0.5);
    let far = gap + rng.gen_range(0..=(cfg.revisit_unit * cfg.revisit_max_mult) as i64);
    let (start_before, start_after) = if near_is_before { (gap, far) } else { (far, gap) };

    let mut dates = Vec::with_capacity(len);
    let mut off = start_before;
    for _ in 0..before {
        dates.push(t_ref.shifted(-off));
        off += revisit(rng);
    }
    let mut off = start_after.max(1);
    for _ in 0..after {
        dates.push(t_ref.shifted(off));
        off += revisit(rng);
    }
    dates.sort();
    dates.dedup();
    dates
}

/// One generated example together with its ground-truth side information.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample: SrSample,
    pub scene: SceneModel,
    /// Cloud opacity per LR frame, `[T, h, w]`.
    pub cloud_masks: Array3<f32>,
}

/// Degrades an HR render into one LR acquisition (no clouds).
pub fn degrade(hr: &Raster, cfg: &SynthConfig, rng: &mut impl Rng) -> Raster {
    let blurred = gaussian_blur(hr, cfg.blur_sigma);
    let mut lr = bicubic_resample(&blurred, Factor::new(1, cfg.scale as u32).expect("scale > 0"));
    let mut data = lr.data().clone();
    for mut plane in data.axis_iter_mut(Axis(0)) {
        let gain = if cfg.gain_jitter > 0.0 {
            1.0 + rng.gen_range(-cfg.gain_jitter..=cfg.gain_jitter)
        } else {
            1.0
        };
        let bias = if cfg.bias_jitter > 0.0 {
            rng.gen_range(-cfg.bias_jitter..=cfg.bias_jitter)
        } else {
            0.0
        };
        plane.mapv_inplace(|v| (gain * v as f64 + bias) as f32);
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma >= 0");
        data.mapv_inplace(|v| v + noise.sample(rng) as f32);
    }
    lr = Raster::unit(data).expect("non-empty");
    lr
}

/// Generates sample `index` of the dataset described by `cfg`; independent of
/// every other index.
pub fn generate_one(cfg: &SynthConfig, index: usize) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let t_ref = cfg.start.shifted(rng.gen_range(0..365));
    let scene = SceneModel::draw(cfg, t_ref, &mut rng);
    let parcels = scene.parcel_map();
    let fixed = scene.static_part(&parcels);
    let hr = scene.render_with(&parcels, &fixed, t_ref);

    let dates = draw_dates(cfg, t_ref, &mut rng);
    let mut frames = Vec::with_capacity(dates.len());
    let mut masks = Array3::zeros((dates.len(), cfg.lr_size, cfg.lr_size));
    for (k, &t) in dates.iter().enumerate() {
        let mut lr = degrade(&scene.render_with(&parcels, &fixed, t), cfg, &mut rng);
        if cfg.cloud_p > 0.0 && rng.gen_bool(cfg.cloud_p) {
            let blobs: Vec<_> = (0..rng.gen_range(1..=2))
                .map(|_| draw_blob(cfg.lr_size, cfg.blob_size, &mut rng))
                .collect();
            let mask = paint_clouds(&mut lr, &blobs);
            masks.index_axis_mut(Axis(0), k).assign(&mask);
        }
        frames.push(Frame { raster: lr, time: t });
    }
    Ok(SynthSample {
        sample: SrSample {
            lr_series: TimedSeries::new(frames, t_ref)?,
            hr,
            block_id: (index / cfg.block_size) as u64,
            scale: cfg.scale,
        },
        scene,
        cloud_masks: masks,
    })
}

/// Generates the whole dataset; output is a pure function of `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    (0..cfg.samples).map(|i| generate_one(cfg, i)).collect()
}
