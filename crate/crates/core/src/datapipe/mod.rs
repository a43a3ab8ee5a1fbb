//! Preprocessing between raw imagery and model-ready samples.

mod store;
mod synth;

use std::path::PathBuf;

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sits::{
    closest_order, DatasetManifest, Frame, ManifestRecord, Raster, Split, SrSample, TimedSeries,
    Timestamp, ValueRange,
};

pub use store::{Dataset, MANIFEST_FILE, NORM_FILE, SAMPLES_DIR};
pub use synth::{
    degrade, generate as synth_generate, generate_one as synth_generate_one, paint_clouds, CloudBlob,
    SceneModel, SynthConfig, SynthSample, Wave,
};

/// Lower and upper percentile per channel for one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub low: Vec<f32>,
    pub high: Vec<f32>,
}

/// Normalization statistics per source, estimated on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub lr: ChannelRange,
    pub hr: ChannelRange,
}

pub const LOW_PERCENTILE: f64 = 2.0;
pub const HIGH_PERCENTILE: f64 = 98.0;
/// Cap on pixels drawn per channel when estimating percentiles.
pub const MAX_PERCENTILE_SAMPLES: usize = 10_000_000;

/// Linear-interpolated percentile of sorted data (`p` in 0..=100).
pub fn percentile_sorted(sorted: &[f32], p: f64) -> f32 {
    assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    (sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac) as f32
}

impl ChannelRange {
    /// Estimates 2nd/98th percentiles per channel, drawing at most
    /// `max_samples` pixels per channel uniformly at random.
    pub fn fit<'a>(
        rasters: impl IntoIterator<Item = &'a Raster>,
        max_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut per_channel: Vec<Vec<f32>> = Vec::new();
        for r in rasters {
            let (c, _, _) = r.dims();
            if per_channel.is_empty() {
                per_channel = vec![Vec::new(); c];
            } else if per_channel.len() != c {
                return Err(Error::domain("rasters disagree on channel count"));
            }
            for (ch, plane) in r.data().axis_iter(Axis(0)).enumerate() {
                per_channel[ch].extend(plane.iter().copied());
            }
        }
        if per_channel.is_empty() || per_channel[0].is_empty() {
            return Err(Error::domain("no pixels to estimate statistics from"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut low = Vec::new();
        let mut high = Vec::new();
        for mut values in per_channel {
            if values.len() > max_samples {
                values.shuffle(&mut rng);
                values.truncate(max_samples);
            }
            values.retain(|v| v.is_finite());
            if values.is_empty() {
                return Err(Error::domain("channel has no finite pixels"));
            }
            values.sort_by(f32::total_cmp);
            low.push(percentile_sorted(&values, LOW_PERCENTILE));
            high.push(percentile_sorted(&values, HIGH_PERCENTILE));
        }
        Ok(Self { low, high })
    }

    pub fn validate(&self) -> Result<()> {
        if self.low.len() != self.high.len() {
            return Err(Error::config("low/high channel counts differ"));
        }
        for (c, (l, h)) in self.low.iter().zip(&self.high).enumerate() {
            if !(l < h) {
                return Err(Error::config(format!(
                    "degenerate statistics for channel {c}: low {l} >= high {h}"
                )));
            }
        }
        Ok(())
    }
}

impl NormStats {
    /// Fits both sources on the given (training) samples.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a SrSample> + Clone, seed: u64) -> Result<Self> {
        let lr = ChannelRange::fit(
            samples
                .clone()
                .into_iter()
                .flat_map(|s| s.lr_series.frames().iter().map(|f| &f.raster)),
            MAX_PERCENTILE_SAMPLES,
            seed,
        )?;
        let hr = ChannelRange::fit(
            samples.into_iter().map(|s| &s.hr),
            MAX_PERCENTILE_SAMPLES,
            seed ^ 0x9e37_79b9,
        )?;
        Ok(Self { lr, hr })
    }

    /// Normalizes every frame and the target of a sample.
    pub fn apply(&self, sample: &SrSample) -> Result<SrSample> {
        Ok(SrSample {
            lr_series: self.apply_series(&sample.lr_series)?,
            hr: percentile_normalize(&sample.hr, &self.hr)?,
            block_id: sample.block_id,
            scale: sample.scale,
        })
    }
}

impl NormStats {
    pub fn apply_series(&self, series: &TimedSeries) -> Result<TimedSeries> {
        let frames = series
            .frames()
            .iter()
            .map(|f| {
                Ok(Frame {
                    raster: percentile_normalize(&f.raster, &self.lr)?,
                    time: f.time,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TimedSeries::new(frames, series.t_ref())
    }

    /// Maps a model output back to the HR source's units.
    pub fn denormalize_hr(&self, raster: &Raster, range: ValueRange) -> Result<Raster> {
        self.hr.validate()?;
        let (c, _, _) = raster.dims();
        if self.hr.low.len() != c {
            return Err(Error::config(format!(
                "statistics for {} channels, raster has {c}",
                self.hr.low.len()
            )));
        }
        let mut data = raster.data().clone();
        for (ch, mut plane) in data.outer_iter_mut().enumerate() {
            let (lo, hi) = (self.hr.low[ch], self.hr.high[ch]);
            plane.mapv_inplace(|v| lo + v * (hi - lo));
        }
        Raster::new(data, range)
    }
}

/// `(x - low) / (high - low)` per channel, clipped to 0..1.
pub fn percentile_normalize(raster: &Raster, stats: &ChannelRange) -> Result<Raster> {
    stats.validate()?;
    let (c, _, _) = raster.dims();
    if stats.low.len() != c {
        return Err(Error::config(format!(
            "statistics for {} channels, raster has {c}",
            stats.low.len()
        )));
    }
    let mut data = raster.data().clone();
    for (ch, mut plane) in data.axis_iter_mut(Axis(0)).enumerate() {
        let lo = stats.low[ch];
        let span = stats.high[ch] - lo;
        plane.mapv_inplace(|v| ((v - lo) / span).clamp(0.0, 1.0));
    }
    Raster::new(data, ValueRange::Unit)
}

/// Remaps each channel of `source` so its empirical distribution follows the
/// matching channel of `reference`.
///
/// A source pixel of mid-rank `r` (ties share the average rank) among `n`
/// pixels maps to the reference quantile at `r / (n - 1)`, interpolated
/// linearly between reference order statistics.
pub fn histogram_match(source: &Raster, reference: &Raster) -> Result<Raster> {
    let (c, h, w) = source.dims();
    let (rc, _, _) = reference.dims();
    if c != rc {
        return Err(Error::domain(format!(
            "source has {c} channels, reference has {rc}"
        )));
    }
    if h * w == 0 {
        return Err(Error::domain("cannot match an empty raster"));
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let src: Vec<f32> = source.data().index_axis(Axis(0), ch).iter().copied().collect();
        let mut refv: Vec<f32> = reference
            .data()
            .index_axis(Axis(0), ch)
            .iter()
            .copied()
            .collect();
        refv.sort_by(f32::total_cmp);
        let ranks = mid_ranks(&src);
        let n = src.len();
        let m = refv.len();
        let mapped: Vec<f32> = ranks
            .iter()
            .map(|&r| {
                let q = if n > 1 { r / (n - 1) as f64 } else { 0.5 };
                interpolate_sorted(&refv, q * (m - 1) as f64)
            })
            .collect();
        out.index_axis_mut(Axis(0), ch)
            .iter_mut()
            .zip(mapped)
            .for_each(|(o, v)| *o = v);
    }
    let mut matched = Raster::new(out, reference.value_range())?;
    matched = matched.with_channels(source.channel_labels().to_vec())?;
    Ok(matched)
}

/// Zero-based ranks with ties replaced by their average rank.
fn mid_ranks(values: &[f32]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

fn interpolate_sorted(sorted: &[f32], pos: f64) -> f32 {
    let lo = pos.floor().max(0.0) as usize;
    let hi = (pos.ceil() as usize).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    (sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac) as f32
}

/// Index of the frame closest in time to the series' reference date, ties
/// going to the earlier frame.
pub fn closest_frame(series: &TimedSeries) -> usize {
    closest_order(&series.timestamps(), series.t_ref())[0]
}

/// Rational resampling factor `num / den` (> 1 enlarges).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub num: u32,
    pub den: u32,
}

impl Factor {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::domain("resampling factor must be positive"));
        }
        Ok(Self { num, den })
    }

    pub fn integer(n: u32) -> Self {
        Self { num: n, den: 1 }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(size * factor)`, at least 1.
    pub fn apply(self, size: usize) -> usize {
        ((size as f64 * self.as_f64()).round() as usize).max(1)
    }
}

/// Catmull-Rom cubic convolution kernel (`a = -0.5`).
pub fn catmull_rom(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Taps for one output coordinate: source indices (edge-clamped) and weights.
fn cubic_taps(dst: usize, inv_factor: f64, len: usize) -> ([usize; 4], [f64; 4]) {
    let src = (dst as f64 + 0.5) * inv_factor - 0.5;
    let base = src.floor();
    let mut idx = [0; 4];
    let mut wts = [0.0; 4];
    for k in 0..4 {
        let pos = base + k as f64 - 1.0;
        idx[k] = pos.clamp(0.0, (len - 1) as f64) as usize;
        wts[k] = catmull_rom(src - pos);
    }
    (idx, wts)
}

/// Separable bicubic resampling with pixel-center alignment and clamped
/// edges. Output size is `round(input * factor)` in each direction. The
/// kernel is not widened when shrinking; blur first to avoid aliasing.
pub fn bicubic_resample(raster: &Raster, factor: Factor) -> Raster {
    let (c, h, w) = raster.dims();
    let (ho, wo) = (factor.apply(h), factor.apply(w));
    let inv = factor.den as f64 / factor.num as f64;
    let xt: Vec<_> = (0..wo).map(|x| cubic_taps(x, inv, w)).collect();
    let yt: Vec<_> = (0..ho).map(|y| cubic_taps(y, inv, h)).collect();
    let mut out = Array3::<f32>::zeros((c, ho, wo));
    let mut rows = vec![0.0f64; h * wo];
    for ch in 0..c {
        let plane = raster.data().index_axis(Axis(0), ch);
        for y in 0..h {
            for (x, (idx, wts)) in xt.iter().enumerate() {
                rows[y * wo + x] = (0..4).map(|k| wts[k] * plane[[y, idx[k]]] as f64).sum();
            }
        }
        let mut dst = out.index_axis_mut(Axis(0), ch);
        for (y, (idx, wts)) in yt.iter().enumerate() {
            for x in 0..wo {
                dst[[y, x]] = (0..4).map(|k| wts[k] * rows[idx[k] * wo + x]).sum::<f64>() as f32;
            }
        }
    }
    Raster::new(out, raster.value_range())
        .expect("nonzero dims")
        .with_channels(raster.channel_labels().to_vec())
        .expect("same channel count")
}

pub fn bicubic_upsample(raster: &Raster, scale: usize) -> Raster {
    bicubic_resample(raster, Factor::integer(scale as u32))
}

/// Cuts aligned, non-overlapping LR/HR patch pairs from a scene; incomplete
/// border patches are dropped.
pub fn make_patches(
    lr_scene: &TimedSeries,
    hr_scene: &Raster,
    lr_size: usize,
    hr_size: usize,
    block_id: u64,
) -> Result<Vec<SrSample>> {
    if lr_size == 0 || hr_size % lr_size != 0 {
        return Err(Error::domain(format!(
            "HR patch {hr_size} is not an integer multiple of LR patch {lr_size}"
        )));
    }
    let scale = hr_size / lr_size;
    let (_, lh, lw) = lr_scene.frame_dims();
    let (_, hh, hw) = hr_scene.dims();
    if hh != scale * lh || hw != scale * lw {
        return Err(Error::domain(format!(
            "HR scene {hh}x{hw} is not {scale}x the LR scene {lh}x{lw}"
        )));
    }
    let mut out = Vec::new();
    for py in 0..lh / lr_size {
        for px in 0..lw / lr_size {
            let (y0, x0) = (py * lr_size, px * lr_size);
            out.push(SrSample {
                lr_series: lr_scene.crop(y0, x0, lr_size, lr_size)?,
                hr: hr_scene.crop(scale * y0, scale * x0, hr_size, hr_size)?,
                block_id,
                scale,
            });
        }
    }
    Ok(out)
}

/// Sample reference passed to [`block_split`].
#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub path: PathBuf,
    pub block_id: u64,
    pub t_ref: Timestamp,
    pub timestamps: Vec<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    /// Share of blocks for training (validation included).
    pub train: f64,
    pub test: f64,
    /// Share of the training blocks held out for validation.
    pub val_fraction: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            test: 0.3,
            val_fraction: 0.1,
        }
    }
}

/// Block counts `(train, val, test)` for `n` blocks.
pub fn split_counts(n: usize, ratios: &SplitRatios) -> Result<(usize, usize, usize)> {
    if (ratios.train + ratios.test - 1.0).abs() > 1e-9
        || !(0.0..=1.0).contains(&ratios.train)
        || !(0.0..1.0).contains(&ratios.val_fraction)
    {
        return Err(Error::config(format!(
            "train + test must equal 1 and val_fraction lie in [0, 1): {ratios:?}"
        )));
    }
    let splits = if ratios.val_fraction > 0.0 { 3 } else { 2 };
    if n < splits {
        return Err(Error::domain(format!(
            "{n} blocks cannot fill {splits} splits"
        )));
    }
    let pool = ((ratios.train * n as f64).round() as usize).clamp(splits - 1, n - 1);
    let val = if splits == 3 {
        ((ratios.val_fraction * pool as f64).round() as usize).clamp(1, pool - 1)
    } else {
        0
    };
    Ok((pool - val, val, n - pool))
}

/// Assigns whole geographic blocks to train/val/test.
///
/// Deterministic in the set of block ids and `seed`; every tile inherits its
/// block's split.
pub fn block_split(tiles: &[TileRecord], ratios: &SplitRatios, seed: u64) -> Result<DatasetManifest> {
    let mut blocks: Vec<u64> = tiles.iter().map(|t| t.block_id).collect();
    blocks.sort_unstable();
    blocks.dedup();
    let (train, val, _) = split_counts(blocks.len(), ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    blocks.shuffle(&mut rng);
    let assignment: std::collections::HashMap<u64, Split> = blocks
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            (b, split)
        })
        .collect();
    Ok(DatasetManifest {
        records: tiles
            .iter()
            .map(|t| ManifestRecord {
                path: t.path.clone(),
                block_id: t.block_id,
                t_ref: t.t_ref,
                timestamps: t.timestamps.clone(),
                split: assignment[&t.block_id],
            })
            .collect(),
    })
}

/// Separable Gaussian blur with clamped edges; `sigma` in pixels.
pub fn gaussian_blur(raster: &Raster, sigma: f64) -> Raster {
    if sigma <= 0.0 {
        return raster.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (c, h, w) = raster.dims();
    let mut out = Array3::<f32>::zeros((c, h, w));
    let mut tmp = vec![0.0f64; h * w];
    for ch in 0..c {
        let plane = raster.data().index_axis(Axis(0), ch);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| {
                        let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                        kv * plane[[y, xx]] as f64
                    })
                    .sum();
            }
        }
        let mut dst = out.index_axis_mut(Axis(0), ch);
        for y in 0..h {
            for x in 0..w {
                dst[[y, x]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| {
                        let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                        kv * tmp[yy * w + x]
                    })
                    .sum::<f64>() as f32;
            }
        }
    }
    Raster::new(out, raster.value_range()).expect("nonzero dims")
}

/// Draws a random aligned crop of `lr_size` LR pixels from a sample.
pub fn random_crop(sample: &SrSample, lr_size: usize, rng: &mut impl Rng) -> Result<SrSample> {
    let (_, h, w) = sample.lr_series.frame_dims();
    if lr_size > h || lr_size > w {
        return Err(Error::config(format!(
            "crop {lr_size} larger than LR frames {h}x{w}"
        )));
    }
    let y0 = rng.gen_range(0..=h - lr_size);
    let x0 = rng.gen_range(0..=w - lr_size);
    let s = sample.scale;
    Ok(SrSample {
        lr_series: sample.lr_series.crop(y0, x0, lr_size, lr_size)?,
        hr: sample.hr.crop(s * y0, s * x0, s * lr_size, s * lr_size)?,
        block_id: sample.block_id,
        scale: s,
    })
}
