//! Core data types: rasters, acquisition dates, timed series, supervised
//! samples, and dataset manifests, plus their on-disk layout.
//!
//! A sample lives in its own directory:
//!
//! ```text
//! <sample>/lr.npy      T x C x H x W float32
//! <sample>/hr.npy      C x sH x sW float32
//! <sample>/meta.json   {"timestamps": [...], "t_ref": d, "block_id": b, "scale": s}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default tolerance, in days, for a reference date lying outside the span
/// of acquisition dates.
pub const DEFAULT_SLACK_DAYS: i64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// Normalized to 0..1.
    #[default]
    Unit,
    /// 0..255.
    ByteScale,
}

impl ValueRange {
    pub fn max_value(self) -> f32 {
        match self {
            ValueRange::Unit => 1.0,
            ValueRange::ByteScale => 255.0,
        }
    }
}

/// A C x H x W image patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    data: Array3<f32>,
    value_range: ValueRange,
    channels: Vec<String>,
}

fn default_channels(c: usize) -> Vec<String> {
    const RGB: [&str; 3] = ["R", "G", "B"];
    if c == 3 {
        RGB.iter().map(|s| s.to_string()).collect()
    } else {
        (0..c).map(|i| format!("band{i}")).collect()
    }
}

impl Raster {
    /// Wraps a C x H x W array. Every dimension must be nonzero.
    ///
    /// Finiteness is not enforced here so that malformed data can still be
    /// loaded and reported by [`validate_sample`].
    pub fn new(data: Array3<f32>, value_range: ValueRange) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::domain(format!(
                "raster dimensions must be nonzero, got {c}x{h}x{w}"
            )));
        }
        let channels = default_channels(c);
        Ok(Self {
            data,
            value_range,
            channels,
        })
    }

    pub fn unit(data: Array3<f32>) -> Result<Self> {
        Self::new(data, ValueRange::Unit)
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::new(Array3::zeros((c, h, w)), ValueRange::Unit).expect("nonzero dims")
    }

    pub fn with_channels(mut self, channels: Vec<String>) -> Result<Self> {
        if channels.len() != self.data.dim().0 {
            return Err(Error::domain(format!(
                "{} channel labels for a {}-channel raster",
                channels.len(),
                self.data.dim().0
            )));
        }
        self.channels = channels;
        Ok(self)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn value_range(&self) -> ValueRange {
        self.value_range
    }

    pub fn channel_labels(&self) -> &[String] {
        &self.channels
    }

    /// `(channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, mapped element-wise.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Raster {
        Raster {
            data: self.data.mapv(f),
            value_range: self.value_range,
            channels: self.channels.clone(),
        }
    }

    /// Clips to the raster's value range.
    pub fn clipped(&self) -> Raster {
        let hi = self.value_range.max_value();
        self.map(|v| v.clamp(0.0, hi))
    }

    /// Rescales a unit-range raster to 0..255, clipping out-of-range values.
    pub fn to_byte_scale(&self) -> Raster {
        match self.value_range {
            ValueRange::ByteScale => self.clipped(),
            ValueRange::Unit => Raster {
                data: self.data.mapv(|v| v.clamp(0.0, 1.0) * 255.0),
                value_range: ValueRange::ByteScale,
                channels: self.channels.clone(),
            },
        }
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Raster> {
        let (_, hh, ww) = self.dims();
        if h == 0 || w == 0 || y0 + h > hh || x0 + w > ww {
            return Err(Error::domain(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {hh}x{ww} raster"
            )));
        }
        Ok(Raster {
            data: self.data.slice(s![.., y0..y0 + h, x0..x0 + w]).to_owned(),
            value_range: self.value_range,
            channels: self.channels.clone(),
        })
    }
}

/// Acquisition date as whole days since 1970-01-01.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn from_days(epoch_day: i64) -> Self {
        Timestamp(epoch_day)
    }

    pub fn epoch_day(self) -> i64 {
        self.0
    }

    /// Signed difference `self - other` in days.
    pub fn days_since(self, other: Timestamp) -> i64 {
        self.0 - other.0
    }

    pub fn shifted(self, days: i64) -> Timestamp {
        Timestamp(self.0 + days)
    }

    pub fn from_date(date: NaiveDate) -> Self {
        let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch");
        Timestamp((date - epoch).num_days())
    }

    /// Parses either an integer epoch day or an ISO `YYYY-MM-DD` date.
    /// Fractional days are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if let Ok(d) = text.parse::<i64>() {
            return Ok(Timestamp(d));
        }
        if text.parse::<f64>().is_ok() {
            return Err(Error::Parse(format!(
                "timestamp {text:?} has sub-day precision; dates are whole days"
            )));
        }
        NaiveDate::parse_from_str(text, "%Y-%m-%d")
            .map(Self::from_date)
            .map_err(|e| Error::Parse(format!("invalid date {text:?}: {e}")))
    }

    pub fn to_date(self) -> Option<NaiveDate> {
        let epoch = NaiveDate::from_ymd_opt(1970, 1, 1)?;
        epoch.checked_add_signed(chrono::Duration::days(self.0))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.to_date() {
            Some(d) => write!(f, "{}", d.format("%Y-%m-%d")),
            None => write!(f, "day {}", self.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub raster: Raster,
    pub time: Timestamp,
}

/// Low-resolution frames with their acquisition dates and the date the
/// output should depict. Frames need not be sorted or have unique dates.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedSeries {
    frames: Vec<Frame>,
    t_ref: Timestamp,
}

impl TimedSeries {
    /// Requires at least one frame and a shared shape and value range.
    pub fn new(frames: Vec<Frame>, t_ref: Timestamp) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::domain("a timed series needs at least one frame"))?;
        let dims = first.raster.dims();
        let range = first.raster.value_range();
        for (k, f) in frames.iter().enumerate() {
            if f.raster.dims() != dims {
                return Err(Error::domain(format!(
                    "frame {k} has shape {:?}, expected {:?}",
                    f.raster.dims(),
                    dims
                )));
            }
            if f.raster.value_range() != range {
                return Err(Error::domain(format!("frame {k} has a different value range")));
            }
        }
        Ok(Self { frames, t_ref })
    }

    /// Builds a series from a `T x C x H x W` stack.
    pub fn from_stack(
        stack: &Array4<f32>,
        times: &[Timestamp],
        t_ref: Timestamp,
        range: ValueRange,
    ) -> Result<Self> {
        if stack.dim().0 != times.len() {
            return Err(Error::domain(format!(
                "{} frames but {} timestamps",
                stack.dim().0,
                times.len()
            )));
        }
        let frames = stack
            .axis_iter(Axis(0))
            .zip(times)
            .map(|(a, &time)| {
                Ok(Frame {
                    raster: Raster::new(a.to_owned(), range)?,
                    time,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, t_ref)
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn t_ref(&self) -> Timestamp {
        self.t_ref
    }

    pub fn timestamps(&self) -> Vec<Timestamp> {
        self.frames.iter().map(|f| f.time).collect()
    }

    /// `(C, H, W)` shared by all frames.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        self.frames[0].raster.dims()
    }

    pub fn value_range(&self) -> ValueRange {
        self.frames[0].raster.value_range()
    }

    /// Same frames, different target date.
    pub fn with_t_ref(&self, t_ref: Timestamp) -> TimedSeries {
        TimedSeries {
            frames: self.frames.clone(),
            t_ref,
        }
    }

    /// Every date (frames and reference) moved by `days`.
    pub fn shifted(&self, days: i64) -> TimedSeries {
        TimedSeries {
            frames: self
                .frames
                .iter()
                .map(|f| Frame {
                    raster: f.raster.clone(),
                    time: f.time.shifted(days),
                })
                .collect(),
            t_ref: self.t_ref.shifted(days),
        }
    }

    /// Keeps the listed frames, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Result<TimedSeries> {
        let frames = indices
            .iter()
            .map(|&i| {
                self.frames
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::domain(format!("frame index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        TimedSeries::new(frames, self.t_ref)
    }

    /// Keeps the `n` frames closest to the reference date (ties toward the
    /// earlier frame), preserving their original relative order.
    pub fn keep_closest(&self, n: usize) -> Result<TimedSeries> {
        if n == 0 {
            return Err(Error::domain("cannot keep zero frames"));
        }
        let mut idx = closest_order(&self.timestamps(), self.t_ref);
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }

    /// `(min, max)` acquisition date.
    pub fn span(&self) -> (Timestamp, Timestamp) {
        let times = self.timestamps();
        let lo = *times.iter().min().expect("nonempty");
        let hi = *times.iter().max().expect("nonempty");
        (lo, hi)
    }

    /// Whether `t` lies within the acquisition span widened by `slack` days.
    pub fn admits_reference(&self, t: Timestamp, slack: i64) -> bool {
        let (lo, hi) = self.span();
        t.0 >= lo.0 - slack && t.0 <= hi.0 + slack
    }

    /// Stacks the frames into a `T x C x H x W` array.
    pub fn stack(&self) -> Array4<f32> {
        let (c, h, w) = self.frame_dims();
        let mut out = Array4::zeros((self.len(), c, h, w));
        for (k, f) in self.frames.iter().enumerate() {
            out.index_axis_mut(Axis(0), k).assign(f.raster.data());
        }
        out
    }

    /// Spatial crop applied to every frame.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<TimedSeries> {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                Ok(Frame {
                    raster: f.raster.crop(y0, x0, h, w)?,
                    time: f.time,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TimedSeries::new(frames, self.t_ref)
    }
}

/// Frame indices sorted by `|t_k - t_ref|`, ties toward the earlier date and
/// then the lower index.
pub fn closest_order(times: &[Timestamp], t_ref: Timestamp) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..times.len()).collect();
    idx.sort_by_key(|&k| (times[k].days_since(t_ref).abs(), times[k], k));
    idx
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct SrSample {
    pub lr_series: TimedSeries,
    pub hr: Raster,
    pub block_id: u64,
    pub scale: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn violation(field: impl Into<String>, rule: impl Into<String>) -> Violation {
    Violation {
        field: field.into(),
        rule: rule.into(),
    }
}

/// Checks every sample invariant and reports the ones that fail. Never
/// errors; an empty list means the sample is well formed.
pub fn validate_sample(sample: &SrSample) -> Vec<Violation> {
    validate_sample_with_slack(sample, DEFAULT_SLACK_DAYS)
}

pub fn validate_sample_with_slack(sample: &SrSample, slack: i64) -> Vec<Violation> {
    let mut out = Vec::new();
    let series = &sample.lr_series;
    if series.is_empty() {
        out.push(violation("lr_series.frames", "at least one frame required"));
        return out;
    }
    let (c, h, w) = series.frame_dims();
    for (k, f) in series.frames().iter().enumerate() {
        if f.raster.dims() != (c, h, w) {
            out.push(violation(
                format!("lr_series.frames[{k}]"),
                "all frames must share C, H, W",
            ));
        }
        if f.raster.value_range() != series.value_range() {
            out.push(violation(
                format!("lr_series.frames[{k}]"),
                "all frames must share the value range",
            ));
        }
        if !f.raster.is_finite() {
            out.push(violation(
                format!("lr_series.frames[{k}].data"),
                "values must be finite",
            ));
        }
    }
    if !series.admits_reference(series.t_ref(), slack) {
        let (lo, hi) = series.span();
        out.push(violation(
            "lr_series.t_ref",
            format!(
                "reference day {} outside [{}, {}] +/- {slack} days",
                series.t_ref().0,
                lo.0,
                hi.0
            ),
        ));
    }
    if sample.scale == 0 {
        out.push(violation("scale", "scale must be a positive integer"));
    }
    let (hc, hh, hw) = sample.hr.dims();
    if hc != c {
        out.push(violation(
            "hr.channels",
            format!("HR has {hc} channels, LR has {c}"),
        ));
    }
    if sample.scale > 0 && (hh != sample.scale * h || hw != sample.scale * w) {
        out.push(violation(
            "hr.shape",
            format!(
                "HR is {hh}x{hw}, expected {}x{} for scale {} and LR {h}x{w}",
                sample.scale * h,
                sample.scale * w,
                sample.scale
            ),
        ));
    }
    if !sample.hr.is_finite() {
        out.push(violation("hr.data", "values must be finite"));
    }
    out
}

/// Sidecar written next to each sample's arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub timestamps: Vec<Timestamp>,
    pub t_ref: Timestamp,
    pub block_id: u64,
    pub scale: usize,
    #[serde(default)]
    pub value_range: ValueRange,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<Vec<String>>,
}

const LR_FILE: &str = "lr.npy";
const HR_FILE: &str = "hr.npy";
const META_FILE: &str = "meta.json";

pub fn write_sample(dir: &Path, sample: &SrSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let lr_path = dir.join(LR_FILE);
    write_npy(&lr_path, &sample.lr_series.stack())
        .map_err(|e| Error::Parse(format!("{}: {e}", lr_path.display())))?;
    let hr_path = dir.join(HR_FILE);
    write_npy(&hr_path, sample.hr.data())
        .map_err(|e| Error::Parse(format!("{}: {e}", hr_path.display())))?;
    let meta = SampleMeta {
        timestamps: sample.lr_series.timestamps(),
        t_ref: sample.lr_series.t_ref(),
        block_id: sample.block_id,
        scale: sample.scale,
        value_range: sample.hr.value_range(),
        channels: Some(sample.hr.channel_labels().to_vec()),
    };
    write_json(&dir.join(META_FILE), &meta)
}

pub fn read_sample(dir: &Path) -> Result<SrSample> {
    let meta: SampleMeta = read_json(&dir.join(META_FILE))?;
    let lr_path = dir.join(LR_FILE);
    let lr: Array4<f32> =
        read_npy(&lr_path).map_err(|e| Error::Parse(format!("{}: {e}", lr_path.display())))?;
    let hr_path = dir.join(HR_FILE);
    let hr: Array3<f32> =
        read_npy(&hr_path).map_err(|e| Error::Parse(format!("{}: {e}", hr_path.display())))?;
    let mut hr = Raster::new(hr, meta.value_range)?;
    let mut series = TimedSeries::from_stack(&lr, &meta.timestamps, meta.t_ref, meta.value_range)?;
    if let Some(ch) = meta.channels {
        hr = hr.with_channels(ch.clone())?;
        let frames = series
            .frames()
            .iter()
            .map(|f| {
                Ok(Frame {
                    raster: f.raster.clone().with_channels(ch.clone())?,
                    time: f.time,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        series = TimedSeries::new(frames, meta.t_ref)?;
    }
    Ok(SrSample {
        lr_series: series,
        hr,
        block_id: meta.block_id,
        scale: meta.scale,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub block_id: u64,
    pub t_ref: Timestamp,
    pub timestamps: Vec<Timestamp>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Split assigned to each block; errors if a block carries two tags.
    pub fn block_splits(&self) -> Result<BTreeMap<u64, Split>> {
        let mut map = BTreeMap::new();
        for r in &self.records {
            if let Some(prev) = map.insert(r.block_id, r.split) {
                if prev != r.split {
                    return Err(Error::domain(format!(
                        "block {} appears in both {prev} and {}",
                        r.block_id, r.split
                    )));
                }
            }
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}
