//! Sinusoidal encodings of irregular acquisition dates.
//!
//! Both encodings produce one row per frame, `d = c_e / heads` entries wide,
//! with entry `i` (one-based) equal to `sin(delta / tau^(i/d))`. They differ
//! only in the origin of `delta`:
//!
//! * [`absolute_encoding`]: days since the earliest frame of the series;
//! * [`relative_encoding`]: signed days from the target date, `t_k - t_ref`.
//!
//! The relative variant depends on each frame's own date and the target date
//! only, so adding, removing or globally shifting frames leaves the other
//! rows untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sits::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingConfig {
    /// Characteristic time scale, in days.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Total embedding dimension across heads.
    #[serde(default = "default_c_e")]
    pub c_e: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
}

fn default_tau() -> f64 {
    1000.0
}
fn default_c_e() -> usize {
    64
}
fn default_heads() -> usize {
    4
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            c_e: default_c_e(),
            heads: default_heads(),
        }
    }
}

impl EncodingConfig {
    pub fn new(tau: f64, c_e: usize, heads: usize) -> Result<Self> {
        let cfg = Self { tau, c_e, heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.heads == 0 || self.c_e == 0 {
            return Err(Error::config("c_e and heads must be positive"));
        }
        if self.c_e % self.heads != 0 {
            return Err(Error::config(format!(
                "c_e = {} is not divisible by heads = {}",
                self.c_e, self.heads
            )));
        }
        Ok(())
    }

    /// Per-head encoding width `c_e / heads`.
    pub fn head_dim(&self) -> usize {
        self.c_e / self.heads
    }
}

/// `T x d` matrix, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PositionalEncoding {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Keeps the listed rows in the listed order.
    pub fn select(&self, indices: &[usize]) -> PositionalEncoding {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &k in indices {
            values.extend_from_slice(self.row(k));
        }
        PositionalEncoding {
            rows: indices.len(),
            dim: self.dim,
            values,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::domain("encoding rows must be nonempty and equally long"));
        }
        Ok(PositionalEncoding {
            rows: rows.len(),
            dim,
            values: rows.into_iter().flatten().collect(),
        })
    }
}

fn encode_offsets(offsets: impl Iterator<Item = i64>, cfg: &EncodingConfig) -> Result<PositionalEncoding> {
    cfg.validate()?;
    let d = cfg.head_dim();
    let periods: Vec<f64> = (1..=d).map(|i| cfg.tau.powf(i as f64 / d as f64)).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for delta in offsets {
        let delta = delta as f64;
        values.extend(periods.iter().map(|p| (delta / p).sin()));
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::domain("cannot encode an empty list of dates"));
    }
    Ok(PositionalEncoding {
        rows,
        dim: d,
        values,
    })
}

/// Encodes each date by the number of days since the earliest date in the
/// list.
pub fn absolute_encoding(timestamps: &[Timestamp], cfg: &EncodingConfig) -> Result<PositionalEncoding> {
    let origin = timestamps
        .iter()
        .min()
        .copied()
        .ok_or_else(|| Error::domain("cannot encode an empty list of dates"))?;
    encode_offsets(timestamps.iter().map(|t| t.days_since(origin)), cfg)
}

/// Encodes each date by its signed offset `t_k - t_ref` from the target date.
pub fn relative_encoding(
    timestamps: &[Timestamp],
    t_ref: Timestamp,
    cfg: &EncodingConfig,
) -> Result<PositionalEncoding> {
    encode_offsets(timestamps.iter().map(|t| t.days_since(t_ref)), cfg)
}
