//! On-disk dataset layout: `samples/NNNNNN/`, `manifest.json` and
//! `norm_stats.json` under one root.

use std::path::{Path, PathBuf};

use super::{block_split, NormStats, SplitRatios, TileRecord};
use crate::error::{Error, Result};
use crate::sits::{read_json, read_sample, write_json, write_sample, DatasetManifest, Split, SrSample};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NORM_FILE: &str = "norm_stats.json";
pub const SAMPLES_DIR: &str = "samples";

/// A dataset directory with its manifest and normalisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub norm: Option<NormStats>,
}

impl Dataset {
    /// Writes every sample, splits by block and fits normalisation on the
    /// training split.
    pub fn write(root: &Path, samples: &[SrSample], ratios: &SplitRatios, seed: u64) -> Result<Self> {
        let tiles: Vec<TileRecord> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| TileRecord {
                path: Path::new(SAMPLES_DIR).join(format!("{i:06}")),
                block_id: s.block_id,
                t_ref: s.lr_series.t_ref(),
                timestamps: s.lr_series.timestamps(),
            })
            .collect();
        let manifest = block_split(&tiles, ratios, seed)?;
        for (tile, sample) in tiles.iter().zip(samples) {
            write_sample(&root.join(&tile.path), sample)?;
        }
        let train: Vec<&SrSample> = manifest
            .records
            .iter()
            .zip(samples)
            .filter(|(r, _)| r.split == Split::Train)
            .map(|(_, s)| s)
            .collect();
        let norm = NormStats::fit(train.iter().copied(), seed)?;
        manifest.save(&root.join(MANIFEST_FILE))?;
        write_json(&root.join(NORM_FILE), &norm)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            norm: Some(norm),
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::usage(format!("no dataset manifest at {}", manifest_path.display())));
        }
        let manifest = DatasetManifest::load(&manifest_path)?;
        manifest.block_splits()?;
        let norm_path = root.join(NORM_FILE);
        let norm = if norm_path.is_file() {
            Some(read_json(&norm_path)?)
        } else {
            None
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            norm,
        })
    }

    /// Samples of one split in manifest order, as stored.
    pub fn load(&self, split: Split) -> Result<Vec<SrSample>> {
        self.manifest
            .records_in(split)
            .map(|r| read_sample(&self.root.join(&r.path)))
            .collect()
    }

    /// Samples of one split, normalised when statistics are present and
    /// `normalize` is set.
    pub fn load_prepared(&self, split: Split, normalize: bool) -> Result<Vec<SrSample>> {
        let raw = self.load(split)?;
        match (&self.norm, normalize) {
            (Some(norm), true) => raw.iter().map(|s| norm.apply(s)).collect(),
            _ => Ok(raw),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{synth_generate, SynthConfig};

    #[test]
    fn round_trip_keeps_blocks_in_one_split() {
        let cfg = SynthConfig {
            samples: 24,
            lr_size: 8,
            min_len: 2,
            max_len: 4,
            block_size: 2,
            ..SynthConfig::default()
        };
        let samples: Vec<SrSample> = synth_generate(&cfg).unwrap().into_iter().map(|s| s.sample).collect();
        let dir = tempfile::tempdir().unwrap();
        let written = Dataset::write(dir.path(), &samples, &SplitRatios::default(), 3).unwrap();
        let opened = Dataset::open(dir.path()).unwrap();
        assert_eq!(opened, Dataset { root: dir.path().to_path_buf(), ..written });
        let mut total = 0;
        for split in [Split::Train, Split::Val, Split::Test] {
            let loaded = opened.load(split).unwrap();
            assert!(!loaded.is_empty());
            for (rec, s) in opened.manifest.records_in(split).zip(&loaded) {
                let i: usize = rec.path.file_name().unwrap().to_str().unwrap().parse().unwrap();
                assert_eq!(s, &samples[i]);
            }
            total += loaded.len();
        }
        assert_eq!(total, 24);
        opened.manifest.block_splits().unwrap();
        let prepared = opened.load_prepared(Split::Test, true).unwrap();
        assert!(prepared.iter().all(|s| s.hr.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn missing_manifest_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(Error::Usage(_))));
    }
}
