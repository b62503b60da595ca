use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrackRecord;
use crate::error::{Error, Result};

/// Width of the scale histogram bins, in pixels of box height.
pub const HISTOGRAM_BIN: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Inclusive lower edge.
    pub lo: u32,
    /// Exclusive upper edge.
    pub hi: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub images: usize,
    pub identities: usize,
    pub videos: usize,
    pub mean_width: f64,
    pub mean_height: f64,
    /// Box heights bucketed into `HISTOGRAM_BIN`-pixel bins, from the bin
    /// holding the smallest box to the one holding the largest.
    pub height_histogram: Vec<HistogramBin>,
}

pub fn compute_stats(records: &[TrackRecord]) -> DatasetStats {
    let identities: BTreeSet<u64> = records.iter().map(|r| r.identity).collect();
    let videos: BTreeSet<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    let n = records.len();
    let (mean_width, mean_height) = if n == 0 {
        (0.0, 0.0)
    } else {
        let sw: u64 = records.iter().map(|r| r.bbox.w as u64).sum();
        let sh: u64 = records.iter().map(|r| r.bbox.h as u64).sum();
        (sw as f64 / n as f64, sh as f64 / n as f64)
    };
    let mut height_histogram = Vec::new();
    if let (Some(lo), Some(hi)) = (records.iter().map(|r| r.bbox.h).min(), records.iter().map(|r| r.bbox.h).max()) {
        let (first, last) = (lo / HISTOGRAM_BIN, hi / HISTOGRAM_BIN);
        let mut counts = vec![0usize; (last - first + 1) as usize];
        for r in records {
            counts[(r.bbox.h / HISTOGRAM_BIN - first) as usize] += 1;
        }
        height_histogram = counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| {
                let lo = (first + i as u32) * HISTOGRAM_BIN;
                HistogramBin { lo, hi: lo + HISTOGRAM_BIN, count }
            })
            .collect();
    }
    DatasetStats { images: n, identities: identities.len(), videos: videos.len(), mean_width, mean_height, height_histogram }
}

/// Writes the height histogram as `lo,hi,count` CSV rows.
pub fn write_histogram_csv(path: &Path, stats: &DatasetStats) -> Result<()> {
    let mut out = String::from("lo,hi,count\n");
    for b in &stats.height_histogram {
        writeln!(out, "{},{},{}", b.lo, b.hi, b.count).expect("writing to a String");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
