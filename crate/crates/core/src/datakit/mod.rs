//! Benchmark construction: manifests of per-frame vehicle boxes, trajectory
//! filtering, identity splitting, near/far pseudo-views and single-shot
//! probe/gallery sampling.
//!
//! Manifest files are UTF-8 TSV. The first line is the version header
//! `#msvr-manifest<TAB>v1`, the second names the columns
//!
//! ```text
//! video_id  track_id  frame_index  x  y  w  h  image_path  identity
//! ```
//!
//! and every further line is one bounding box. Image paths are relative to
//! the manifest's directory.

mod split;
mod stats;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use split::{
    assign_pseudo_views, build_split, read_split, split_ids, write_split, BenchmarkSplit, IdPartition, PseudoView,
    SplitConfig, TestImage, TrainImage,
};
pub use stats::{compute_stats, write_histogram_csv, DatasetStats, HistogramBin, HISTOGRAM_BIN};
pub use synthetic::{generate_synthetic, render_dataset, SyntheticConfig, SyntheticDataset, VehicleIdentity};

pub const MANIFEST_HEADER: &str = "#msvr-manifest\tv1";
pub const MANIFEST_COLUMNS: &str = "video_id\ttrack_id\tframe_index\tx\ty\tw\th\timage_path\tidentity";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub video_id: String,
    pub track_id: u64,
    pub frame_index: u64,
    pub bbox: BBox,
    pub image_path: String,
    pub identity: u64,
}

/// The boxes of one vehicle in one video, in frame order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub identity: u64,
    pub video_id: String,
    pub records: Vec<TrackRecord>,
}

/// Groups records by `(video_id, identity)` and orders each group by frame.
///
/// Fails when a group repeats a frame index.
pub fn group_trajectories(records: &[TrackRecord]) -> Result<Vec<Trajectory>> {
    let mut groups: BTreeMap<(u64, &str), Vec<TrackRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.identity, r.video_id.as_str())).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|((identity, video_id), mut records)| {
            records.sort_by_key(|r| r.frame_index);
            if let Some(w) = records.windows(2).find(|w| w[0].frame_index == w[1].frame_index) {
                return Err(Error::Data(format!(
                    "identity {identity} in video {video_id} repeats frame {}",
                    w[0].frame_index
                )));
            }
            Ok(Trajectory { identity, video_id: video_id.to_string(), records })
        })
        .collect()
}

/// Length and box-size rules for usable trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterRules {
    pub min_frames: usize,
    pub min_box_side: u32,
}

impl Default for FilterRules {
    fn default() -> Self {
        FilterRules { min_frames: 20, min_box_side: 24 }
    }
}

/// Drops trajectories shorter than `min_frames`, then drops boxes narrower
/// or shorter than `min_box_side` from the survivors, then applies the
/// length rule again to what is left.
pub fn filter_trajectories(trajectories: &[Trajectory], rules: &FilterRules) -> Vec<Trajectory> {
    trajectories
        .iter()
        .filter(|t| t.records.len() >= rules.min_frames)
        .map(|t| Trajectory {
            records: t
                .records
                .iter()
                .filter(|r| r.bbox.w >= rules.min_box_side && r.bbox.h >= rules.min_box_side)
                .cloned()
                .collect(),
            ..t.clone()
        })
        .filter(|t| t.records.len() >= rules.min_frames)
        .collect()
}

// --------------------------------------------------------------------------
// Manifest IO

pub fn format_manifest(records: &[TrackRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 2));
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    out.push_str(MANIFEST_COLUMNS);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.video_id, r.track_id, r.frame_index, r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h, r.image_path, r.identity
        )
        .expect("writing to a String");
    }
    out
}

pub fn write_manifest(path: &Path, records: &[TrackRecord]) -> Result<()> {
    fs::write(path, format_manifest(records)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<TrackRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

/// Parses manifest text; `origin` only labels error messages.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<TrackRecord>> {
    let err = |line: usize, message: String| Error::Format { path: origin.to_path_buf(), line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim_end() == MANIFEST_HEADER => {}
        Some((_, l)) => return Err(err(1, format!("expected version header {MANIFEST_HEADER:?}, found {l:?}"))),
        None => return Err(err(1, "empty manifest".into())),
    }
    match lines.next() {
        Some((_, l)) if l.trim_end() == MANIFEST_COLUMNS => {}
        Some((n, l)) => return Err(err(n, format!("unexpected column header {l:?}"))),
        None => return Err(err(2, "missing column header".into())),
    }
    let mut records = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 9 {
            return Err(err(n, format!("expected 9 tab-separated fields, found {}", fields.len())));
        }
        let num = |i: usize, name: &str| -> Result<u64> {
            fields[i].trim().parse::<u64>().map_err(|_| err(n, format!("field {name} is not a non-negative integer: {:?}", fields[i])))
        };
        let side = |i: usize, name: &str| -> Result<u32> {
            let v = num(i, name)?;
            u32::try_from(v).map_err(|_| err(n, format!("field {name} out of range: {v}")))
        };
        let bbox = BBox { x: side(3, "x")?, y: side(4, "y")?, w: side(5, "w")?, h: side(6, "h")? };
        if bbox.w == 0 || bbox.h == 0 {
            return Err(err(n, "bounding box must have positive width and height".into()));
        }
        if fields[0].is_empty() || fields[7].is_empty() {
            return Err(err(n, "video_id and image_path must be non-empty".into()));
        }
        records.push(TrackRecord {
            video_id: fields[0].to_string(),
            track_id: num(1, "track_id")?,
            frame_index: num(2, "frame_index")?,
            bbox,
            image_path: fields[7].to_string(),
            identity: num(8, "identity")?,
        });
    }
    Ok(records)
}
