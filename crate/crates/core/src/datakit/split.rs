use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrackRecord, Trajectory};
use crate::error::{Error, Result};

pub const SPLIT_FORMAT: &str = "msvr-split";
pub const SPLIT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoView {
    Near,
    Far,
}

impl PseudoView {
    pub fn opposite(self) -> PseudoView {
        match self {
            PseudoView::Near => PseudoView::Far,
            PseudoView::Far => PseudoView::Near,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdPartition {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainImage {
    pub image: String,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestImage {
    pub image: String,
    pub id: u64,
    pub view: PseudoView,
    pub video_id: String,
}

impl TestImage {
    /// The pseudo-camera this image was taken from: one per (video, view).
    pub fn camera(&self) -> String {
        let view = match self.view {
            PseudoView::Near => "near",
            PseudoView::Far => "far",
        };
        format!("{}/{view}", self.video_id)
    }
}

/// Training images plus single-shot probe and gallery sets.
///
/// Image paths are relative to `image_root`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSplit {
    pub format: String,
    pub version: u32,
    pub image_root: String,
    pub seed: u64,
    pub id_partition: IdPartition,
    pub train: Vec<TrainImage>,
    pub probe: Vec<TestImage>,
    pub gallery: Vec<TestImage>,
}

impl BenchmarkSplit {
    /// Checks disjoint id halves, one probe and one gallery image per test
    /// id, and opposite pseudo-views within each id.
    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<u64> = self.id_partition.train.iter().copied().collect();
        let test: BTreeSet<u64> = self.id_partition.test.iter().copied().collect();
        if let Some(id) = train.intersection(&test).next() {
            return Err(Error::Protocol(format!("id {id} is in both the train and test halves")));
        }
        if let Some(img) = self.train.iter().find(|i| !train.contains(&i.id)) {
            return Err(Error::Protocol(format!("train image {} has non-train id {}", img.image, img.id)));
        }
        let index = |set: &[TestImage], name: &str| -> Result<BTreeMap<u64, PseudoView>> {
            let mut seen = BTreeMap::new();
            for img in set {
                if !test.contains(&img.id) {
                    return Err(Error::Protocol(format!("{name} image {} has non-test id {}", img.image, img.id)));
                }
                if seen.insert(img.id, img.view).is_some() {
                    return Err(Error::Protocol(format!("{name} has more than one image for id {}", img.id)));
                }
            }
            Ok(seen)
        };
        let probe = index(&self.probe, "probe")?;
        let gallery = index(&self.gallery, "gallery")?;
        if probe.len() != gallery.len() {
            return Err(Error::Protocol(format!("probe has {} ids but gallery has {}", probe.len(), gallery.len())));
        }
        for (id, view) in &probe {
            match gallery.get(id) {
                None => return Err(Error::Protocol(format!("probe id {id} is missing from the gallery"))),
                Some(g) if g == view => {
                    return Err(Error::Protocol(format!("probe and gallery images of id {id} share a pseudo-view")))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Shuffles `ids` with `seed` and returns `(train, test)` halves of sizes
/// ⌈n/2⌉ and ⌊n/2⌋, each sorted ascending.
pub fn split_ids(ids: &[u64], seed: u64) -> Result<(Vec<u64>, Vec<u64>)> {
    let unique: BTreeSet<u64> = ids.iter().copied().collect();
    if unique.len() != ids.len() {
        return Err(Error::Contract("split_ids needs distinct ids".into()));
    }
    if ids.len() < 2 {
        return Err(Error::Protocol(format!("need at least 2 ids to split, got {}", ids.len())));
    }
    // Shuffle a canonical ordering so the caller's order does not matter.
    let mut shuffled: Vec<u64> = unique.into_iter().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(shuffled.len().div_ceil(2));
    let mut train = shuffled;
    let mut test = test;
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Tags each record near or far: the ⌈n/2⌉ largest boxes by area are near,
/// the rest far. Equal areas rank earlier frames first.
pub fn assign_pseudo_views(trajectory: &Trajectory) -> Vec<PseudoView> {
    let records = &trajectory.records;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&records[a], &records[b]);
        rb.bbox.area().cmp(&ra.bbox.area()).then(ra.frame_index.cmp(&rb.frame_index))
    });
    let n_near = records.len().div_ceil(2);
    let mut views = vec![PseudoView::Far; records.len()];
    for &i in &order[..n_near] {
        views[i] = PseudoView::Near;
    }
    views
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub seed: u64,
    /// Keep every k-th frame of each training trajectory, from a random
    /// offset in `0..k`.
    pub train_frame_step: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { seed: 7, train_frame_step: 2 }
    }
}

/// Builds train/probe/gallery sets from filtered trajectories.
///
/// Test ids missing either pseudo-view are skipped with a warning; they
/// stay in the test half of `id_partition`.
pub fn build_split(trajectories: &[Trajectory], image_root: &str, config: &SplitConfig) -> Result<BenchmarkSplit> {
    if config.train_frame_step == 0 {
        return Err(Error::Param("train_frame_step must be at least 1".into()));
    }
    let mut by_id: BTreeMap<u64, Vec<&Trajectory>> = BTreeMap::new();
    for t in trajectories {
        if let Some(r) = t.records.iter().find(|r| r.identity != t.identity || r.video_id != t.video_id) {
            return Err(Error::Data(format!(
                "trajectory of id {} in video {} contains a record of id {} in video {}",
                t.identity, t.video_id, r.identity, r.video_id
            )));
        }
        by_id.entry(t.identity).or_default().push(t);
    }
    let ids: Vec<u64> = by_id.keys().copied().collect();
    let (train_ids, test_ids) = split_ids(&ids, config.seed)?;

    // Independent streams so that, e.g., changing the train step does not
    // reshuffle the probe/gallery draw.
    let mut train_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6169_6e00_0001);
    let mut test_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7465_7374_0000_0002);

    let k = config.train_frame_step;
    let mut train = Vec::new();
    for id in &train_ids {
        for t in &by_id[id] {
            let offset = train_rng.random_range(0..k);
            train.extend(t.records.iter().skip(offset).step_by(k).map(|r| TrainImage { image: r.image_path.clone(), id: *id }));
        }
    }

    let mut probe = Vec::new();
    let mut gallery = Vec::new();
    for id in &test_ids {
        let mut near: Vec<&TrackRecord> = Vec::new();
        let mut far: Vec<&TrackRecord> = Vec::new();
        for t in &by_id[id] {
            for (r, v) in t.records.iter().zip(assign_pseudo_views(t)) {
                match v {
                    PseudoView::Near => near.push(r),
                    PseudoView::Far => far.push(r),
                }
            }
        }
        if near.is_empty() || far.is_empty() {
            log::warn!("test id {id} lacks a near or far image; skipped");
            continue;
        }
        let pick = |rng: &mut ChaCha8Rng, bucket: &[&TrackRecord], view| {
            let r = bucket[rng.random_range(0..bucket.len())];
            TestImage { image: r.image_path.clone(), id: *id, view, video_id: r.video_id.clone() }
        };
        let near_img = pick(&mut test_rng, &near, PseudoView::Near);
        let far_img = pick(&mut test_rng, &far, PseudoView::Far);
        if test_rng.random::<bool>() {
            probe.push(near_img);
            gallery.push(far_img);
        } else {
            probe.push(far_img);
            gallery.push(near_img);
        }
    }

    let split = BenchmarkSplit {
        format: SPLIT_FORMAT.into(),
        version: SPLIT_VERSION,
        image_root: image_root.to_string(),
        seed: config.seed,
        id_partition: IdPartition { train: train_ids, test: test_ids },
        train,
        probe,
        gallery,
    };
    split.validate()?;
    Ok(split)
}

pub fn write_split(path: &Path, split: &BenchmarkSplit) -> Result<()> {
    let mut text = serde_json::to_string_pretty(split).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<BenchmarkSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split: BenchmarkSplit = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if split.format != SPLIT_FORMAT || split.version != SPLIT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "unsupported split format {:?} version {} (expected {SPLIT_FORMAT:?} version {SPLIT_VERSION})",
                split.format, split.version
            ),
        });
    }
    split.validate()?;
    Ok(split)
}
