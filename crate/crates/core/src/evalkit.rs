//! Retrieval evaluation: L2 ranking, CMC curves, mean average precision and
//! report emission.
//!
//! Ranks are 1-based throughout. Distance ties are broken by gallery index,
//! so degenerate features still give a deterministic ranking.
//!
//! ```
//! use msvr::evalkit::{average_precision, cmc};
//!
//! // One probe of id 7 whose true matches sit at ranks 1 and 3.
//! let gallery_ids = [7, 1, 7, 2];
//! let ranking = vec![0, 1, 2, 3];
//! let ap = average_precision(&ranking, 7, &gallery_ids).unwrap();
//! assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
//!
//! let curve = cmc(&[ranking], &[7], &gallery_ids, 3).unwrap();
//! assert_eq!(curve, vec![1.0, 1.0, 1.0]);
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Probe,
    Gallery,
}

/// Row-major descriptors, one row per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub role: Role,
    pub ids: Vec<u64>,
    /// Camera (or pseudo-view) tag per row; used only for same-camera
    /// exclusion.
    pub cameras: Vec<String>,
    pub dim: usize,
    pub features: Vec<f64>,
}

impl FeatureSet {
    pub fn new(role: Role, ids: Vec<u64>, cameras: Vec<String>, dim: usize, features: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if features.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "{} ids of dimension {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                features.len()
            )));
        }
        if cameras.len() != ids.len() {
            return Err(Error::Shape(format!("{} camera tags for {} ids", cameras.len(), ids.len())));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("feature row {} holds a non-finite value", i / dim)));
        }
        Ok(FeatureSet { role, ids, cameras, dim, features })
    }

    /// Builds a set from rows, tagging every row with the same camera.
    pub fn from_rows(role: Role, ids: Vec<u64>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Shape(format!("ragged feature rows: {} vs {dim}", r.len())));
        }
        let cameras = vec![String::new(); ids.len()];
        FeatureSet::new(role, ids, cameras, dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gallery indices in ascending Euclidean distance from `probe`.
pub fn l2_rank(probe: &[f64], gallery: &FeatureSet) -> Result<Vec<usize>> {
    if probe.len() != gallery.dim {
        return Err(Error::Shape(format!("probe has dimension {}, gallery {}", probe.len(), gallery.dim)));
    }
    let d: Vec<f64> = (0..gallery.len()).map(|j| squared_distance(probe, gallery.row(j))).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Ranks the whole gallery for every probe. With `exclude_same_camera`,
/// gallery rows sharing the probe's camera tag are dropped from its list.
pub fn rank_all(probe: &FeatureSet, gallery: &FeatureSet, exclude_same_camera: bool) -> Result<Vec<Vec<usize>>> {
    (0..probe.len())
        .map(|i| {
            let mut order = l2_rank(probe.row(i), gallery)?;
            if exclude_same_camera {
                order.retain(|&j| gallery.cameras[j] != probe.cameras[i]);
            }
            Ok(order)
        })
        .collect()
}

/// 1-based rank of the first gallery entry carrying `probe_id`.
pub fn first_match_rank(ranking: &[usize], probe_id: u64, gallery_ids: &[u64]) -> Option<usize> {
    ranking.iter().position(|&j| gallery_ids[j] == probe_id).map(|p| p + 1)
}

/// `cmc[k-1]` is the fraction of probes whose first true match is at rank
/// `k` or better. Every probe must have a match in its ranking.
pub fn cmc(rankings: &[Vec<usize>], probe_ids: &[u64], gallery_ids: &[u64], k: usize) -> Result<Vec<f64>> {
    if rankings.len() != probe_ids.len() {
        return Err(Error::Shape(format!("{} rankings for {} probes", rankings.len(), probe_ids.len())));
    }
    if rankings.is_empty() {
        return Err(Error::Protocol("cannot compute CMC without probes".into()));
    }
    let mut hits = vec![0usize; k];
    for (i, (ranking, &id)) in rankings.iter().zip(probe_ids).enumerate() {
        check_ranking(ranking, gallery_ids)?;
        let r = first_match_rank(ranking, id, gallery_ids)
            .ok_or_else(|| Error::Protocol(format!("probe {i} (id {id}) has no true match in the gallery")))?;
        if r <= k {
            hits[r - 1] += 1;
        }
    }
    let n = rankings.len() as f64;
    let mut acc = 0;
    Ok(hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect())
}

fn check_ranking(ranking: &[usize], gallery_ids: &[u64]) -> Result<()> {
    match ranking.iter().find(|&&j| j >= gallery_ids.len()) {
        Some(j) => Err(Error::Contract(format!("ranking refers to gallery index {j} of {}", gallery_ids.len()))),
        None => Ok(()),
    }
}

/// Average precision `(1/R) Σ_j j / r_j` over the ranks `r_j` of the `R`
/// true matches; `None` when the ranking holds no true match.
pub fn average_precision(ranking: &[usize], probe_id: u64, gallery_ids: &[u64]) -> Option<f64> {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (pos, &j) in ranking.iter().enumerate() {
        if gallery_ids[j] == probe_id {
            found += 1;
            sum += found as f64 / (pos + 1) as f64;
        }
    }
    (found > 0).then(|| sum / found as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    pub map: f64,
    pub evaluated: usize,
    /// Probes without any true match, left out of the mean.
    pub excluded: usize,
}

pub fn mean_ap(rankings: &[Vec<usize>], probe_ids: &[u64], gallery_ids: &[u64]) -> Result<MeanAp> {
    if rankings.len() != probe_ids.len() {
        return Err(Error::Shape(format!("{} rankings for {} probes", rankings.len(), probe_ids.len())));
    }
    let mut sum = 0.0;
    let mut evaluated = 0;
    for (ranking, &id) in rankings.iter().zip(probe_ids) {
        check_ranking(ranking, gallery_ids)?;
        if let Some(ap) = average_precision(ranking, id, gallery_ids) {
            sum += ap;
            evaluated += 1;
        }
    }
    let excluded = rankings.len() - evaluated;
    if excluded > 0 {
        log::warn!("{excluded} probe(s) have no true match and were left out of mAP");
    }
    if evaluated == 0 {
        return Err(Error::Protocol("no probe has a true match; mAP is undefined".into()));
    }
    Ok(MeanAp { map: sum / evaluated as f64, evaluated, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Length of the reported CMC curve.
    pub k: usize,
    pub exclude_same_camera: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { k: 50, exclude_same_camera: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDiagnostic {
    pub probe: usize,
    pub id: u64,
    /// 1-based rank of the first true match.
    pub first_match_rank: usize,
    pub first_match_distance: f64,
    /// Distance to, and id of, the top-ranked gallery entry.
    pub top_distance: f64,
    pub top_id: u64,
    pub average_precision: f64,
}

/// Run-dependent fields kept apart so reports can be compared verbatim.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub generated_unix_seconds: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    /// What was evaluated, e.g. `fused` or `branch 1`.
    pub descriptor: String,
    pub feature_dim: usize,
    pub n_probe: usize,
    pub n_gallery: usize,
    pub k: usize,
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    pub map_excluded: usize,
    pub cmc: Vec<f64>,
    pub per_probe: Vec<ProbeDiagnostic>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), line: e.line(), message: e.to_string() })
    }

    /// `rank,rate` rows of the CMC curve.
    pub fn cmc_csv(&self) -> String {
        let mut out = String::from("rank,rate\n");
        for (i, r) in self.cmc.iter().enumerate() {
            writeln!(out, "{},{r:.6}", i + 1).expect("writing to a String");
        }
        out
    }
}

/// Ranks the gallery for every probe and summarises the result.
///
/// Pure in its inputs: the metadata timestamp is left empty for the caller
/// to fill in.
pub fn evaluate(probe: &FeatureSet, gallery: &FeatureSet, options: &EvalOptions, descriptor: &str) -> Result<EvalReport> {
    if options.k == 0 {
        return Err(Error::Param("K must be at least 1".into()));
    }
    if probe.dim != gallery.dim {
        return Err(Error::Shape(format!("probe dimension {} differs from gallery {}", probe.dim, gallery.dim)));
    }
    if probe.role != Role::Probe || gallery.role != Role::Gallery {
        return Err(Error::Contract("evaluate expects a probe set and a gallery set".into()));
    }
    if gallery.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    let rankings = rank_all(probe, gallery, options.exclude_same_camera)?;
    let curve = cmc(&rankings, &probe.ids, &gallery.ids, options.k.max(5))?;
    let ap = mean_ap(&rankings, &probe.ids, &gallery.ids)?;
    let per_probe = rankings
        .iter()
        .enumerate()
        .map(|(i, ranking)| {
            let id = probe.ids[i];
            let r = first_match_rank(ranking, id, &gallery.ids).expect("checked by cmc");
            let dist = |j: usize| squared_distance(probe.row(i), gallery.row(j)).sqrt();
            ProbeDiagnostic {
                probe: i,
                id,
                first_match_rank: r,
                first_match_distance: dist(ranking[r - 1]),
                top_distance: dist(ranking[0]),
                top_id: gallery.ids[ranking[0]],
                average_precision: average_precision(ranking, id, &gallery.ids).expect("has a match"),
            }
        })
        .collect();
    Ok(EvalReport {
        metadata: ReportMetadata::default(),
        descriptor: descriptor.to_string(),
        feature_dim: probe.dim,
        n_probe: probe.len(),
        n_gallery: gallery.len(),
        k: options.k,
        rank1: curve[0],
        rank5: curve[4],
        map: ap.map,
        map_excluded: ap.excluded,
        cmc: curve[..options.k].to_vec(),
        per_probe,
    })
}

/// Plain-text table with Rank-1, Rank-5 and mAP (in percent) per report.
pub fn format_table(reports: &[&EvalReport]) -> String {
    let width = reports.iter().map(|r| r.descriptor.len()).max().unwrap_or(0).max("Descriptor".len());
    let mut out = String::new();
    writeln!(out, "{:<width$}  {:>6}  {:>7}  {:>7}  {:>7}", "Descriptor", "Dim", "Rank-1", "Rank-5", "mAP").unwrap();
    writeln!(out, "{}", "-".repeat(width + 36)).unwrap();
    for r in reports {
        writeln!(
            out,
            "{:<width$}  {:>6}  {:>7.2}  {:>7.2}  {:>7.2}",
            r.descriptor,
            r.feature_dim,
            100.0 * r.rank1,
            100.0 * r.rank5,
            100.0 * r.map
        )
        .unwrap();
    }
    out
}
