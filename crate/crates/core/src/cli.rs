//! The `msvr` command-line pipeline: `gen-data`, `build-splits`, `train`,
//! `eval` and `report`.
//!
//! Every command reads one TOML [`RunConfig`]. Keys left out of the file
//! keep their [`RunConfig::default`] values, unknown keys are rejected, and
//! every seed has a fixed default so repeated runs reproduce their outputs.
//! Relative paths in the config file are resolved against the file's
//! directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::datakit::{self, BenchmarkSplit, FilterRules, SplitConfig, SyntheticConfig, TestImage};
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalOptions, EvalReport, FeatureSet, Role};
use crate::model::{self, MsvrConfig, MsvrModel};
use crate::pyramid::{self, Image};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Param(_) => EXIT_CONFIG,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

// --------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub synthetic: SyntheticConfig,
    pub filter: FilterRules,
    pub split: SplitConfig,
    pub backbone: BackboneConfig,
    /// `n_id` is overwritten with the number of training identities in the
    /// split at train time.
    pub model: MsvrConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: PathsConfig::default(),
            synthetic: SyntheticConfig::default(),
            filter: FilterRules::default(),
            split: SplitConfig::default(),
            backbone: BackboneConfig::default(),
            model: MsvrConfig::desk_scale(2),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Output of `gen-data`; holds `manifest.tsv` and `images/`.
    pub data_dir: PathBuf,
    pub split: PathBuf,
    /// Checkpoint, loss trace and evaluation reports.
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data_dir: "data".into(), split: "data/split.json".into(), run_dir: "run".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Seed for parameter initialisation.
    pub init_seed: u64,
    /// Seed for batch order and augmentation.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { init_seed: 1, seed: 1 }
    }
}

impl RunConfig {
    /// Parses a TOML document layered over the defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let config: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Loads `path` and resolves its relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.paths.data_dir, &mut config.paths.split, &mut config.paths.run_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.backbone.validate()?;
        self.model.validate()?;
        if self.split.train_frame_step == 0 {
            return Err(Error::Config("split.train_frame_step must be at least 1".into()));
        }
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be at least 1".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

// --------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(name = "msvr", version, about = "Multi-scale vehicle re-identification pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed the command consumes.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the command's output location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset: manifest, images and statistics.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Replace a previous dataset in a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Filter a manifest and sample the train/probe/gallery split.
    BuildSplits {
        #[command(flatten)]
        common: Common,
        /// Manifest to read instead of `<data_dir>/manifest.tsv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model on the split's training images.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Extract descriptors for probe and gallery and score them.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load instead of `<run_dir>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write descriptors instead of a report.
        #[arg(long)]
        features_only: bool,
        /// Use only branch K's embedding as the descriptor.
        #[arg(long, value_name = "K")]
        ablate_branch: Option<usize>,
    },
    /// Print a Rank-1/Rank-5/mAP table for saved reports.
    Report {
        #[command(flatten)]
        common: Common,
        /// Report files; defaults to every `report*.json` in the run dir.
        reports: Vec<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::BuildSplits { common, .. }
            | Command::Train { common }
            | Command::Eval { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common().clone();
    let config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData { force, .. } => {
            let mut syn = config.synthetic.clone();
            if let Some(seed) = common.seed {
                syn.seed = seed;
            }
            let out = common.out.unwrap_or(config.paths.data_dir);
            cmd_gen_data(&syn, &out, force).map(|_| ())
        }
        Command::BuildSplits { manifest, .. } => {
            let manifest = manifest.unwrap_or_else(|| config.paths.data_dir.join("manifest.tsv"));
            let mut split = config.split;
            if let Some(seed) = common.seed {
                split.seed = seed;
            }
            let out = common.out.unwrap_or(config.paths.split);
            cmd_build_splits(&manifest, &config.filter, &split, &out).map(|_| ())
        }
        Command::Train { .. } => {
            let mut train = config.train;
            if let Some(seed) = common.seed {
                train = TrainConfig { init_seed: seed, seed };
            }
            let out = common.out.unwrap_or(config.paths.run_dir.clone());
            cmd_train(&config, &train, &config.paths.split, &out).map(|_| ())
        }
        Command::Eval { checkpoint, features_only, ablate_branch, .. } => {
            let checkpoint = checkpoint.unwrap_or_else(|| config.paths.run_dir.join("model.ckpt"));
            let out = common.out.unwrap_or(config.paths.run_dir.clone());
            let descriptor = match ablate_branch {
                Some(k) => Descriptor::Branch(k),
                None => Descriptor::Fused,
            };
            if features_only {
                cmd_dump_features(&checkpoint, &config.paths.split, descriptor, &out).map(|_| ())
            } else {
                let report = cmd_eval(&checkpoint, &config.paths.split, descriptor, &config.eval, &out)?;
                print!("{}", evalkit::format_table(&[&report]));
                Ok(())
            }
        }
        Command::Report { reports, .. } => {
            let table = cmd_report(&reports, &config.paths.run_dir)?;
            print!("{table}");
            if let Some(out) = common.out {
                fs::write(&out, table).map_err(|e| Error::io(&out, e))?;
            }
            Ok(())
        }
    }
}

// --------------------------------------------------------------------------
// Commands

/// Generates and renders a synthetic dataset into `out_dir`, writing
/// `manifest.tsv`, `images/`, `stats.json` and `scale_histogram.csv`.
///
/// A non-empty `out_dir` is refused unless `force` is set, in which case the
/// files above are replaced and anything else is left alone.
pub fn cmd_gen_data(config: &SyntheticConfig, out_dir: &Path, force: bool) -> Result<datakit::DatasetStats> {
    let non_empty = out_dir.is_dir() && fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?.next().is_some();
    if non_empty {
        if !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to overwrite", out_dir.display())));
        }
        let images = out_dir.join("images");
        if images.is_dir() {
            fs::remove_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        }
    }
    let dataset = datakit::generate_synthetic(config)?;
    datakit::render_dataset(&dataset, out_dir)?;
    let stats = datakit::compute_stats(&dataset.records());
    write_json(&out_dir.join("stats.json"), &stats)?;
    datakit::write_histogram_csv(&out_dir.join("scale_histogram.csv"), &stats)?;
    log::info!(
        "wrote {} images of {} identities to {} (mean box {:.1}x{:.1})",
        stats.images,
        stats.identities,
        out_dir.display(),
        stats.mean_width,
        stats.mean_height
    );
    Ok(stats)
}

/// Reads a manifest, filters its trajectories and writes the split JSON.
/// Image paths in the split stay relative to the manifest's directory.
pub fn cmd_build_splits(manifest: &Path, filter: &FilterRules, config: &SplitConfig, out: &Path) -> Result<BenchmarkSplit> {
    let records = datakit::read_manifest(manifest)?;
    let trajectories = datakit::group_trajectories(&records)?;
    let kept = datakit::filter_trajectories(&trajectories, filter);
    log::info!("{} of {} trajectories survive filtering", kept.len(), trajectories.len());
    let root = manifest.parent().unwrap_or(Path::new(""));
    let root = fs::canonicalize(if root.as_os_str().is_empty() { Path::new(".") } else { root })
        .map_err(|e| Error::io(root, e))?;
    let split = datakit::build_split(&kept, &root.to_string_lossy(), config)?;
    create_parent(out)?;
    datakit::write_split(out, &split)?;
    log::info!(
        "split: {} train ids ({} images), {} probe, {} gallery -> {}",
        split.id_partition.train.len(),
        split.train.len(),
        split.probe.len(),
        split.gallery.len(),
        out.display()
    );
    Ok(split)
}

/// Loads the split's training images with labels numbered by position in
/// the split's training id list.
pub fn load_training_set(split: &BenchmarkSplit) -> Result<Vec<(Image, usize)>> {
    let labels: HashMap<u64, usize> = split.id_partition.train.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let root = Path::new(&split.image_root);
    split.train.iter().map(|t| Ok((pyramid::read_image(&root.join(&t.image))?, labels[&t.id]))).collect()
}

/// Trains on the split and writes `model.ckpt` and `trace.csv` to `out_dir`.
pub fn cmd_train(config: &RunConfig, train: &TrainConfig, split_path: &Path, out_dir: &Path) -> Result<model::TrainOutcome> {
    let split = datakit::read_split(split_path)?;
    let data = load_training_set(&split)?;
    let mut model_config = config.model.clone();
    model_config.n_id = split.id_partition.train.len();
    let model = MsvrModel::new(&config.backbone, &model_config, train.init_seed)?;
    log::info!(
        "training {} branches at scales {:?} on {} images of {} ids for {} iterations",
        model.branch_count(),
        model_config.scales,
        data.len(),
        model_config.n_id,
        model_config.max_iterations
    );
    let outcome = model::train(model, &data, &model_config, train.seed, |row| {
        log::info!("iteration {:>6}  loss {:.4}", row.iteration, row.loss.total);
    })?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt = out_dir.join("model.ckpt");
    let mut w = BufWriter::new(fs::File::create(&ckpt).map_err(|e| Error::io(&ckpt, e))?);
    model::save_model(&mut w, &outcome.model, &model_config)?;
    w.flush().map_err(|e| Error::io(&ckpt, e))?;
    let trace = out_dir.join("trace.csv");
    let mut w = BufWriter::new(fs::File::create(&trace).map_err(|e| Error::io(&trace, e))?);
    model::write_trace_csv(&mut w, &outcome.trace).and_then(|_| w.flush()).map_err(|e| Error::io(&trace, e))?;
    Ok(outcome)
}

pub fn load_checkpoint(path: &Path) -> Result<(MsvrModel, MsvrConfig)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    model::load_model(&mut BufReader::new(file))
}

/// Which embedding serves as the retrieval descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Descriptor {
    /// Concatenation of all branch embeddings.
    Fused,
    /// A single branch's embedding.
    Branch(usize),
}

impl Descriptor {
    pub fn name(self) -> String {
        match self {
            Descriptor::Fused => "fused".into(),
            Descriptor::Branch(k) => format!("branch {k}"),
        }
    }

    fn file_suffix(self) -> String {
        match self {
            Descriptor::Fused => String::new(),
            Descriptor::Branch(k) => format!("-branch{k}"),
        }
    }
}

/// Descriptors for a list of images, one [`FeatureSet`] per requested
/// descriptor, sharing a single forward pass per image.
pub fn feature_sets(
    model: &MsvrModel,
    images: &[TestImage],
    image_root: &Path,
    role: Role,
    descriptors: &[Descriptor],
) -> Result<Vec<FeatureSet>> {
    for d in descriptors {
        if let Descriptor::Branch(k) = d {
            if *k >= model.branch_count() {
                return Err(Error::Config(format!("branch {k} does not exist; the model has {}", model.branch_count())));
            }
        }
    }
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(images.len()); descriptors.len()];
    for t in images {
        let img = pyramid::read_image(&image_root.join(&t.image))?;
        let embs = model::branch_embeddings(model, &model::image_pyramid(model, &img)?)?;
        for (d, out) in descriptors.iter().zip(rows.iter_mut()) {
            out.push(match d {
                Descriptor::Fused => embs.concat(),
                Descriptor::Branch(k) => embs[*k].clone(),
            });
        }
    }
    let ids: Vec<u64> = images.iter().map(|t| t.id).collect();
    let cameras: Vec<String> = images.iter().map(TestImage::camera).collect();
    rows.into_iter()
        .map(|r| {
            let dim = r.first().map_or(0, Vec::len);
            FeatureSet::new(role, ids.clone(), cameras.clone(), dim, r.concat())
        })
        .collect()
}

/// Evaluates several descriptors of one model on the split's probe and
/// gallery.
pub fn evaluate_descriptors(
    model: &MsvrModel,
    split: &BenchmarkSplit,
    descriptors: &[Descriptor],
    options: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    let root = Path::new(&split.image_root);
    let probe = feature_sets(model, &split.probe, root, Role::Probe, descriptors)?;
    let gallery = feature_sets(model, &split.gallery, root, Role::Gallery, descriptors)?;
    descriptors
        .iter()
        .zip(probe.iter().zip(&gallery))
        .map(|(d, (p, g))| evalkit::evaluate(p, g, options, &d.name()))
        .collect()
}

/// Writes `report[-branchK].json` and `cmc[-branchK].csv` into `out_dir`.
pub fn cmd_eval(
    checkpoint: &Path,
    split_path: &Path,
    descriptor: Descriptor,
    options: &EvalOptions,
    out_dir: &Path,
) -> Result<EvalReport> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let split = datakit::read_split(split_path)?;
    let mut report = evaluate_descriptors(&model, &split, &[descriptor], options)?.remove(0);
    report.metadata.generated_unix_seconds = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let suffix = descriptor.file_suffix();
    report.write_json(&out_dir.join(format!("report{suffix}.json")))?;
    let csv = out_dir.join(format!("cmc{suffix}.csv"));
    fs::write(&csv, report.cmc_csv()).map_err(|e| Error::io(&csv, e))?;
    log::info!("{}: Rank-1 {:.2}%  Rank-5 {:.2}%  mAP {:.2}%", report.descriptor, 100.0 * report.rank1, 100.0 * report.rank5, 100.0 * report.map);
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureDump {
    pub descriptor: String,
    pub probe: FeatureSet,
    pub gallery: FeatureSet,
}

/// Writes probe and gallery descriptors to `features[-branchK].json`.
pub fn cmd_dump_features(checkpoint: &Path, split_path: &Path, descriptor: Descriptor, out_dir: &Path) -> Result<PathBuf> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let split = datakit::read_split(split_path)?;
    let root = Path::new(&split.image_root);
    let probe = feature_sets(&model, &split.probe, root, Role::Probe, &[descriptor])?.remove(0);
    let gallery = feature_sets(&model, &split.gallery, root, Role::Gallery, &[descriptor])?.remove(0);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join(format!("features{}.json", descriptor.file_suffix()));
    write_json(&path, &FeatureDump { descriptor: descriptor.name(), probe, gallery })?;
    Ok(path)
}

/// Formats the table for `reports`, or for every `report*.json` in
/// `run_dir` when the list is empty.
pub fn cmd_report(reports: &[PathBuf], run_dir: &Path) -> Result<String> {
    let mut paths = reports.to_vec();
    if paths.is_empty() {
        for entry in fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))? {
            let path = entry.map_err(|e| Error::io(run_dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.starts_with("report") && name.ends_with(".json") {
                paths.push(path);
            }
        }
        paths.sort();
    }
    if paths.is_empty() {
        return Err(Error::Data(format!("no report*.json files in {}", run_dir.display())));
    }
    let loaded = paths.iter().map(|p| EvalReport::read_json(p)).collect::<Result<Vec<_>>>()?;
    Ok(evalkit::format_table(&loaded.iter().collect::<Vec<_>>()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}
