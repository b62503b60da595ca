//! The desk-scale experiment without touching the disk: synthetic vehicles
//! are rendered into memory, split, trained on, and scored with the fused
//! descriptor and with each branch alone.
//!
//! ```sh
//! cargo run --release --example in_memory -- [seed] [iterations]
//! ```

use std::collections::HashMap;
use std::time::Instant;

use msvr::backbone::BackboneConfig;
use msvr::datakit::{self, synthetic::render_record, FilterRules, SplitConfig, SyntheticConfig, TestImage};
use msvr::evalkit::{evaluate, format_table, EvalOptions, FeatureSet, Role};
use msvr::model::{branch_embeddings, image_pyramid, train, MsvrConfig, MsvrModel};
use msvr::pyramid::Image;

fn main() -> msvr::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let iterations: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);

    let dataset = datakit::generate_synthetic(&SyntheticConfig { seed, ..SyntheticConfig::default() })?;
    let mut images: HashMap<String, Image> = HashMap::new();
    for (identity, trajectory) in dataset.identities.iter().zip(&dataset.trajectories) {
        for record in &trajectory.records {
            images.insert(record.image_path.clone(), render_record(seed, identity, record));
        }
    }
    let kept = datakit::filter_trajectories(&dataset.trajectories, &FilterRules::default());
    let split = datakit::build_split(&kept, ".", &SplitConfig { seed, ..SplitConfig::default() })?;
    let labels: HashMap<u64, usize> = split.id_partition.train.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let data: Vec<(Image, usize)> = split.train.iter().map(|t| (images[&t.image].clone(), labels[&t.id])).collect();

    let config = MsvrConfig { max_iterations: iterations, trace_every: 250, ..MsvrConfig::desk_scale(labels.len()) };
    let model = MsvrModel::new(&BackboneConfig::default(), &config, seed)?;
    let start = Instant::now();
    let outcome = train(model, &data, &config, seed, |row| println!("iteration {:>5}  loss {:.4}", row.iteration, row.loss.total))?;
    println!("trained in {:.1?}", start.elapsed());

    // descriptor sets: fused first, then one per branch
    let feature_sets = |set: &[TestImage], role: Role| -> msvr::Result<Vec<FeatureSet>> {
        let ids: Vec<u64> = set.iter().map(|t| t.id).collect();
        let embeddings = set
            .iter()
            .map(|t| branch_embeddings(&outcome.model, &image_pyramid(&outcome.model, &images[&t.image])?))
            .collect::<msvr::Result<Vec<_>>>()?;
        let mut sets = vec![FeatureSet::from_rows(role, ids.clone(), &embeddings.iter().map(|e| e.concat()).collect::<Vec<_>>())?];
        for b in 0..outcome.model.branch_count() {
            sets.push(FeatureSet::from_rows(role, ids.clone(), &embeddings.iter().map(|e| e[b].clone()).collect::<Vec<_>>())?);
        }
        Ok(sets)
    };
    let probes = feature_sets(&split.probe, Role::Probe)?;
    let galleries = feature_sets(&split.gallery, Role::Gallery)?;
    let reports = probes
        .iter()
        .zip(&galleries)
        .enumerate()
        .map(|(i, (p, g))| {
            let name = if i == 0 { "fused".to_string() } else { format!("branch {}", i - 1) };
            evaluate(p, g, &EvalOptions::default(), &name)
        })
        .collect::<msvr::Result<Vec<_>>>()?;
    print!("{}", format_table(&reports.iter().collect::<Vec<_>>()));
    Ok(())
}
