//! Independent oracles shared by the integration tests.
//!
//! Nothing here calls into the code under test for the quantity being
//! checked: gradients come from central differences, rankings from pairwise
//! counting, metrics from explicit precision/recall curves.
#![allow(dead_code, clippy::needless_range_loop)]

use std::path::Path;
use std::time::{Duration, Instant};

use msvr::backbone::BackboneConfig;
use msvr::cli::{self, Descriptor, RunConfig, TrainConfig};
use msvr::evalkit::{average_precision, cmc, evaluate, mean_ap, rank_all, EvalOptions, EvalReport, FeatureSet, Role};
use msvr::model::{forward_batch, MsvrConfig, MsvrModel, TraceRow};
use msvr::ndgrad::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative gradient errors, so that coordinates with
/// a near-zero gradient are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values away from zero so ReLU kinks stay out of finite-difference reach.
pub fn random_nonzero_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
}

/// Compares the reverse-mode gradient of `build` at `inputs` with central
/// differences over every input coordinate.
pub fn fd_check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> msvr::Result<Var>) -> GradCheck {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.data(out)[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(inputs).map(|(v, t)| g.grad(*v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec)).collect();

    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(analytic[i][j], numeric));
            checked += 1;
        }
    }
    GradCheck { max_rel, checked }
}

/// `Σ w_i · out_i` with fixed random weights, reducing any op to a scalar
/// whose gradient exercises every output coordinate differently.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> msvr::Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = random_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Central-difference check of the full training objective with respect to
/// every model parameter.
pub fn full_loss_check(model: &MsvrModel, config: &MsvrConfig, batch: &[Vec<Tensor>], labels: &[usize]) -> GradCheck {
    let mut pass = forward_batch(model, config, batch, labels).unwrap();
    pass.graph.backward(pass.total).unwrap();
    let analytic: Vec<Vec<f64>> = pass
        .params
        .vars()
        .iter()
        .map(|v| pass.graph.grad(*v).map_or_else(|| vec![0.0; pass.graph.value(*v).numel()], <[f64]>::to_vec))
        .collect();
    let mut probe = model.clone();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let n_tensors = analytic.len();
    for i in 0..n_tensors {
        for j in 0..analytic[i].len() {
            let orig = probe.tensors()[i].data()[j];
            probe.tensors_mut()[i].data_mut()[j] = orig + FD_STEP;
            let up = forward_batch(&probe, config, batch, labels).unwrap().breakdown.total;
            probe.tensors_mut()[i].data_mut()[j] = orig - FD_STEP;
            let down = forward_batch(&probe, config, batch, labels).unwrap().breakdown.total;
            probe.tensors_mut()[i].data_mut()[j] = orig;
            max_rel = max_rel.max(rel_err(analytic[i][j], (up - down) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    GradCheck { max_rel, checked }
}

/// Two identities, two branches, eight images: a backbone small enough to
/// difference every parameter. The teacher is left attached so the
/// objective is an ordinary scalar function of the parameters. Biases are
/// drawn away from zero: with zero biases a stage whose inputs are all dead
/// sits exactly on the ReLU kink, where one-sided and central differences
/// disagree by construction.
pub fn tiny_loss_setup(seed: u64) -> (MsvrModel, MsvrConfig, Vec<Vec<Tensor>>, Vec<usize>) {
    let backbone = BackboneConfig {
        input_side: 10,
        channels_per_stage: vec![3, 4],
        stage_strides: vec![2, 2],
        kernel_size: 3,
        embed_dim: 4,
    };
    let config = MsvrConfig { scales: vec![10, 7], n_id: 2, batch_size: 8, temperature: 2.0, detach_teacher: false, ..MsvrConfig::default() };
    let mut model = MsvrModel::new(&backbone, &config, seed).unwrap();
    let mut r = rng(seed ^ 0xBA7C);
    for stage in model.branches.iter_mut().flat_map(|b| b.stages.iter_mut()) {
        let n = stage.bias.numel();
        stage.bias = random_nonzero_tensor(&mut r, &[n]);
    }
    let batch = (0..8).map(|_| config.scales.iter().map(|&s| random_tensor(&mut r, &[3, s, s], 0.0, 1.0)).collect()).collect();
    let labels = (0..8).map(|i| i % 2).collect();
    (model, config, batch, labels)
}

// --------------------------------------------------------------------------
// Naive reference kernels

pub fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
        }
    }
    out
}

/// Direct cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> (Vec<usize>, Vec<f64>) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * stride + dy) as isize - padding as isize;
                            let ix = (ox * stride + dx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.data()[(ci * h + iy as usize) * w + ix as usize]
                                * k.data()[((co * c_in + ci) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (vec![c_out, oh, ow], out)
}

// --------------------------------------------------------------------------
// Retrieval oracles

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Ranking by counting, for every gallery entry, how many entries precede
/// it (strictly closer, or equally close with a smaller index).
pub fn rank_oracle(probe: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let d: Vec<f64> = gallery.iter().map(|g| distance(probe, g)).collect();
    let mut order = vec![usize::MAX; gallery.len()];
    for j in 0..gallery.len() {
        let pos = (0..gallery.len()).filter(|&i| d[i] < d[j] || (d[i] == d[j] && i < j)).count();
        order[pos] = j;
    }
    order
}

/// CMC by testing, for each cutoff, whether any of the top-k ids matches.
pub fn cmc_oracle(rankings: &[Vec<usize>], probe_ids: &[u64], gallery_ids: &[u64], k: usize) -> Vec<f64> {
    (1..=k)
        .map(|cut| {
            let hits = rankings
                .iter()
                .zip(probe_ids)
                .filter(|(r, id)| r.iter().take(cut).any(|&j| gallery_ids[j] == **id))
                .count();
            hits as f64 / rankings.len() as f64
        })
        .collect()
}

/// Area under the step precision/recall curve, summed over every cutoff:
/// `Σ_k (recall_k − recall_{k−1}) · precision_k`.
pub fn ap_oracle(ranking: &[usize], probe_id: u64, gallery_ids: &[u64]) -> Option<f64> {
    let relevant = ranking.iter().filter(|&&j| gallery_ids[j] == probe_id).count();
    if relevant == 0 {
        return None;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for cut in 1..=ranking.len() {
        let tp = ranking[..cut].iter().filter(|&&j| gallery_ids[j] == probe_id).count();
        let precision = tp as f64 / cut as f64;
        let recall = tp as f64 / relevant as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(area)
}

/// Random multi-shot retrieval instance: up to 20 probes and 40 gallery
/// rows, every probe id present in the gallery. Coordinates are small
/// integers, so distance ties are common.
pub fn random_instance(r: &mut ChaCha8Rng) -> (FeatureSet, FeatureSet) {
    let dim = r.random_range(1..5);
    let n_ids = r.random_range(1..8u64);
    let n_gallery = r.random_range(n_ids as usize..=40);
    let mut gallery_ids: Vec<u64> = (0..n_ids).collect();
    gallery_ids.extend((n_ids as usize..n_gallery).map(|_| r.random_range(0..n_ids + 3)));
    gallery_ids.shuffle(r);
    let present: Vec<u64> = gallery_ids.iter().copied().filter(|&id| id < n_ids).collect();
    let n_probe = r.random_range(1..=20);
    let probe_ids: Vec<u64> = (0..n_probe).map(|_| present[r.random_range(0..present.len())]).collect();
    let mut rows = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| f64::from(r.random_range(-2i32..=2))).collect()).collect()
    };
    let (p, g) = (rows(n_probe), rows(n_gallery));
    (
        FeatureSet::from_rows(Role::Probe, probe_ids, &p).unwrap(),
        FeatureSet::from_rows(Role::Gallery, gallery_ids, &g).unwrap(),
    )
}

/// Largest disagreement between the library metrics and the oracles on
/// one instance: ranking mismatches count as 1.
pub fn metric_discrepancy(probe: &FeatureSet, gallery: &FeatureSet) -> f64 {
    let rows: Vec<Vec<f64>> = (0..gallery.len()).map(|j| gallery.row(j).to_vec()).collect();
    let oracle_rankings: Vec<Vec<usize>> = (0..probe.len()).map(|i| rank_oracle(probe.row(i), &rows)).collect();
    let rankings = rank_all(probe, gallery, false).unwrap();
    if rankings != oracle_rankings {
        return 1.0;
    }
    let k = gallery.len();
    let curve = cmc(&rankings, &probe.ids, &gallery.ids, k).unwrap();
    let expected = cmc_oracle(&oracle_rankings, &probe.ids, &gallery.ids, k);
    let mut worst = curve.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let aps: Vec<f64> = oracle_rankings.iter().zip(&probe.ids).map(|(o, &id)| ap_oracle(o, id, &gallery.ids).unwrap()).collect();
    for ((ranking, &id), oracle) in rankings.iter().zip(&probe.ids).zip(&aps) {
        worst = worst.max((average_precision(ranking, id, &gallery.ids).unwrap() - oracle).abs());
    }
    let map = mean_ap(&rankings, &probe.ids, &gallery.ids).unwrap().map;
    worst.max((map - aps.iter().sum::<f64>() / aps.len() as f64).abs())
}

/// Rank-1 of one single-shot trial with `n` identities and i.i.d. Gaussian
/// features.
pub fn chance_trial(r: &mut ChaCha8Rng, n: usize, dim: usize) -> f64 {
    let mut rows = || -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..dim).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect()).collect()
    };
    let ids: Vec<u64> = (0..n as u64).collect();
    let probe = FeatureSet::from_rows(Role::Probe, ids.clone(), &rows()).unwrap();
    let gallery = FeatureSet::from_rows(Role::Gallery, ids, &rows()).unwrap();
    evaluate(&probe, &gallery, &EvalOptions { k: 1, exclude_same_camera: false }, "random").unwrap().rank1
}

// --------------------------------------------------------------------------
// Desk-scale experiment through the command pipeline

#[derive(Debug)]
pub struct DeskRun {
    pub fused: EvalReport,
    pub branches: Vec<EvalReport>,
    pub trace: Vec<TraceRow>,
    pub train_time: Duration,
    pub total_time: Duration,
}

/// The standard desk-scale setup: 50 ids × 40 frames, scales [64, 48],
/// 2,000 iterations.
pub fn desk_config(seed: u64, dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.synthetic.n_ids = 50;
    c.synthetic.frames_per_id = 40;
    c.synthetic.seed = seed;
    c.split.seed = seed;
    c.train = TrainConfig { init_seed: seed, seed };
    c.backbone = BackboneConfig::default();
    c.model = MsvrConfig { scales: vec![64, 48], max_iterations: 2000, ..MsvrConfig::desk_scale(2) };
    c.paths.data_dir = dir.join("data");
    c.paths.split = dir.join("data/split.json");
    c.paths.run_dir = dir.join("run");
    c
}

/// gen-data → build-splits → train → eval (fused and every branch).
pub fn run_pipeline(config: &RunConfig) -> DeskRun {
    let start = Instant::now();
    cli::cmd_gen_data(&config.synthetic, &config.paths.data_dir, false).unwrap();
    cli::cmd_build_splits(&config.paths.data_dir.join("manifest.tsv"), &config.filter, &config.split, &config.paths.split)
        .unwrap();
    let t = Instant::now();
    let outcome = cli::cmd_train(config, &config.train, &config.paths.split, &config.paths.run_dir).unwrap();
    let train_time = t.elapsed();
    let ckpt = config.paths.run_dir.join("model.ckpt");
    let fused = cli::cmd_eval(&ckpt, &config.paths.split, Descriptor::Fused, &config.eval, &config.paths.run_dir).unwrap();
    let branches = (0..config.model.scales.len())
        .map(|k| cli::cmd_eval(&ckpt, &config.paths.split, Descriptor::Branch(k), &config.eval, &config.paths.run_dir).unwrap())
        .collect();
    DeskRun { fused, branches, trace: outcome.trace, train_time, total_time: start.elapsed() }
}

// --------------------------------------------------------------------------
// Per-operation gradient cases

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> msvr::Result<Var>>;

/// One named case per differentiable operation (and per loss block), each
/// reduced to a scalar.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    use msvr::model;
    let mut r = rng(42);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = Vec::new();
    let mut push = |name, inputs, build: Build| cases.push((name, inputs, build));

    push("matmul", vec![random_tensor(&mut r, &[3, 4], -1.0, 1.0), random_tensor(&mut r, &[4, 2], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.matmul(v[0], v[1])?; weighted_sum(g, o, 1) }));
    push("conv2d stride 1 pad 1", vec![random_tensor(&mut r, &[2, 5, 6], -1.0, 1.0), random_tensor(&mut r, &[3, 2, 3, 3], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.conv2d(v[0], v[1], 1, 1)?; weighted_sum(g, o, 2) }));
    push("conv2d stride 2 pad 0", vec![random_tensor(&mut r, &[2, 7, 6], -1.0, 1.0), random_tensor(&mut r, &[2, 2, 3, 2], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.conv2d(v[0], v[1], 2, 0)?; weighted_sum(g, o, 3) }));
    push("conv2d stride 2 pad 1", vec![random_tensor(&mut r, &[3, 6, 6], -1.0, 1.0), random_tensor(&mut r, &[2, 3, 3, 3], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.conv2d(v[0], v[1], 2, 1)?; weighted_sum(g, o, 4) }));
    push("bias_add", vec![random_tensor(&mut r, &[3, 2, 2], -1.0, 1.0), random_tensor(&mut r, &[3], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.bias_add(v[0], v[1])?; weighted_sum(g, o, 5) }));
    push("add", vec![random_tensor(&mut r, &[2, 3], -1.0, 1.0), random_tensor(&mut r, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.add(v[0], v[1])?; weighted_sum(g, o, 6) }));
    push("sub", vec![random_tensor(&mut r, &[4], -1.0, 1.0), random_tensor(&mut r, &[4], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.sub(v[0], v[1])?; weighted_sum(g, o, 7) }));
    push("mul", vec![random_tensor(&mut r, &[2, 2], -1.0, 1.0), random_tensor(&mut r, &[2, 2], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.mul(v[0], v[1])?; weighted_sum(g, o, 8) }));
    push("scale", vec![random_tensor(&mut r, &[5], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.scale(v[0], -2.5); weighted_sum(g, o, 9) }));
    push("add_scalar", vec![random_tensor(&mut r, &[5], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.add_scalar(v[0], 0.75); weighted_sum(g, o, 10) }));
    push("relu", vec![random_nonzero_tensor(&mut r, &[6])],
        Box::new(|g, v| { let o = g.relu(v[0]); weighted_sum(g, o, 11) }));
    push("log", vec![random_tensor(&mut r, &[5], 0.2, 2.0)],
        Box::new(|g, v| { let o = g.log(v[0]); weighted_sum(g, o, 12) }));
    push("clamp", vec![Tensor::vector(vec![-0.8, -0.3, 0.1, 0.45, 0.9])],
        Box::new(|g, v| { let o = g.clamp(v[0], -0.5, 0.5)?; weighted_sum(g, o, 13) }));
    push("concat axis 0", vec![random_tensor(&mut r, &[2, 3], -1.0, 1.0), random_tensor(&mut r, &[1, 3], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.concat(&[v[0], v[1]], 0)?; weighted_sum(g, o, 14) }));
    push("concat axis 1", vec![random_tensor(&mut r, &[2, 3], -1.0, 1.0), random_tensor(&mut r, &[2, 2], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.concat(&[v[0], v[1]], 1)?; weighted_sum(g, o, 15) }));
    push("reshape", vec![random_tensor(&mut r, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.reshape(v[0], vec![3, 2])?; weighted_sum(g, o, 16) }));
    push("sum", vec![random_tensor(&mut r, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| { let s = g.sum(v[0]); Ok(g.scale(s, 1.3)) }));
    push("mean", vec![random_tensor(&mut r, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| { let s = g.mean(v[0]); Ok(g.scale(s, 1.7)) }));
    push("log_sum_exp", vec![random_tensor(&mut r, &[6], -3.0, 3.0)],
        Box::new(|g, v| Ok(g.log_sum_exp(v[0]))));
    push("global_avg_pool", vec![random_tensor(&mut r, &[3, 4, 5], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.global_avg_pool(v[0])?; weighted_sum(g, o, 17) }));
    push("softmax T=1", vec![random_tensor(&mut r, &[5], -2.0, 2.0)],
        Box::new(|g, v| { let o = g.softmax(v[0], 1.0)?; weighted_sum(g, o, 18) }));
    push("softmax T=2.5", vec![random_tensor(&mut r, &[5], -2.0, 2.0)],
        Box::new(|g, v| { let o = g.softmax(v[0], 2.5)?; weighted_sum(g, o, 19) }));
    push("pick", vec![random_tensor(&mut r, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| { let o = g.pick(v[0], 4)?; Ok(g.scale(o, 2.0)) }));
    push("logits", vec![random_tensor(&mut r, &[3, 4], -1.0, 1.0), random_tensor(&mut r, &[4], -1.0, 1.0)],
        Box::new(|g, v| { let o = model::logits(g, v[0], v[1])?; weighted_sum(g, o, 20) }));
    push("cross-entropy", vec![random_tensor(&mut r, &[4], -2.0, 2.0)],
        Box::new(|g, v| model::ce_loss(g, v[0], 2)));
    push("alignment (teacher and student)", vec![random_tensor(&mut r, &[4], -2.0, 2.0), random_tensor(&mut r, &[4], -2.0, 2.0)],
        Box::new(|g, v| {
            let t = model::consensus_soft_prediction(g, v[0], 2.0, false)?;
            let s = g.softmax(v[1], 1.0)?;
            model::alignment_loss(g, t, s)
        }));
    push("scale-branch loss", vec![random_tensor(&mut r, &[4], -2.0, 2.0), random_tensor(&mut r, &[4], -2.0, 2.0)],
        Box::new(|g, v| {
            let ce = model::ce_loss(g, v[1], 0)?;
            let t = model::consensus_soft_prediction(g, v[0], 1.5, false)?;
            let s = g.softmax(v[1], 1.0)?;
            let al = model::alignment_loss(g, t, s)?;
            model::branch_loss(g, ce, al, 0.7)
        }));
    cases
}
