//! The multi-scale model: one backbone branch per pyramid resolution, a
//! classifier per branch, and a fusion classifier over the concatenated
//! branch embeddings.
//!
//! Training minimises, per sample,
//!
//! ```text
//! L = L_ce(fusion) + Σ_b [ L_ce(b) + λ · H(P̃, P_b) ]
//! ```
//!
//! where `P̃` is the temperature-softened fusion posterior (the consensus
//! "teacher") and `H` is the class-averaged binary cross-entropy between the
//! teacher and branch `b`'s posterior. The batch loss is the mean over
//! samples. Deployment uses the concatenated embeddings as the descriptor.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, BackboneParams, BoundBackbone, Container};
use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Tensor, Var};
use crate::pyramid::{self, AugmentConfig, Image};

/// Lower/upper clamp applied to student probabilities before the logs of
/// the alignment term.
pub const ALIGN_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsvrConfig {
    /// Image side per branch, in branch order.
    pub scales: Vec<usize>,
    /// Weight of the consensus alignment term.
    pub lambda: f64,
    /// Softening temperature of the consensus prediction.
    pub temperature: f64,
    /// Number of training identities (classifier width).
    pub n_id: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Stop gradients from the alignment term flowing into the fusion branch.
    pub detach_teacher: bool,
    /// Loss-trace period in iterations.
    pub trace_every: usize,
    pub augment: AugmentConfig,
}

impl Default for MsvrConfig {
    fn default() -> Self {
        MsvrConfig {
            scales: vec![224, 160],
            lambda: 1.0,
            temperature: 1.0,
            n_id: 2,
            learning_rate: 0.0002,
            weight_decay: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 8,
            max_iterations: 100_000,
            detach_teacher: true,
            trace_every: 50,
            augment: AugmentConfig::default(),
        }
    }
}

impl MsvrConfig {
    /// Settings small enough to train on one CPU core in a couple of minutes.
    pub fn desk_scale(n_id: usize) -> Self {
        MsvrConfig { scales: vec![64, 48], n_id, learning_rate: 0.001, max_iterations: 2_000, ..Default::default() }
    }

    pub fn branches(&self) -> usize {
        self.scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config(format!("scales must be a non-empty list of positive sides, got {:?}", self.scales)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be a non-negative number, got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.n_id < 1 {
            return Err(Error::Config("n_id must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and weight_decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("beta1/beta2 must lie in [0, 1) and adam_epsilon be positive".into()));
        }
        if self.batch_size == 0 || self.trace_every == 0 {
            return Err(Error::Config("batch_size and trace_every must be positive".into()));
        }
        self.augment.validate()
    }
}

/// Backbones, per-branch classifiers `[n_id × d]` and the fusion classifier
/// `[n_id × d·m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MsvrModel {
    pub branches: Vec<BackboneParams>,
    pub branch_classifiers: Vec<Tensor>,
    pub fusion_classifier: Tensor,
}

/// Loss components averaged over a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_branch_ce: Vec<f64>,
    pub per_branch_align: Vec<f64>,
    pub fusion_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `fusion_ce + Σ_b (ce_b + λ·align_b)`, recomputed from the parts.
    pub fn recomputed_total(&self, lambda: f64) -> f64 {
        self.fusion_ce
            + self.per_branch_ce.iter().zip(&self.per_branch_align).map(|(ce, al)| ce + lambda * al).sum::<f64>()
    }

    fn first_non_finite(&self) -> Option<String> {
        let named = self
            .per_branch_ce
            .iter()
            .enumerate()
            .map(|(b, v)| (format!("per_branch_ce[{b}]"), *v))
            .chain(self.per_branch_align.iter().enumerate().map(|(b, v)| (format!("per_branch_align[{b}]"), *v)))
            .chain([("fusion_ce".to_string(), self.fusion_ce), ("total".to_string(), self.total)]);
        named.into_iter().find(|(_, v)| !v.is_finite()).map(|(name, v)| format!("{name} = {v}"))
    }
}

fn classifier_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("finite std");
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| normal.sample(rng)).collect()).expect("positive extents")
}

impl MsvrModel {
    /// Fresh model; branch `b` draws its backbone from `seed + b`.
    pub fn new(backbone_config: &BackboneConfig, config: &MsvrConfig, seed: u64) -> Result<Self> {
        let seeds: Vec<u64> = (0..config.branches() as u64).map(|b| seed.wrapping_add(b)).collect();
        Self::with_branch_seeds(backbone_config, config, &seeds, seed)
    }

    /// Fresh model with explicit per-branch backbone seeds; classifier
    /// weights for branch `b` are drawn from `branch_seeds[b]` too, and the
    /// fusion classifier from `fusion_seed`.
    pub fn with_branch_seeds(
        backbone_config: &BackboneConfig,
        config: &MsvrConfig,
        branch_seeds: &[u64],
        fusion_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if branch_seeds.len() != config.branches() {
            return Err(Error::Config(format!(
                "{} branch seeds for {} scales",
                branch_seeds.len(),
                config.branches()
            )));
        }
        let d = backbone_config.embed_dim;
        let mut branches = Vec::new();
        let mut branch_classifiers = Vec::new();
        for (&side, &seed) in config.scales.iter().zip(branch_seeds) {
            branches.push(backbone::init_backbone(&backbone_config.with_input_side(side), seed)?);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5_51F1_E500_0000);
            branch_classifiers.push(classifier_init(config.n_id, d, &mut rng));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fusion_seed ^ 0xF05E_0000_0000_0001);
        let fusion_classifier = classifier_init(config.n_id, d * config.branches(), &mut rng);
        Ok(MsvrModel { branches, branch_classifiers, fusion_classifier })
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.branches[0].embed_dim()
    }

    pub fn n_id(&self) -> usize {
        self.fusion_classifier.shape()[0]
    }

    pub fn scales(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.config().input_side).collect()
    }

    /// Every learnable tensor in declaration order: branch backbones, branch
    /// classifiers, fusion classifier.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.branches.iter().flat_map(|b| b.tensors()).collect();
        out.extend(self.branch_classifiers.iter());
        out.push(&self.fusion_classifier);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.branches.iter_mut().flat_map(|b| b.tensors_mut()).collect();
        out.extend(self.branch_classifiers.iter_mut());
        out.push(&mut self.fusion_classifier);
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let branches = self.branches.iter().map(|b| b.bind(g, trainable)).collect();
        let mut insert = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let branch_classifiers = self.branch_classifiers.iter().map(&mut insert).collect();
        let fusion_classifier = insert(&self.fusion_classifier);
        BoundModel { branches, branch_classifiers, fusion_classifier }
    }

    fn check_pyramid(&self, pyramid: &[Tensor]) -> Result<()> {
        if pyramid.len() != self.branch_count() {
            return Err(Error::Shape(format!(
                "pyramid has {} scales, model has {} branches",
                pyramid.len(),
                self.branch_count()
            )));
        }
        Ok(())
    }
}

/// Model parameters inserted into a graph, in [`MsvrModel::tensors`] order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub branches: Vec<BoundBackbone>,
    pub branch_classifiers: Vec<Var>,
    pub fusion_classifier: Var,
}

impl BoundModel {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.branches.iter().flat_map(|b| b.stages.iter().flat_map(|(k, b)| [*k, *b])).collect();
        out.extend(&self.branch_classifiers);
        out.push(self.fusion_classifier);
        out
    }
}

// --------------------------------------------------------------------------
// Loss building blocks

/// Logits `W·x` for classifier `[n_id × d']` and feature `[d']`.
pub fn logits(g: &mut Graph, classifier: Var, x: Var) -> Result<Var> {
    let d = g.shape(x).iter().product::<usize>();
    let column = g.reshape(x, vec![d, 1])?;
    let z = g.matmul(classifier, column)?;
    let n = g.shape(z)[0];
    g.reshape(z, vec![n])
}

/// `p(y | I) = exp(w_yᵀx) / Σ_k exp(w_kᵀx)`.
pub fn class_posterior(g: &mut Graph, classifier: Var, x: Var) -> Result<Var> {
    let z = logits(g, classifier, x)?;
    g.softmax(z, 1.0)
}

/// `−log p(label)` from logits, via log-sum-exp.
pub fn ce_loss(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let n = g.value(logits).numel();
    if label >= n {
        return Err(Error::Param(format!("label {label} out of range for {n} classes")));
    }
    let lse = g.log_sum_exp(logits);
    let picked = g.pick(logits, label)?;
    g.sub(lse, picked)
}

/// Tempered softmax of the fusion logits. With `detach` the result is a
/// constant of the graph.
pub fn consensus_soft_prediction(g: &mut Graph, fusion_logits: Var, temperature: f64, detach: bool) -> Result<Var> {
    let p = g.softmax(fusion_logits, temperature)?;
    Ok(if detach { g.detach(p) } else { p })
}

/// `−(1/n) Σ_i [ t_i ln p_i + (1 − t_i) ln(1 − p_i) ]` with `p` clamped to
/// `[ε, 1 − ε]`.
pub fn alignment_loss(g: &mut Graph, teacher: Var, student: Var) -> Result<Var> {
    if g.shape(teacher) != g.shape(student) {
        return Err(Error::Shape(format!(
            "teacher {:?} and student {:?} differ",
            g.shape(teacher),
            g.shape(student)
        )));
    }
    let n = g.value(student).numel() as f64;
    let p = g.clamp(student, ALIGN_EPSILON, 1.0 - ALIGN_EPSILON)?;
    let log_p = g.log(p);
    let neg_p = g.scale(p, -1.0);
    let one_minus_p = g.add_scalar(neg_p, 1.0);
    let log_q = g.log(one_minus_p);
    let neg_t = g.scale(teacher, -1.0);
    let one_minus_t = g.add_scalar(neg_t, 1.0);
    let a = g.mul(teacher, log_p)?;
    let b = g.mul(one_minus_t, log_q)?;
    let both = g.add(a, b)?;
    let s = g.sum(both);
    Ok(g.scale(s, -1.0 / n))
}

/// `L_ce + λ · H`.
pub fn branch_loss(g: &mut Graph, ce: Var, align: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Param(format!("lambda must be non-negative, got {lambda}")));
    }
    let weighted = g.scale(align, lambda);
    g.add(ce, weighted)
}

/// A recorded forward pass whose `total` can be differentiated.
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    pub params: BoundModel,
    pub total: Var,
    /// Sum over branches of the batch-mean alignment terms, unweighted.
    pub align_sum: Var,
    pub breakdown: LossBreakdown,
}

/// Builds the full objective for a batch; `batch[i]` holds one `[3×s×s]`
/// tensor per branch for sample `i`.
pub fn forward_batch(model: &MsvrModel, config: &MsvrConfig, batch: &[Vec<Tensor>], labels: &[usize]) -> Result<ForwardPass> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::Contract(format!("{} samples with {} labels", batch.len(), labels.len())));
    }
    if config.branches() != model.branch_count() {
        return Err(Error::Shape(format!(
            "config has {} scales, model has {} branches",
            config.branches(),
            model.branch_count()
        )));
    }
    let m = model.branch_count();
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);

    let mut ce_terms: Vec<Vec<Var>> = vec![Vec::new(); m];
    let mut align_terms: Vec<Vec<Var>> = vec![Vec::new(); m];
    let mut fusion_terms = Vec::new();
    for (pyramid, &label) in batch.iter().zip(labels) {
        model.check_pyramid(pyramid)?;
        let mut embeddings = Vec::with_capacity(m);
        let mut branch_logits = Vec::with_capacity(m);
        for b in 0..m {
            let x = g.constant(pyramid[b].clone());
            let e = backbone::embed(&mut g, &params.branches[b], model.branches[b].config(), x)?;
            let z = logits(&mut g, params.branch_classifiers[b], e)?;
            ce_terms[b].push(ce_loss(&mut g, z, label)?);
            embeddings.push(e);
            branch_logits.push(z);
        }
        let fused = g.concat(&embeddings, 0)?;
        let fusion_logits = logits(&mut g, params.fusion_classifier, fused)?;
        fusion_terms.push(ce_loss(&mut g, fusion_logits, label)?);
        let teacher = consensus_soft_prediction(&mut g, fusion_logits, config.temperature, config.detach_teacher)?;
        for (b, z) in branch_logits.into_iter().enumerate() {
            let student = g.softmax(z, 1.0)?;
            align_terms[b].push(alignment_loss(&mut g, teacher, student)?);
        }
    }

    let per_branch_ce = ce_terms.iter().map(|t| batch_mean(&mut g, t)).collect::<Result<Vec<_>>>()?;
    let per_branch_align = align_terms.iter().map(|t| batch_mean(&mut g, t)).collect::<Result<Vec<_>>>()?;
    let fusion_ce = batch_mean(&mut g, &fusion_terms)?;

    let mut total = fusion_ce;
    for b in 0..m {
        let scale_loss = branch_loss(&mut g, per_branch_ce[b], per_branch_align[b], config.lambda)?;
        total = g.add(total, scale_loss)?;
    }
    let align_sum = sum_vars(&mut g, &per_branch_align)?;

    let value = |g: &Graph, v: Var| g.data(v)[0];
    let breakdown = LossBreakdown {
        per_branch_ce: per_branch_ce.iter().map(|v| value(&g, *v)).collect(),
        per_branch_align: per_branch_align.iter().map(|v| value(&g, *v)).collect(),
        fusion_ce: value(&g, fusion_ce),
        total: value(&g, total),
    };
    Ok(ForwardPass { graph: g, params, total, align_sum, breakdown })
}

fn sum_vars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t)?;
    }
    Ok(acc)
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let s = sum_vars(g, terms)?;
    Ok(g.scale(s, 1.0 / terms.len() as f64))
}

// --------------------------------------------------------------------------
// Deployment

/// Per-branch pooled embeddings, in branch order.
pub fn branch_embeddings(model: &MsvrModel, pyramid: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    model.check_pyramid(pyramid)?;
    model.branches.iter().zip(pyramid).map(|(params, img)| backbone::embed_image(params, img)).collect()
}

/// The re-identification descriptor: concatenated branch embeddings.
pub fn extract_features(model: &MsvrModel, pyramid: &[Tensor]) -> Result<Vec<f64>> {
    Ok(branch_embeddings(model, pyramid)?.concat())
}

/// Test-time pyramid of an image (plain resizes, no augmentation).
pub fn image_pyramid(model: &MsvrModel, img: &Image) -> Result<Vec<Tensor>> {
    Ok(pyramid::plain_pyramid(img, &model.scales())?.iter().map(Image::to_tensor).collect())
}

// --------------------------------------------------------------------------
// Training

/// One loss-trace row: the batch loss evaluated after `iteration` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

/// Seeded stream of augmented training batches.
///
/// Sample order is an epoch-wise shuffle; each drawn sample gets one
/// augmentation decision shared by all its pyramid levels.
pub struct BatchStream<'a> {
    data: &'a [(Image, usize)],
    scales: Vec<usize>,
    augment: AugmentConfig,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(data: &'a [(Image, usize)], config: &MsvrConfig, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let mut stream = BatchStream {
            data,
            scales: config.scales.clone(),
            augment: config.augment,
            batch_size: config.batch_size,
            order: (0..data.len()).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        stream.order.shuffle(&mut stream.rng);
        Ok(stream)
    }

    pub fn next_batch(&mut self) -> Result<(Vec<Vec<Tensor>>, Vec<usize>)> {
        let mut batch = Vec::with_capacity(self.batch_size);
        let mut labels = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let (img, label) = &self.data[self.order[self.cursor]];
            self.cursor += 1;
            let levels = pyramid::build_pyramid(img, &self.scales, Some((&self.augment, &mut self.rng)))?;
            batch.push(levels.iter().map(Image::to_tensor).collect());
            labels.push(*label);
        }
        Ok((batch, labels))
    }
}

/// Adam with decoupled weight decay (parameters shrink by `lr·wd` each step
/// before the adaptive update).
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &MsvrConfig, sizes: &[usize]) -> Self {
        Adam {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.adam_epsilon,
            step: 0,
            first: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            second: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    /// Applies one update; parameters whose gradient is `None` (not reached
    /// by the loss) are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f64]>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let shrink = 1.0 - self.learning_rate * self.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
                *w = *w * shrink - self.learning_rate * update;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MsvrModel,
    pub trace: Vec<TraceRow>,
}

/// Trains `model` on labelled images. Batches, augmentation and shuffling
/// are drawn from `seed`. A trace row is recorded at iteration 0, every
/// `trace_every` iterations, and once more after the final update.
pub fn train(
    model: MsvrModel,
    data: &[(Image, usize)],
    config: &MsvrConfig,
    seed: u64,
    mut on_trace: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if let Some((_, bad)) = data.iter().find(|(_, l)| *l >= model.n_id()) {
        return Err(Error::Contract(format!("label {bad} exceeds the model's {} identities", model.n_id())));
    }
    let mut model = model;
    let mut stream = BatchStream::new(data, config, seed)?;
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(config, &sizes);
    let mut trace = Vec::new();

    for iteration in 0..=config.max_iterations {
        let (batch, labels) = stream.next_batch()?;
        let mut pass = forward_batch(&model, config, &batch, &labels)?;
        if let Some(term) = pass.breakdown.first_non_finite() {
            return Err(Error::Numerical(format!("{term} at iteration {iteration}")));
        }
        let last = iteration == config.max_iterations;
        if iteration % config.trace_every == 0 || last {
            let row = TraceRow { iteration, loss: pass.breakdown.clone() };
            on_trace(&row);
            trace.push(row);
        }
        if last {
            break;
        }
        pass.graph.backward(pass.total)?;
        let vars = pass.params.vars();
        let grads: Vec<Option<&[f64]>> = vars.iter().map(|v| pass.graph.grad(*v)).collect();
        adam.step(&mut model.tensors_mut(), &grads);
    }
    Ok(TrainOutcome { model, trace })
}

/// Loss trace as CSV: iteration, per-branch CE, per-branch alignment,
/// fusion CE, total.
pub fn write_trace_csv<W: Write>(w: &mut W, trace: &[TraceRow]) -> std::io::Result<()> {
    let m = trace.first().map_or(0, |r| r.loss.per_branch_ce.len());
    let mut header = vec!["iteration".to_string()];
    header.extend((0..m).map(|b| format!("ce_{b}")));
    header.extend((0..m).map(|b| format!("align_{b}")));
    header.extend(["fusion_ce".to_string(), "total".to_string()]);
    writeln!(w, "{}", header.join(","))?;
    for row in trace {
        let mut cells = vec![row.iteration.to_string()];
        cells.extend(row.loss.per_branch_ce.iter().map(|v| format!("{v:.9}")));
        cells.extend(row.loss.per_branch_align.iter().map(|v| format!("{v:.9}")));
        cells.push(format!("{:.9}", row.loss.fusion_ce));
        cells.push(format!("{:.9}", row.loss.total));
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

// --------------------------------------------------------------------------
// Checkpoints

const MODEL_KIND: &str = "msvr-model";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointConfig {
    backbone: BackboneConfig,
    model: MsvrConfig,
}

/// Writes the backbone container with classifier matrices appended and the
/// model configuration echoed in the header.
pub fn save_model<W: Write>(w: &mut W, model: &MsvrModel, config: &MsvrConfig) -> Result<()> {
    let echo = CheckpointConfig { backbone: model.branches[0].config().clone(), model: config.clone() };
    let container = Container {
        kind: MODEL_KIND.into(),
        config_json: serde_json::to_string(&echo).expect("config serializes"),
        tensors: model.tensors().into_iter().cloned().collect(),
    };
    backbone::write_container(w, &container).map_err(|e| Error::Data(format!("checkpoint: {e}")))
}

pub fn load_model<R: Read>(r: &mut R) -> Result<(MsvrModel, MsvrConfig)> {
    let container = backbone::read_container(r)?;
    if container.kind != MODEL_KIND {
        return Err(Error::Data(format!("expected a model checkpoint, found {:?}", container.kind)));
    }
    let echo: CheckpointConfig =
        serde_json::from_str(&container.config_json).map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    echo.backbone.validate()?;
    echo.model.validate()?;
    let (config, base) = (echo.model, echo.backbone);
    let m = config.branches();
    let per_branch = base.channels_per_stage.len() * 2;
    let expected = m * per_branch + m + 1;
    if container.tensors.len() != expected {
        return Err(Error::Data(format!("checkpoint holds {} tensors, expected {expected}", container.tensors.len())));
    }
    let mut tensors = container.tensors.into_iter();
    let mut branches = Vec::with_capacity(m);
    for &side in &config.scales {
        let chunk: Vec<Tensor> = tensors.by_ref().take(per_branch).collect();
        branches.push(BackboneParams::from_tensors(&base.with_input_side(side), chunk)?);
    }
    let d = base.embed_dim;
    let check = |t: Tensor, cols: usize| {
        if t.shape() != [config.n_id, cols] {
            return Err(Error::Data(format!("classifier shape {:?}, expected [{}, {cols}]", t.shape(), config.n_id)));
        }
        Ok(t)
    };
    let branch_classifiers =
        tensors.by_ref().take(m).map(|t| check(t, d)).collect::<Result<Vec<_>>>()?;
    let fusion_classifier = check(tensors.next().unwrap(), d * m)?;
    Ok((MsvrModel { branches, branch_classifiers, fusion_classifier }, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            input_side: 12,
            channels_per_stage: vec![4, 5],
            stage_strides: vec![2, 2],
            kernel_size: 3,
            embed_dim: 5,
        }
    }

    fn tiny_config(m: usize) -> MsvrConfig {
        MsvrConfig { scales: [12, 8, 10][..m].to_vec(), n_id: 3, batch_size: 2, ..MsvrConfig::default() }
    }

    fn pyramid_for(config: &MsvrConfig, seed: u64) -> Vec<Tensor> {
        config
            .scales
            .iter()
            .map(|&s| {
                let data = (0..3 * s * s).map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64) / 1000.0).collect();
                Tensor::new(vec![3, s, s], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn defaults_match_reported_settings() {
        let c = MsvrConfig::default();
        assert_eq!(c.scales, vec![224, 160]);
        assert_eq!((c.lambda, c.temperature), (1.0, 1.0));
        assert_eq!((c.learning_rate, c.weight_decay, c.beta1), (0.0002, 0.0002, 0.5));
        assert_eq!((c.batch_size, c.max_iterations), (8, 100_000));
        assert_eq!((c.beta2, c.adam_epsilon), (0.999, 1e-8));
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = tiny_config(2);
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config(2);
        c.lambda = -0.1;
        assert!(c.validate().is_err());
        let mut c = tiny_config(2);
        c.scales.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_feature_posterior_is_uniform() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::new(vec![4, 3], (0..12).map(|i| i as f64).collect()).unwrap());
        let x = g.constant(Tensor::vector(vec![0.0; 3]));
        let p = class_posterior(&mut g, w, x).unwrap();
        assert!(g.data(p).iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn ce_of_uniform_is_log_n_and_label_checked() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0; 4]));
        let ce = ce_loss(&mut g, z, 2).unwrap();
        assert!((g.data(ce)[0] - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(ce_loss(&mut g, z, 4), Err(Error::Param(_))));
    }

    #[test]
    fn ce_of_three_to_one_odds() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![3f64.ln(), 0.0]));
        let ce = ce_loss(&mut g, z, 0).unwrap();
        assert!((g.data(ce)[0] - 0.287_682_072_451_780_9).abs() < 1e-12);
    }

    #[test]
    fn alignment_closed_forms() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::vector(vec![0.5, 0.5]));
        let p = g.constant(Tensor::vector(vec![0.5, 0.5]));
        let h = alignment_loss(&mut g, t, p).unwrap();
        assert!((g.data(h)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let e = ALIGN_EPSILON;
        let t = g.constant(Tensor::vector(vec![1.0 - e, e]));
        let h = alignment_loss(&mut g, t, t).unwrap();
        assert!(g.data(h)[0] < 1e-5);

        let short = g.constant(Tensor::vector(vec![1.0]));
        assert!(alignment_loss(&mut g, t, short).is_err());
    }

    #[test]
    fn branch_loss_weighting() {
        let mut g = Graph::new();
        let ce = g.constant(Tensor::scalar(0.3));
        let al = g.constant(Tensor::scalar(0.7));
        let zero = branch_loss(&mut g, ce, al, 0.0).unwrap();
        assert_eq!(g.data(zero)[0], 0.3);
        let one = branch_loss(&mut g, ce, al, 1.0).unwrap();
        assert!((g.data(one)[0] - 1.0).abs() < 1e-15);
        assert!(branch_loss(&mut g, ce, al, -1.0).is_err());
    }

    #[test]
    fn consensus_is_shift_invariant() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.2, -1.0, 3.0]));
        let z2 = g.add_scalar(z, 17.5);
        let a = consensus_soft_prediction(&mut g, z, 2.0, true).unwrap();
        let b = consensus_soft_prediction(&mut g, z2, 2.0, true).unwrap();
        for (x, y) in g.data(a).iter().zip(g.data(b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn consensus_at_temperature_two() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![2.0, 0.0]));
        let p = consensus_soft_prediction(&mut g, z, 2.0, true).unwrap();
        let e = std::f64::consts::E;
        assert!((g.data(p)[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.data(p)[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn breakdown_accounts_for_total() {
        let config = tiny_config(2);
        let model = MsvrModel::new(&tiny_backbone(), &config, 5).unwrap();
        let batch = vec![pyramid_for(&config, 1), pyramid_for(&config, 2)];
        let pass = forward_batch(&model, &config, &batch, &[0, 2]).unwrap();
        let b = &pass.breakdown;
        assert!((b.recomputed_total(config.lambda) - b.total).abs() < 1e-10);
        assert_eq!(b.total, pass.graph.data(pass.total)[0]);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let config = tiny_config(2);
        let model = MsvrModel::new(&tiny_backbone(), &config, 5).unwrap();
        let batch = vec![pyramid_for(&config, 1)];
        assert!(forward_batch(&model, &config, &batch, &[3]).is_err());
        let short = vec![pyramid_for(&config, 1)[..1].to_vec()];
        assert!(forward_batch(&model, &config, &short, &[0]).is_err());
        assert!(forward_batch(&model, &tiny_config(1), &batch, &[0]).is_err());
    }

    #[test]
    fn features_are_concatenated_branch_embeddings() {
        let config = tiny_config(2);
        let model = MsvrModel::new(&tiny_backbone(), &config, 8).unwrap();
        let p = pyramid_for(&config, 3);
        let f = extract_features(&model, &p).unwrap();
        assert_eq!(f.len(), 10);
        let parts = branch_embeddings(&model, &p).unwrap();
        assert_eq!(f, [parts[0].clone(), parts[1].clone()].concat());
        assert_eq!(f, extract_features(&model, &p).unwrap());
        assert!(extract_features(&model, &p[..1]).is_err());
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let config = tiny_config(2);
        let model = MsvrModel::new(&tiny_backbone(), &config, 8).unwrap();
        let mut bytes = Vec::new();
        save_model(&mut bytes, &model, &config).unwrap();
        let (back, back_config) = load_model(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_config, config);

        let mut bb = Vec::new();
        backbone::save_backbone(&mut bb, &model.branches[0]).unwrap();
        assert!(load_model(&mut bb.as_slice()).is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let row = TraceRow {
            iteration: 0,
            loss: LossBreakdown { per_branch_ce: vec![1.0, 2.0], per_branch_align: vec![0.1, 0.2], fusion_ce: 3.0, total: 6.3 },
        };
        let mut out = Vec::new();
        write_trace_csv(&mut out, &[row]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iteration,ce_0,ce_1,align_0,align_1,fusion_ce,total");
        assert!(lines.next().unwrap().starts_with("0,1.000000000,2.000000000,0.100000000"));
    }
}
