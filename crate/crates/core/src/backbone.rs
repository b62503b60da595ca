//! Per-scale convolutional feature extractor.
//!
//! A plain stack of `conv → bias → ReLU` stages followed by global average
//! pooling, so the embedding dimension equals the last stage's channel count
//! whatever the input resolution.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Side of the square input image, in pixels.
    pub input_side: usize,
    pub channels_per_stage: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub kernel_size: usize,
    /// Must equal the last entry of `channels_per_stage`.
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_side: 64,
            channels_per_stage: vec![16, 32, 64],
            stage_strides: vec![2, 2, 2],
            kernel_size: 3,
            embed_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn with_input_side(&self, input_side: usize) -> Self {
        BackboneConfig { input_side, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels_per_stage.is_empty() || self.channels_per_stage.len() != self.stage_strides.len() {
            return Err(Error::Config(format!(
                "backbone needs matching, non-empty stage lists (channels {:?}, strides {:?})",
                self.channels_per_stage, self.stage_strides
            )));
        }
        if self.channels_per_stage.contains(&0) || self.stage_strides.contains(&0) {
            return Err(Error::Config("stage channels and strides must be positive".into()));
        }
        if self.kernel_size == 0 {
            return Err(Error::Config("kernel_size must be positive".into()));
        }
        if self.channels_per_stage.last() != Some(&self.embed_dim) {
            return Err(Error::Config(format!(
                "embed_dim {} must equal the last stage width {:?}",
                self.embed_dim,
                self.channels_per_stage.last()
            )));
        }
        if self.input_side == 0 {
            return Err(Error::Config("input_side must be positive".into()));
        }
        Ok(())
    }

    fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    /// `(c_in, c_out, stride)` for each stage.
    fn stages(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let inputs = std::iter::once(3).chain(self.channels_per_stage.iter().copied());
        inputs.zip(&self.channels_per_stage).zip(&self.stage_strides).map(|((ci, &co), &s)| (ci, co, s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    /// `[c_out × c_in × k × k]`
    pub kernels: Tensor,
    /// `[c_out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    config: BackboneConfig,
    pub stages: Vec<StageParams>,
}

/// Parameters inserted into a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundBackbone {
    pub stages: Vec<(Var, Var)>,
}

/// He-initialised kernels (zero-mean normal, std `sqrt(2 / fan_in)`), zero biases.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.kernel_size;
    let stages = config
        .stages()
        .map(|(c_in, c_out, _)| {
            let fan_in = c_in * k * k;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let data = (0..c_out * fan_in).map(|_| normal.sample(&mut rng)).collect();
            StageParams {
                kernels: Tensor::new(vec![c_out, c_in, k, k], data).expect("positive extents"),
                bias: Tensor::vector(vec![0.0; c_out]),
            }
        })
        .collect();
    Ok(BackboneParams { config: config.clone(), stages })
}

impl BackboneParams {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.stages.iter().flat_map(|s| [&s.kernels, &s.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.stages.iter_mut().flat_map(|s| [&mut s.kernels, &mut s.bias])
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundBackbone {
        let mut insert = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        BoundBackbone { stages: self.stages.iter().map(|s| (insert(&s.kernels), insert(&s.bias))).collect() }
    }

    /// Rebuilds parameters from tensors in declaration order, checking shapes.
    pub fn from_tensors(config: &BackboneConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let template = init_backbone(config, 0)?;
        if tensors.len() != template.stages.len() * 2 {
            return Err(Error::Data(format!(
                "backbone expects {} tensors, got {}",
                template.stages.len() * 2,
                tensors.len()
            )));
        }
        for (t, expected) in tensors.iter().zip(template.tensors()) {
            if t.shape() != expected.shape() {
                return Err(Error::Data(format!(
                    "parameter shape {:?} does not match config shape {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("non-finite backbone parameter".into()));
            }
        }
        let mut it = tensors.into_iter();
        let stages = (0..template.stages.len())
            .map(|_| StageParams { kernels: it.next().unwrap(), bias: it.next().unwrap() })
            .collect();
        Ok(BackboneParams { config: config.clone(), stages })
    }
}

/// Runs the stage stack on a `[3 × s × s]` image node and pools to `[d]`.
pub fn embed(g: &mut Graph, bound: &BoundBackbone, config: &BackboneConfig, image: Var) -> Result<Var> {
    let shape = g.shape(image);
    let expected = [3, config.input_side, config.input_side];
    if shape != expected {
        return Err(Error::Shape(format!("backbone expects image {expected:?}, got {shape:?}")));
    }
    let mut x = image;
    for (&(kernels, bias), (_, _, stride)) in bound.stages.iter().zip(config.stages()) {
        let conv = g.conv2d(x, kernels, stride, config.padding())?;
        let biased = g.bias_add(conv, bias)?;
        x = g.relu(biased);
    }
    g.global_avg_pool(x)
}

/// Embedding of a single image without keeping the graph around.
pub fn embed_image(params: &BackboneParams, image: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let e = embed(&mut g, &bound, &params.config, x)?;
    Ok(g.data(e).to_vec())
}

// --------------------------------------------------------------------------
// Checkpoint container
//
//   magic    8 bytes  "MSVRCKPT"
//   version  u32 LE
//   kind     u32 LE length + UTF-8
//   config   u32 LE length + UTF-8 JSON echo of the configuration
//   count    u32 LE number of tensors
//   tensors  per tensor: u32 rank, rank × u64 extents, then f64 values
//
// All integers and floats are little-endian.

const CHECKPOINT_MAGIC: &[u8; 8] = b"MSVRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const BACKBONE_KIND: &str = "backbone";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config_json: String,
    pub tensors: Vec<Tensor>,
}

pub fn write_container<W: Write>(w: &mut W, container: &Container) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for text in [&container.kind, &container.config_json] {
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
    }
    w.write_all(&(container.tensors.len() as u32).to_le_bytes())?;
    for t in &container.tensors {
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<Container> {
    let bad = |what: &str| Error::Data(format!("checkpoint: {what}"));
    let io = |e: std::io::Error| Error::Data(format!("checkpoint: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(r).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut texts = Vec::with_capacity(2);
    for _ in 0..2 {
        let len = read_u32(r).map_err(io)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(io)?;
        texts.push(String::from_utf8(buf).map_err(|_| bad("non UTF-8 header"))?);
    }
    let count = read_u32(r).map_err(io)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = read_u32(r).map_err(io)? as usize;
        if rank == 0 || rank > 8 {
            return Err(bad(&format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(io)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| bad("overflow"))?;
        if numel > 1 << 28 {
            return Err(bad("tensor too large"));
        }
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b).map_err(io)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    let config_json = texts.pop().unwrap();
    let kind = texts.pop().unwrap();
    Ok(Container { kind, config_json, tensors })
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_backbone<W: Write>(w: &mut W, params: &BackboneParams) -> Result<()> {
    let container = Container {
        kind: BACKBONE_KIND.into(),
        config_json: serde_json::to_string(&params.config).expect("config serializes"),
        tensors: params.tensors().cloned().collect(),
    };
    write_container(w, &container).map_err(|e| Error::Data(format!("checkpoint: {e}")))
}

pub fn load_backbone<R: Read>(r: &mut R) -> Result<BackboneParams> {
    let container = read_container(r)?;
    if container.kind != BACKBONE_KIND {
        return Err(Error::Data(format!("expected a backbone checkpoint, found {:?}", container.kind)));
    }
    let config: BackboneConfig = serde_json::from_str(&container.config_json)
        .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    config.validate()?;
    BackboneParams::from_tensors(&config, container.tensors)
}
