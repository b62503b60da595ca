//! A small dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values live in a [`Graph`] arena and are addressed through copyable
//! [`Var`] handles. Every operation appends one node holding its output value
//! and enough saved state to apply its local gradient rule, so the node list
//! is already in topological order and [`Graph::backward`] is a single reverse
//! sweep.
//!
//! Gradients accumulate: calling `backward` twice without
//! [`Graph::zero_grad`] in between adds the second pass onto the first.
//!
//! ```
//! use msvr::ndgrad::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let s = g.sum(sq);
//! let loss = g.scale(s, 0.5);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[1.0, -2.0, 0.5]);
//! ```

mod kernels;

use crate::error::{Error, Result};
use kernels::ConvGeometry;

/// An n-dimensional row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive and that the
    /// extents multiply out to `data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// A one-dimensional tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector tensors need at least one element");
        Tensor { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape))),
        }
    }

    fn without_grad_state(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), requires_grad: false, grad: None }
    }
}

/// Handle to a node of one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d { x: Var, kernels: Var, geom: ConvGeometry, c_out: usize, cols: Vec<f64> },
    BiasAdd(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    GlobalAvgPool(Var),
    Softmax(Var, f64),
    Pick(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded operations in creation (= topological) order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as-is, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Inserts a trainable tensor.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Inserts a tensor that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.without_grad_state();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        let value = Tensor { shape, data, requires_grad, grad: None };
        self.push(value, op)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ----------------------------------------------------------------------
    // Operations

    /// Matrix product of `[n×k]` and `[k×m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        kernels::gemm_nn(n, k, m, self.data(a), self.data(b), &mut out);
        Ok(self.push_op(vec![n, m], out, &[a, b], Op::MatMul(a, b)))
    }

    /// Cross-correlation of `x: [c_in×h×w]` with `kernels: [c_out×c_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernels).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sx[0] != sk[1] {
            return Err(Error::Shape(format!("conv2d of input {sx:?} with kernels {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::Param("conv2d stride must be positive".into()));
        }
        let (c_in, h, w) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}×{kw} exceeds padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let cols = kernels::im2col(self.data(x), &geom);
        let mut out = vec![0.0; c_out * geom.out_len()];
        kernels::gemm_nn(c_out, geom.patch_len(), geom.out_len(), self.data(kernels), &cols, &mut out);
        let shape = vec![c_out, geom.out_h, geom.out_w];
        Ok(self.push_op(shape, out, &[x, kernels], Op::Conv2d { x, kernels, geom, c_out, cols }))
    }

    /// Adds `bias[c]` to every element of slice `c` along the leading axis.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::Shape(format!("bias {sb:?} does not match leading axis of {sx:?}")));
        }
        let shape = sx.to_vec();
        let inner = self.value(x).numel() / shape[0];
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(inner)
            .zip(b)
            .flat_map(|(chunk, &bc)| chunk.iter().map(move |v| v + bc))
            .collect();
        Ok(self.push_op(shape, out, &[x, bias], Op::BiasAdd(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push_op(self.shape(a).to_vec(), out, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        Ok(self.push_op(self.shape(a).to_vec(), out, &[a, b], Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push_op(self.shape(a).to_vec(), out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * factor).collect();
        self.push_op(self.shape(a).to_vec(), out, &[a], Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let out = self.data(a).iter().map(|x| x + offset).collect();
        self.push_op(self.shape(a).to_vec(), out, &[a], Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|x| x.max(0.0)).collect();
        self.push_op(self.shape(a).to_vec(), out, &[a], Op::Relu(a))
    }

    /// Natural logarithm; non-positive inputs yield `-inf`/`NaN` as usual.
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|x| x.ln()).collect();
        self.push_op(self.shape(a).to_vec(), out, &[a], Op::Log(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through inside the
    /// closed interval and blocked outside it.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::Param(format!("clamp bounds [{lo}, {hi}]")));
        }
        let out = self.data(a).iter().map(|x| x.clamp(lo, hi)).collect();
        Ok(self.push_op(self.shape(a).to_vec(), out, &[a], Op::Clamp(a, lo, hi)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(Error::Shape("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat along {axis}: {first:?} vs {s:?}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.data(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push_op(out_shape, out, inputs, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.value(a).numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        let out = self.data(a).to_vec();
        Ok(self.push_op(shape, out, &[a], Op::Reshape(a)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push_op(vec![1], vec![s], &[a], Op::Sum(a))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.data(a).iter().sum();
        self.push_op(vec![1], vec![s / n], &[a], Op::Mean(a))
    }

    /// `ln Σ exp(a_i)` over all elements, evaluated with max-subtraction.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let v = log_sum_exp(self.data(a));
        self.push_op(vec![1], vec![v], &[a], Op::LogSumExp(a))
    }

    /// Spatial mean of each channel of a `[c×h×w]` tensor.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::Shape(format!("global_avg_pool expects [c×h×w], got {s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let out = self.data(x).chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        Ok(self.push_op(vec![c], out, &[x], Op::GlobalAvgPool(x)))
    }

    /// Tempered softmax `exp(z_i/T) / Σ_k exp(z_k/T)` of a 1-D tensor.
    pub fn softmax(&mut self, z: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Param(format!("softmax temperature must be positive, got {temperature}")));
        }
        if self.shape(z).len() != 1 {
            return Err(Error::Shape(format!("softmax expects a vector, got {:?}", self.shape(z))));
        }
        let out = softmax(self.data(z), temperature);
        Ok(self.push_op(self.shape(z).to_vec(), out, &[z], Op::Softmax(z, temperature)))
    }

    /// Element `index` (flat, row-major) as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.value(a).numel();
        if index >= n {
            return Err(Error::Shape(format!("pick index {index} out of range for {n} elements")));
        }
        let v = self.data(a)[index];
        Ok(self.push_op(vec![1], vec![v], &[a], Op::Pick(a, index)))
    }

    // ----------------------------------------------------------------------
    // Reverse sweep

    /// Back-propagates from a scalar root, adding into the stored gradient of
    /// every reachable node that requires one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape
            )));
        }
        if !root_value.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            let value = &mut self.nodes[i].value;
            match &mut value.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                None => value.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        // Accumulates into the pass-local gradient buffer of `v`, skipping
        // constants entirely.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let input = &self.nodes[v.0].value;
            if !input.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; input.numel()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |da| kernels::gemm_nt(n, m, k, g, self.data(*b), da));
                acc(*b, &mut |db| kernels::gemm_tn(k, n, m, self.data(*a), g, db));
            }
            Op::Conv2d { x, kernels: k, geom, c_out, cols } => {
                let (p, q) = (geom.patch_len(), geom.out_len());
                acc(*k, &mut |dk| kernels::gemm_nt(*c_out, q, p, g, cols, dk));
                acc(*x, &mut |dx| {
                    let mut dcols = vec![0.0; p * q];
                    kernels::gemm_tn(p, *c_out, q, self.data(*k), g, &mut dcols);
                    kernels::col2im_add(&dcols, geom, dx);
                });
            }
            Op::BiasAdd(x, b) => {
                acc(*x, &mut |dx| add_into(dx, g));
                let inner = g.len() / self.shape(*b)[0];
                acc(*b, &mut |db| {
                    for (d, chunk) in db.iter_mut().zip(g.chunks(inner)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |da| {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(va) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(a, factor) => {
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * factor));
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |da| add_into(da, g)),
            Op::Relu(a) => {
                let va = self.data(*a);
                acc(*a, &mut |da| {
                    for ((d, gi), x) in da.iter_mut().zip(g).zip(va) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let va = self.data(*a);
                acc(*a, &mut |da| {
                    for ((d, gi), x) in da.iter_mut().zip(g).zip(va) {
                        *d += gi / x;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.data(*a);
                acc(*a, &mut |da| {
                    for ((d, gi), x) in da.iter_mut().zip(g).zip(va) {
                        if *x >= *lo && *x <= *hi {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = &node.value.shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    acc(*v, &mut |dv| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            add_into(&mut dv[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::LogSumExp(a) => {
                let p = softmax(self.data(*a), 1.0);
                acc(*a, &mut |da| {
                    for (d, pi) in da.iter_mut().zip(&p) {
                        *d += g[0] * pi;
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                acc(*x, &mut |dx| {
                    for (chunk, gc) in dx.chunks_mut(hw).zip(g) {
                        let share = gc / hw as f64;
                        chunk.iter_mut().for_each(|d| *d += share);
                    }
                });
            }
            Op::Softmax(z, temperature) => {
                let y = &node.value.data;
                let gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                acc(*z, &mut |dz| {
                    for ((d, gi), yi) in dz.iter_mut().zip(g).zip(y) {
                        *d += yi * (gi - gy) / temperature;
                    }
                });
            }
            Op::Pick(a, index) => acc(*a, &mut |da| da[*index] += g[0]),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Numerically stable `ln Σ exp(z_i)`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Tempered softmax on a plain slice, with max-subtraction.
pub fn softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}
