//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The node set is exactly what the linking model needs: affine maps,
//! width-c convolutions composed from `concat` + `matvec`, tanh/sigmoid/
//! softmax, element-wise products, mean/max pooling over stacks of vectors,
//! cosine similarity, RBF expansion and inverted dropout. A forward pass
//! records one [`Tape`]; [`Tape::backward`] accumulates gradients into the
//! bound [`Parameter`]s. [`grad_check`] verifies any scalar-valued node
//! against central finite differences.
//!
//! Shape mismatches are programmer errors and panic with a diagnostic that
//! names both shapes.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// A named trainable (or frozen) value with its gradient accumulator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// L2 coefficient applied by [`sgd_step`]; zero disables decay.
    pub l2: f64,
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat arena of parameters; models keep `ParamId` handles into it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    pub params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool, l2: f64) -> ParamId {
        let grad = Tensor::zeros(value.shape.clone());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
            l2,
        });
        ParamId(self.params.len() - 1)
    }

    /// Matrix initialized uniformly in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_matrix(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut SeededRng,
        l2: f64,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
        self.add(name, Tensor::new(vec![rows, cols], data), true, l2)
    }

    /// Zero-initialized bias vector.
    pub fn add_bias(&mut self, name: impl Into<String>, n: usize, l2: f64) -> ParamId {
        self.add(name, Tensor::zeros(vec![n]), true, l2)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// FNV-1a over names and value bits; detects any parameter mutation.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for x in &p.value.data {
                eat(&x.to_le_bytes());
            }
        }
        h
    }
}

/// One SGD update: `value -= lr * (grad + l2 * value)` for every trainable
/// parameter, then all gradients reset to zero.
pub fn sgd_step(params: &mut ParamSet, lr: f64) {
    assert!(lr >= 0.0, "learning rate must be non-negative, got {lr}");
    for p in &mut params.params {
        if p.trainable {
            let l2 = p.l2;
            for (v, g) in p.value.data.iter_mut().zip(p.grad.data.iter()) {
                *v -= lr * (g + l2 * *v);
            }
        }
        p.grad.data.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Deterministic RNG (ChaCha8): identical seed, identical draw sequence.
#[derive(Debug, Clone)]
pub struct SeededRng {
    pub seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        // Fisher-Yates, driven only by this generator.
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// W[m,n] · x[n]
    MatVec { w: Var, x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// a * x + b, elementwise constants
    ScaleAdd { x: Var, a: f64 },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    Dot { a: Var, b: Var },
    Cosine { a: Var, b: Var },
    Concat { parts: Vec<Var> },
    MeanStack { parts: Vec<Var> },
    MaxStack { parts: Vec<Var>, argmax: Vec<usize> },
    Pick { x: Var, index: usize },
    LogClamped { x: Var, lo: f64, hi: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    SqrtClamped { x: Var, floor: f64 },
    VMulScalar { v: Var, s: Var },
    RbfExpand { x: Var, centers: Vec<f64>, sigma: f64 },
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    name: &'static str,
}

/// Recorded forward computation; one per forward pass (or minibatch).
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, Var)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node {
            value,
            grad,
            op,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient of interest.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn leaf_vec(&mut self, data: Vec<f64>) -> Var {
        self.leaf(Tensor::vector(data))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(Tensor::scalar(x))
    }

    /// Bind a parameter as a leaf; its gradient is pulled out by
    /// [`Tape::apply_grads`] after backward.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let v = self.push(params.get(id).value.clone(), Op::Leaf, "param");
        self.bindings.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    // ── Forward ops ──────────────────────────────────────────────────

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        assert!(
            ws.len() == 2 && xs.len() == 1 && ws[1] == xs[0],
            "matvec shape mismatch: matrix {ws:?} vs vector {xs:?}"
        );
        let (m, n) = (ws[0], ws[1]);
        let wd = &self.nodes[w.0].value.data;
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &wd[i * n..(i + 1) * n];
            out[i] = row.iter().zip(xd.iter()).map(|(a, b)| a * b).sum();
        }
        self.push(Tensor::vector(out), Op::MatVec { w, x }, "matvec")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "add shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "mul shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data), Op::Mul { a, b }, "mul")
    }

    /// `a * x + b` with scalar constants.
    pub fn scale_add(&mut self, x: Var, a: f64, b: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| a * v + b).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::ScaleAdd { x, a }, "scale_add")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Tanh { x }, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| sigmoid(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Sigmoid { x }, "sigmoid")
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        assert_eq!(
            self.shape(x).len(),
            1,
            "softmax expects a vector, got shape {:?}",
            self.shape(x)
        );
        let xd = self.data(x);
        let max = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xd.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        self.push(Tensor::vector(data), Op::Softmax { x }, "softmax")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "dot shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let s: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot { a, b }, "dot")
    }

    /// Cosine similarity; 0.0 when either vector is zero.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "cosine shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let ad = self.data(a);
        let bd = self.data(b);
        let na = norm(ad);
        let nb = norm(bd);
        let value = if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot(ad, bd) / (na * nb)
        };
        self.push(Tensor::scalar(value), Op::Cosine { a, b }, "cosine")
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(
                self.shape(p).len(),
                1,
                "concat expects vectors, got shape {:?}",
                self.shape(p)
            );
            data.extend_from_slice(self.data(p));
        }
        self.push(
            Tensor::vector(data),
            Op::Concat {
                parts: parts.to_vec(),
            },
            "concat",
        )
    }

    /// Element-wise mean over same-shape vectors. A stack of bit-identical
    /// vectors reproduces the vector exactly.
    pub fn mean_stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "mean_stack of zero parts");
        let shape = self.shape(parts[0]).to_vec();
        for &p in parts {
            assert_eq!(
                self.shape(p),
                &shape[..],
                "mean_stack shape mismatch: {:?} vs {:?}",
                self.shape(p),
                shape
            );
        }
        let identical = parts.iter().all(|&p| self.data(p) == self.data(parts[0]));
        let data = if identical {
            self.data(parts[0]).to_vec()
        } else {
            let n = parts.len() as f64;
            let mut acc = vec![0.0; self.data(parts[0]).len()];
            for &p in parts {
                for (s, v) in acc.iter_mut().zip(self.data(p)) {
                    *s += v;
                }
            }
            acc.iter_mut().for_each(|s| *s /= n);
            acc
        };
        self.push(
            Tensor::new(shape, data),
            Op::MeanStack {
                parts: parts.to_vec(),
            },
            "mean_stack",
        )
    }

    /// Element-wise max over same-shape vectors; gradient flows to the
    /// first argmax per coordinate.
    pub fn max_stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "max_stack of zero parts");
        let shape = self.shape(parts[0]).to_vec();
        let len = self.data(parts[0]).len();
        let mut data = vec![f64::NEG_INFINITY; len];
        let mut argmax = vec![0usize; len];
        for (k, &p) in parts.iter().enumerate() {
            assert_eq!(
                self.shape(p),
                &shape[..],
                "max_stack shape mismatch: {:?} vs {:?}",
                self.shape(p),
                shape
            );
            for (i, &v) in self.data(p).iter().enumerate() {
                if v > data[i] {
                    data[i] = v;
                    argmax[i] = k;
                }
            }
        }
        self.push(
            Tensor::new(shape, data),
            Op::MaxStack {
                parts: parts.to_vec(),
                argmax,
            },
            "max_stack",
        )
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let xd = self.data(x);
        assert!(
            index < xd.len(),
            "pick index {index} out of range for shape {:?}",
            self.shape(x)
        );
        let v = xd[index];
        self.push(Tensor::scalar(v), Op::Pick { x, index }, "pick")
    }

    /// ln(clamp(x, lo, hi)); gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.clamp(lo, hi).ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, data),
            Op::LogClamped { x, lo, hi },
            "log_clamped",
        )
    }

    /// clamp(x, lo, hi) with pass-through gradient inside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Clamp { x, lo, hi }, "clamp")
    }

    /// sqrt(max(x, floor)); the floor keeps the derivative finite at 0.
    pub fn sqrt_clamped(&mut self, x: Var, floor: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(floor).sqrt()).collect();
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, data),
            Op::SqrtClamped { x, floor },
            "sqrt_clamped",
        )
    }

    /// Vector times scalar node.
    pub fn vmul_scalar(&mut self, v: Var, s: Var) -> Var {
        assert_eq!(
            self.data(s).len(),
            1,
            "vmul_scalar expects a scalar, got shape {:?}",
            self.shape(s)
        );
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(v).iter().map(|x| x * sv).collect();
        let shape = self.shape(v).to_vec();
        self.push(Tensor::new(shape, data), Op::VMulScalar { v, s }, "vmul_scalar")
    }

    /// Gaussian RBF expansion of a scalar: out_j = exp(-(x - c_j)^2 / (2 sigma^2)).
    pub fn rbf_expand(&mut self, x: Var, centers: &[f64], sigma: f64) -> Var {
        assert_eq!(
            self.data(x).len(),
            1,
            "rbf_expand expects a scalar, got shape {:?}",
            self.shape(x)
        );
        assert!(sigma > 0.0, "rbf_expand sigma must be positive, got {sigma}");
        let xv = self.data(x)[0];
        let data: Vec<f64> = centers
            .iter()
            .map(|c| (-(xv - c).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect();
        self.push(
            Tensor::vector(data),
            Op::RbfExpand {
                x,
                centers: centers.to_vec(),
                sigma,
            },
            "rbf_expand",
        )
    }

    /// Inverted dropout: at train time each entry is kept with probability
    /// `1 - rate` and scaled by `1 / (1 - rate)`; at inference it is the
    /// identity.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut SeededRng) -> Var {
        assert!(
            (0.0..1.0).contains(&rate),
            "dropout rate must lie in [0, 1), got {rate}"
        );
        if !train || rate == 0.0 {
            return self.scale_add(x, 1.0, 0.0);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.unit() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data), Op::Dropout { x, mask }, "dropout")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar output node.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(
            self.data(out).len(),
            1,
            "backward expects a scalar output, got shape {:?}",
            self.shape(out)
        );
        self.nodes[out.0].grad[0] = 1.0;
        for i in (0..=out.0).rev() {
            let grad = std::mem::take(&mut self.nodes[i].grad);
            match &self.nodes[i].op {
                Op::Leaf => {
                    self.nodes[i].grad = grad;
                    continue;
                }
                Op::MatVec { w, x } => {
                    let (w, x) = (*w, *x);
                    let n = self.nodes[x.0].value.numel();
                    let wd = self.nodes[w.0].value.data.clone();
                    let xd = self.nodes[x.0].value.data.clone();
                    for (r, &g) in grad.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let row = &wd[r * n..(r + 1) * n];
                        for c in 0..n {
                            self.nodes[w.0].grad[r * n + c] += g * xd[c];
                            self.nodes[x.0].grad[c] += g * row[c];
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for (j, &g) in grad.iter().enumerate() {
                        self.nodes[a.0].grad[j] += g;
                        self.nodes[b.0].grad[j] += g;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let ad = self.nodes[a.0].value.data.clone();
                    let bd = self.nodes[b.0].value.data.clone();
                    for (j, &g) in grad.iter().enumerate() {
                        self.nodes[a.0].grad[j] += g * bd[j];
                        self.nodes[b.0].grad[j] += g * ad[j];
                    }
                }
                Op::ScaleAdd { x, a } => {
                    let (x, a) = (*x, *a);
                    for (j, &g) in grad.iter().enumerate() {
                        self.nodes[x.0].grad[j] += g * a;
                    }
                }
                Op::Tanh { x } => {
                    let x = *x;
                    let out_d = self.nodes[i].value.data.clone();
                    for (j, &g) in grad.iter().enumerate() {
                        self.nodes[x.0].grad[j] += g * (1.0 - out_d[j] * out_d[j]);
                    }
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let out_d = self.nodes[i].value.data.clone();
                    for (j, &g) in grad.iter().enumerate() {
                        self.nodes[x.0].grad[j] += g * out_d[j] * (1.0 - out_d[j]);
                    }
                }
                Op::Softmax { x } => {
                    let x = *x;
                    let s = self.nodes[i].value.data.clone();
                    let dot: f64 = grad.iter().zip(&s).map(|(g, v)| g * v).sum();
                    for (j, &g) in grad.iter().enumerate() {
                        self.nodes[x.0].grad[j] += s[j] * (g - dot);
                    }
                }
                Op::Dot { a, b } => {
                    let (a, b) = (*a, *b);
                    let g = grad[0];
                    let ad = self.nodes[a.0].value.data.clone();
                    let bd = self.nodes[b.0].value.data.clone();
                    for j in 0..ad.len() {
                        self.nodes[a.0].grad[j] += g * bd[j];
                        self.nodes[b.0].grad[j] += g * ad[j];
                    }
                }
                Op::Cosine { a, b } => {
                    let (a, b) = (*a, *b);
                    let g = grad[0];
                    let ad = self.nodes[a.0].value.data.clone();
                    let bd = self.nodes[b.0].value.data.clone();
                    let na = norm(&ad);
                    let nb = norm(&bd);
                    if na > 0.0 && nb > 0.0 {
                        let cos = self.nodes[i].value.data[0];
                        for j in 0..ad.len() {
                            self.nodes[a.0].grad[j] +=
                                g * (bd[j] / (na * nb) - cos * ad[j] / (na * na));
                            self.nodes[b.0].grad[j] +=
                                g * (ad[j] / (na * nb) - cos * bd[j] / (nb * nb));
                        }
                    }
                    // Zero-vector cosine is the constant 0; no gradient.
                }
                Op::Concat { parts } => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.numel();
                        for j in 0..len {
                            self.nodes[p.0].grad[j] += grad[off + j];
                        }
                        off += len;
                    }
                }
                Op::MeanStack { parts } => {
                    let parts = parts.clone();
                    let n = parts.len() as f64;
                    for p in parts {
                        for (j, &g) in grad.iter().enumerate() {
                            self.nodes[p.0].grad[j] += g / n;
                        }
                    }
                }
                Op::MaxStack { parts, argmax } => {
                    let parts = parts.clone();
                    let argmax = argmax.clone();
                    for (j, &g) in grad.iter().enumerate() {
                        let p = parts[argmax[j]];
                        self.nodes[p.0].grad[j] += g;
                    }
                }
                Op::Pick { x, index } => {
                    let (x, index) = (*x, *index);
                    self.nodes[x.0].grad[index] += grad[0];
                }
                Op::LogClamped { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    let xd = self.nodes[x.0].value.data.clone();
                    for (j, &g) in grad.iter().enumerate() {
                        if xd[j] > lo && xd[j] < hi {
                            self.nodes[x.0].grad[j] += g / xd[j];
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    let xd = self.nodes[x.0].value.data.clone();
                    for (j, &g) in grad.iter().enumerate() {
                        if xd[j] > lo && xd[j] < hi {
                            self.nodes[x.0].grad[j] += g;
                        }
                    }
                }
                Op::SqrtClamped { x, floor } => {
                    let (x, floor) = (*x, *floor);
                    let xd = self.nodes[x.0].value.data.clone();
                    let out_d = self.nodes[i].value.data.clone();
                    for (j, &g) in grad.iter().enumerate() {
                        if xd[j] > floor {
                            self.nodes[x.0].grad[j] += g / (2.0 * out_d[j]);
                        }
                    }
                }
                Op::VMulScalar { v, s } => {
                    let (v, s) = (*v, *s);
                    let sv = self.nodes[s.0].value.data[0];
                    let vd = self.nodes[v.0].value.data.clone();
                    let mut sg = 0.0;
                    for (j, &g) in grad.iter().enumerate() {
                        self.nodes[v.0].grad[j] += g * sv;
                        sg += g * vd[j];
                    }
                    self.nodes[s.0].grad[0] += sg;
                }
                Op::RbfExpand { x, centers, sigma } => {
                    let x = *x;
                    let centers = centers.clone();
                    let sigma = *sigma;
                    let xv = self.nodes[x.0].value.data[0];
                    let out_d = self.nodes[i].value.data.clone();
                    let mut xg = 0.0;
                    for (j, &g) in grad.iter().enumerate() {
                        xg += g * out_d[j] * (centers[j] - xv) / (sigma * sigma);
                    }
                    self.nodes[x.0].grad[0] += xg;
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    for (j, &g) in grad.iter().enumerate() {
                        self.nodes[x.0].grad[j] += g * mask[j];
                    }
                }
            }
            self.nodes[i].grad = grad;
        }
    }

    /// Accumulate gradients of bound parameters into the [`ParamSet`].
    pub fn apply_grads(&self, params: &mut ParamSet) {
        for &(id, var) in &self.bindings {
            let p = params.get_mut(id);
            for (g, ng) in p.grad.data.iter_mut().zip(&self.nodes[var.0].grad) {
                *g += ng;
            }
        }
    }

    /// First node holding a non-finite value, if any.
    pub fn find_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| n.name)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Max relative error between analytic and central finite-difference
/// gradients of a scalar-valued function of the parameter set:
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-12)`, maximized over every
/// parameter coordinate.
///
/// The function must be deterministic in its parameters (no dropout).
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<f64, Error>
where
    F: Fn(&mut Tape, &ParamSet) -> Var,
{
    grad_check_guarded(f, params, eps, 0.0)
}

/// [`grad_check`] with an absolute-agreement guard: coordinates whose
/// absolute disagreement stays below `abs_floor` are counted as matching.
/// Central differences at `eps` around unit-scale outputs carry an
/// irreducible ~1e-11..1e-9 noise floor, so near-zero true gradients would
/// otherwise dominate the relative maximum with pure noise.
pub fn grad_check_guarded<F>(
    f: F,
    params: &ParamSet,
    eps: f64,
    abs_floor: f64,
) -> Result<f64, Error>
where
    F: Fn(&mut Tape, &ParamSet) -> Var,
{
    assert!(eps > 0.0, "grad_check eps must be positive, got {eps}");

    let mut tape = Tape::new();
    let out = f(&mut tape, params);
    if let Some(node) = tape.find_non_finite() {
        return Err(Error::NonFinite { node: node.into() });
    }
    tape.backward(out);
    let mut analytic = params.clone();
    analytic.zero_grads();
    tape.apply_grads(&mut analytic);

    let mut max_err: f64 = 0.0;
    for (pi, p) in params.params.iter().enumerate() {
        for j in 0..p.value.data.len() {
            let mut plus = params.clone();
            plus.params[pi].value.data[j] += eps;
            let mut minus = params.clone();
            minus.params[pi].value.data[j] -= eps;

            let mut tp = Tape::new();
            let op = f(&mut tp, &plus);
            let fp = tp.data(op)[0];
            let mut tm = Tape::new();
            let om = f(&mut tm, &minus);
            let fm = tm.data(om)[0];
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite {
                    node: "finite-difference probe".into(),
                });
            }

            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic.params[pi].grad.data[j];
            if (a - fd).abs() <= abs_floor {
                continue;
            }
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
