//! Append-only computation graph and reverse-mode propagation.
//!
//! Every vector-Jacobian product is itself written with graph operators, so
//! the same propagation routine serves two purposes: plain `backward` (new
//! nodes are unrecorded constants and are discarded afterwards) and
//! `grad_as_graph` (new nodes are recorded, giving a gradient that can be
//! differentiated again). Operators whose products are computed numerically
//! are flagged as not double-differentiable and rejected in the second mode.

use std::collections::HashMap;
use std::sync::Arc;

use super::array::{numel, Array};
use super::index_map::IndexMap;
use super::AutodiffError;

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tensor(pub(crate) usize);

impl Tensor {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) struct BnSaved {
    pub xhat: Array,
    pub inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Mul,
    Scale(f64),
    AddScalar,
    Pow(f64),
    MatMul { ta: bool, tb: bool },
    Gather(Arc<IndexMap>),
    Scatter(Arc<IndexMap>),
    Reshape,
    LeakyRelu(f64),
    Sigmoid,
    Softmax,
    Gelu,
    Sum,
    BatchNorm(Arc<BnSaved>),
    Dropout(Arc<Array>),
    CrossEntropy(Arc<Vec<usize>>),
    Bce { targets: Arc<Array>, eps: f64 },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add-scalar",
            Op::Pow(_) => "pow",
            Op::MatMul { .. } => "matmul",
            Op::Gather(m) | Op::Scatter(m) => match **m {
                IndexMap::Broadcast { .. } => "broadcast",
                IndexMap::Permute { .. } => "permute",
                IndexMap::Slice { .. } => "slice",
                IndexMap::Rows { .. } => "embedding-lookup",
                IndexMap::Im2Col { .. } => "conv2d",
                IndexMap::Upsample { .. } => "nearest-upsample",
            },
            Op::Reshape => "reshape",
            Op::LeakyRelu(_) => "leaky-relu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::Gelu => "gelu",
            Op::Sum => "sum",
            Op::BatchNorm(_) => "batch-norm",
            Op::Dropout(_) => "dropout",
            Op::CrossEntropy(_) => "cross-entropy",
            Op::Bce { .. } => "binary-cross-entropy",
        }
    }

    fn double_differentiable(&self) -> bool {
        !matches!(
            self,
            Op::BatchNorm(_) | Op::Dropout(_) | Op::CrossEntropy(_) | Op::Bce { .. }
        )
    }
}

struct Node {
    value: Array,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Gradients of every `requires_grad` leaf, keyed by node id.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<usize, Array>,
}

impl Gradients {
    pub fn get(&self, t: Tensor) -> Option<&Array> {
        self.map.get(&t.0)
    }

    pub fn take(&mut self, t: Tensor) -> Option<Array> {
        self.map.remove(&t.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tensor) -> &Array {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Tag of the operation that produced `t` ("leaf" for inputs and constants).
    pub fn op_name(&self, t: Tensor) -> &'static str {
        self.nodes[t.0].op.name()
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Tensor {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Array) -> Tensor {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Array) -> Tensor {
        self.leaf(value, false)
    }

    pub(crate) fn push(&mut self, value: Array, op: Op, inputs: &[Tensor]) -> Tensor {
        let requires_grad = self.recording && inputs.iter().any(|t| self.nodes[t.0].requires_grad);
        let (op, inputs) = if requires_grad {
            (op, inputs.iter().map(|t| t.0).collect())
        } else {
            (Op::Leaf, Vec::new())
        };
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ---- primitive operators -------------------------------------------

    pub(crate) fn add_same(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add, &[a, b]))
    }

    pub(crate) fn mul_same(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul, &[a, b]))
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(c), &[x])
    }

    pub fn add_scalar(&mut self, x: Tensor, c: f64) -> Tensor {
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddScalar, &[x])
    }

    pub fn pow(&mut self, x: Tensor, p: f64) -> Tensor {
        let v = self.value(x).map(|a| powf(a, p));
        self.push(v, Op::Pow(p), &[x])
    }

    /// `op(a) · op(b)` for rank-2 operands or rank-3 operands sharing a batch
    /// extent, where `op` transposes the last two axes when its flag is set.
    pub fn matmul_t(&mut self, a: Tensor, b: Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(mismatch());
        }
        let r = sa.len();
        if r == 3 && sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (m, ka) = if ta {
            (sa[r - 1], sa[r - 2])
        } else {
            (sa[r - 2], sa[r - 1])
        };
        let (kb, n) = if tb {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if ka != kb {
            return Err(mismatch());
        }
        let batch = if r == 3 { sa[0] } else { 1 };
        let out = gemm_batched(self.value(a).data(), self.value(b).data(), batch, m, ka, n, ta, tb);
        let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        Ok(self.push(Array::new(shape, out), Op::MatMul { ta, tb }, &[a, b]))
    }

    pub(crate) fn gather(&mut self, x: Tensor, map: Arc<IndexMap>) -> Result<Tensor> {
        if self.shape(x) != map.in_shape().as_slice() {
            return Err(AutodiffError::ShapeMismatch {
                op: Op::Gather(map.clone()).name(),
                lhs: self.shape(x).to_vec(),
                rhs: map.in_shape(),
            });
        }
        let v = map.gather(self.value(x));
        Ok(self.push(v, Op::Gather(map), &[x]))
    }

    pub(crate) fn scatter(&mut self, x: Tensor, map: Arc<IndexMap>) -> Result<Tensor> {
        if self.shape(x) != map.out_shape().as_slice() {
            return Err(AutodiffError::ShapeMismatch {
                op: Op::Scatter(map.clone()).name(),
                lhs: self.shape(x).to_vec(),
                rhs: map.out_shape(),
            });
        }
        let v = map.scatter(self.value(x));
        Ok(self.push(v, Op::Scatter(map), &[x]))
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.value(x).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        if self.shape(x) == shape {
            return Ok(x);
        }
        let v = self.value(x).clone().reshaped(shape);
        Ok(self.push(v, Op::Reshape, &[x]))
    }

    pub fn leaky_relu(&mut self, x: Tensor, slope: f64) -> Tensor {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(slope), &[x])
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Tensor) -> Tensor {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu, &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Tensor) -> Result<Tensor> {
        let xv = self.value(x);
        let k = *xv.shape().last().ok_or_else(|| AutodiffError::InvalidArgument {
            op: "softmax",
            msg: "scalar input".into(),
        })?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let v = Array::new(xv.shape().to_vec(), out);
        Ok(self.push(v, Op::Softmax, &[x]))
    }

    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let v = Array::scalar(self.value(x).sum());
        self.push(v, Op::Sum, &[x])
    }

    /// Training-mode batch normalization over every axis except axis 1.
    /// Returns the output and the batch (mean, unbiased variance) per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 && shape.len() != 4 {
            return Err(AutodiffError::InvalidArgument {
                op: "batch-norm",
                msg: format!("expected [N, C] or [N, C, H, W], got {shape:?}"),
            });
        }
        let c = shape[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "batch-norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let n = shape[0];
        let inner: usize = shape[2..].iter().product();
        let count = n * inner;
        if count < 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "batch-norm",
                msg: "needs at least two values per channel".into(),
            });
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                let base = (b * c + ch) * inner;
                *m += xv[base..base + inner].iter().sum::<f64>();
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                var[ch] += xv[base..base + inner]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / count as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let unbiased: Vec<f64> = var.iter().map(|v| v / (count - 1) as f64).collect();
        let saved = Arc::new(BnSaved {
            xhat: Array::new(shape.clone(), xhat),
            inv_std,
        });
        let y = self.push(Array::new(shape, out), Op::BatchNorm(saved), &[x, gamma, beta]);
        Ok((y, mean, unbiased))
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub(crate) fn dropout_mask(&mut self, x: Tensor, mask: Array) -> Result<Tensor> {
        if mask.shape() != self.shape(x) {
            return Err(AutodiffError::ShapeMismatch {
                op: "dropout",
                lhs: self.shape(x).to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let v = self.value(x).zip_map(&mask, |a, m| a * m);
        Ok(self.push(v, Op::Dropout(Arc::new(mask)), &[x]))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross-entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(AutodiffError::InvalidArgument {
                op: "cross-entropy",
                msg: format!("label {bad} out of range for {k} classes"),
            });
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (row, &y) in lv.chunks(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let v = Array::scalar(total / labels.len() as f64);
        Ok(self.push(v, Op::CrossEntropy(Arc::new(labels.to_vec())), &[logits]))
    }

    /// Mean binary cross-entropy of probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, probs: Tensor, targets: &Array, eps: f64) -> Result<Tensor> {
        if self.shape(probs) != targets.shape() || targets.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "binary-cross-entropy",
                lhs: self.shape(probs).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let pv = self.value(probs).data();
        let total: f64 = pv
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let v = Array::scalar(total / targets.len() as f64);
        let op = Op::Bce {
            targets: Arc::new(targets.clone()),
            eps,
        };
        Ok(self.push(v, op, &[probs]))
    }

    // ---- differentiation -------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Tensor) -> Result<Gradients> {
        if !self.value(loss).shape().is_empty() {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let len = self.nodes.len();
        let grads = self.propagate(loss, None, false)?;
        let mut map = HashMap::new();
        for (i, (node, grad)) in self.nodes[..=loss.0].iter().zip(&grads).enumerate() {
            if node.requires_grad && node.inputs.is_empty() {
                let g = match grad {
                    Some(t) => self.nodes[t.0].value.clone(),
                    None => Array::zeros(node.value.shape()),
                };
                map.insert(i, g);
            }
        }
        self.nodes.truncate(len);
        Ok(Gradients { map })
    }

    /// Gradient of scalar `output` with respect to `wrt`, built from recorded
    /// operators so it can itself be differentiated.
    pub fn grad_as_graph(&mut self, output: Tensor, wrt: Tensor) -> Result<Tensor> {
        if !self.value(output).shape().is_empty() {
            return Err(AutodiffError::NonScalarLoss(self.shape(output).to_vec()));
        }
        if !self.requires_grad(wrt) {
            return Err(AutodiffError::InvalidArgument {
                op: "grad",
                msg: format!("node {} does not require grad", wrt.0),
            });
        }
        let grads = self.propagate(output, Some(wrt), true)?;
        Ok(match grads[wrt.0] {
            Some(t) => t,
            None => {
                let z = Array::zeros(self.shape(wrt));
                self.constant(z)
            }
        })
    }

    fn propagate(&mut self, output: Tensor, wrt: Option<Tensor>, create_graph: bool) -> Result<Vec<Option<Tensor>>> {
        let n = output.0 + 1;
        // relevant: carries a gradient path to a differentiation target
        let mut relevant = vec![false; n];
        for i in 0..n {
            let node = &self.nodes[i];
            relevant[i] = match wrt {
                Some(w) => i == w.0 || (node.requires_grad && node.inputs.iter().any(|&j| relevant[j])),
                None => node.requires_grad,
            };
        }
        let mut needed = vec![false; n];
        needed[output.0] = relevant[output.0];
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            for &j in &self.nodes[i].inputs {
                if relevant[j] {
                    needed[j] = true;
                }
            }
            if create_graph && !self.nodes[i].inputs.is_empty() {
                let op = &self.nodes[i].op;
                if !op.double_differentiable() {
                    return Err(AutodiffError::NotDoubleDifferentiable(op.name()));
                }
            }
        }

        let prev = self.recording;
        self.recording = create_graph;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if needed[output.0] {
            let ones = Array::full(self.shape(output), 1.0);
            grads[output.0] = Some(self.constant(ones));
        }
        let result = (|| {
            for i in (0..n).rev() {
                if !needed[i] || self.nodes[i].inputs.is_empty() {
                    continue;
                }
                let Some(g) = grads[i] else { continue };
                let inputs = self.nodes[i].inputs.clone();
                let want: Vec<bool> = inputs.iter().map(|&j| needed[j]).collect();
                let input_grads = self.vjp(i, g, &want)?;
                for ((&j, gj), w) in inputs.iter().zip(input_grads).zip(want) {
                    if !w {
                        continue;
                    }
                    let Some(gj) = gj else { continue };
                    grads[j] = Some(match grads[j] {
                        None => gj,
                        Some(acc) => self.add_same(acc, gj)?,
                    });
                }
            }
            Ok(())
        })();
        self.recording = prev;
        result.map(|_| grads)
    }

    /// GELU derivative as graph ops so it can be differentiated again;
    /// tanh is written as `2·sigmoid(2u) − 1`.
    fn gelu_grad_graph(&mut self, x: Tensor) -> Result<Tensor> {
        let k = GELU_C;
        let x2 = self.mul_same(x, x)?;
        let x3 = self.mul_same(x2, x)?;
        let cubic = self.scale(x3, GELU_A);
        let inner = self.add_same(x, cubic)?;
        let u2 = self.scale(inner, 2.0 * k);
        let s = self.sigmoid(u2);
        let t = self.scale(s, 2.0);
        let t = self.add_scalar(t, -1.0);
        let first = self.add_scalar(t, 1.0);
        let first = self.scale(first, 0.5);
        let t2 = self.mul_same(t, t)?;
        let sech2 = self.scale(t2, -1.0);
        let sech2 = self.add_scalar(sech2, 1.0);
        let du = self.scale(x2, 3.0 * GELU_A * k);
        let du = self.add_scalar(du, k);
        let second = self.mul_same(x, sech2)?;
        let second = self.mul_same(second, du)?;
        let second = self.scale(second, 0.5);
        self.add_same(first, second)
    }

    fn vjp(&mut self, i: usize, g: Tensor, want: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let op = self.nodes[i].op.clone();
        let inputs: Vec<Tensor> = self.nodes[i].inputs.iter().map(|&j| Tensor(j)).collect();
        let out = Tensor(i);
        Ok(match op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![Some(g), Some(g)],
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = if want[0] { Some(self.mul_same(g, b)?) } else { None };
                let gb = if want[1] { Some(self.mul_same(g, a)?) } else { None };
                vec![ga, gb]
            }
            Op::Scale(c) => vec![Some(self.scale(g, c))],
            Op::AddScalar => vec![Some(g)],
            Op::Pow(p) => {
                if p == 0.0 {
                    vec![None]
                } else {
                    let x = inputs[0];
                    let d = if p == 1.0 { x } else { self.pow(x, p - 1.0) };
                    let d = self.scale(d, p);
                    vec![Some(self.mul_same(g, d)?)]
                }
            }
            Op::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = if !want[0] {
                    None
                } else if ta {
                    Some(self.matmul_t(b, g, tb, true)?)
                } else {
                    Some(self.matmul_t(g, b, false, !tb)?)
                };
                let gb = if !want[1] {
                    None
                } else if tb {
                    Some(self.matmul_t(g, a, true, ta)?)
                } else {
                    Some(self.matmul_t(a, g, !ta, false)?)
                };
                vec![ga, gb]
            }
            Op::Gather(map) => vec![Some(self.scatter(g, map)?)],
            Op::Scatter(map) => vec![Some(self.gather(g, map)?)],
            Op::Reshape => {
                let s = self.shape(inputs[0]).to_vec();
                vec![Some(self.reshape(g, &s)?)]
            }
            Op::LeakyRelu(slope) => {
                let mask = self.value(inputs[0]).map(|a| if a > 0.0 { 1.0 } else { slope });
                let m = self.constant(mask);
                vec![Some(self.mul_same(g, m)?)]
            }
            Op::Sigmoid => {
                let one_minus = self.scale(out, -1.0);
                let one_minus = self.add_scalar(one_minus, 1.0);
                let d = self.mul_same(out, one_minus)?;
                vec![Some(self.mul_same(g, d)?)]
            }
            Op::Softmax => {
                let gy = self.mul_same(g, out)?;
                let mut keep = self.shape(out).to_vec();
                *keep.last_mut().unwrap() = 1;
                let s = self.sum_to(gy, &keep)?;
                let centered = self.sub(g, s)?;
                vec![Some(self.mul_same(out, centered)?)]
            }
            Op::Sum => {
                let s = self.shape(inputs[0]).to_vec();
                vec![Some(self.broadcast_to(g, &s)?)]
            }
            Op::Gelu => {
                let d = if self.recording {
                    self.gelu_grad_graph(inputs[0])?
                } else {
                    let d = self.value(inputs[0]).map(gelu_grad);
                    self.constant(d)
                };
                vec![Some(self.mul_same(g, d)?)]
            }
            Op::Dropout(mask) => {
                let m = self.constant((*mask).clone());
                vec![Some(self.mul_same(g, m)?)]
            }
            Op::BatchNorm(saved) => {
                let gv = self.value(g).clone();
                let gamma = self.value(inputs[1]).data().to_vec();
                let (dx, dgamma, dbeta) = batch_norm_vjp(&gv, &saved, &gamma);
                vec![
                    Some(self.constant(dx)),
                    Some(self.constant(dgamma)),
                    Some(self.constant(dbeta)),
                ]
            }
            Op::CrossEntropy(labels) => {
                let gs = self.value(g).item();
                let lv = self.value(inputs[0]);
                let k = lv.shape()[1];
                let scale = gs / labels.len() as f64;
                let mut d = lv.data().to_vec();
                for (row, &y) in d.chunks_mut(k).zip(labels.iter()) {
                    softmax_in_place(row);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                let d = Array::new(lv.shape().to_vec(), d);
                vec![Some(self.constant(d))]
            }
            Op::Bce { targets, eps } => {
                let gs = self.value(g).item();
                let pv = self.value(inputs[0]);
                let m = targets.len() as f64;
                let d = pv.zip_map(&targets, |p, t| {
                    if p < eps || p > 1.0 - eps {
                        0.0
                    } else {
                        gs * (-t / p + (1.0 - t) / (1.0 - p)) / m
                    }
                });
                vec![Some(self.constant(d))]
            }
        })
    }
}

fn powf(a: f64, p: f64) -> f64 {
    if p == 1.0 {
        a
    } else if p == 2.0 {
        a * a
    } else if p == 3.0 {
        a * a * a
    } else if p == 0.5 {
        a.sqrt()
    } else if p == -0.5 {
        1.0 / a.sqrt()
    } else if p == -1.0 {
        1.0 / a
    } else if p == 0.0 {
        1.0
    } else {
        a.powf(p)
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn batch_norm_vjp(g: &Array, saved: &BnSaved, gamma: &[f64]) -> (Array, Array, Array) {
    let shape = g.shape();
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let count = (n * inner) as f64;
    let (gv, xh) = (g.data(), saved.xhat.data());
    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                dbeta[ch] += gv[i];
                dgamma[ch] += gv[i] * xh[i];
            }
        }
    }
    let mut dx = vec![0.0; gv.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            let k = gamma[ch] * saved.inv_std[ch] / count;
            for i in base..base + inner {
                dx[i] = k * (count * gv[i] - dbeta[ch] - xh[i] * dgamma[ch]);
            }
        }
    }
    (
        Array::new(shape.to_vec(), dx),
        Array::from_vec(dgamma),
        Array::from_vec(dbeta),
    )
}

#[allow(clippy::too_many_arguments)]
fn gemm_batched(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // (row stride, column stride) of op(A) and op(B) in their storage.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    for bi in 0..batch {
        let pa = &a[bi * m * k..(bi + 1) * m * k];
        let pb = &b[bi * k * n..(bi + 1) * k * n];
        let pc = &mut c[bi * m * n..(bi + 1) * m * n];
        // SAFETY: slices have exactly m*k, k*n and m*n elements and the
        // strides above address only within them.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                pa.as_ptr(),
                rsa,
                csa,
                pb.as_ptr(),
                rsb,
                csb,
                0.0,
                pc.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    c
}
