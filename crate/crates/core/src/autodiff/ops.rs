//! Operators composed from the graph primitives.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::Array;
use super::graph::{Graph, Result, Tensor};
use super::index_map::IndexMap;
use super::AutodiffError;

/// Right-aligned numpy broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl Graph {
    pub fn broadcast_to(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        let from = self.shape(x).to_vec();
        if from == shape {
            return Ok(x);
        }
        if broadcast_shapes(&from, shape).as_deref() != Some(shape) {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast",
                lhs: from,
                rhs: shape.to_vec(),
            });
        }
        let map = IndexMap::Broadcast {
            from,
            to: shape.to_vec(),
        };
        self.gather(x, Arc::new(map))
    }

    /// Sums `x` down to `shape`, the adjoint of [`Graph::broadcast_to`].
    pub fn sum_to(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        let to = self.shape(x).to_vec();
        if to == shape {
            return Ok(x);
        }
        if broadcast_shapes(shape, &to).as_deref() != Some(to.as_slice()) {
            return Err(AutodiffError::ShapeMismatch {
                op: "sum",
                lhs: to,
                rhs: shape.to_vec(),
            });
        }
        let map = IndexMap::Broadcast {
            from: shape.to_vec(),
            to,
        };
        self.scatter(x, Arc::new(map))
    }

    fn broadcast_pair(&mut self, op: &'static str, a: Tensor, b: Tensor) -> Result<(Tensor, Tensor)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            return Ok((a, b));
        }
        let s = broadcast_shapes(&sa, &sb).ok_or(AutodiffError::ShapeMismatch { op, lhs: sa, rhs: sb })?;
        Ok((self.broadcast_to(a, &s)?, self.broadcast_to(b, &s)?))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (a, b) = self.broadcast_pair("add", a, b)?;
        self.add_same(a, b)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (a, b) = self.broadcast_pair("mul", a, b)?;
        self.mul_same(a, b)
    }

    /// Multiplies every channel of `[N, C, H, W]` by a `[N, 1, H, W]` map.
    pub fn channel_mul(&mut self, x: Tensor, channel: Tensor) -> Result<Tensor> {
        let (sx, sc) = (self.shape(x), self.shape(channel));
        if sx.len() != 4 || sc.len() != 4 || sc[1] != 1 || sx[0] != sc[0] || sx[2..] != sc[2..] {
            return Err(AutodiffError::ShapeMismatch {
                op: "channel-wise-mul",
                lhs: sx.to_vec(),
                rhs: sc.to_vec(),
            });
        }
        self.mul(x, channel)
    }

    pub fn sqrt(&mut self, x: Tensor) -> Tensor {
        self.pow(x, 0.5)
    }

    pub fn mean(&mut self, x: Tensor) -> Tensor {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn permute(&mut self, x: Tensor, perm: &[usize]) -> Result<Tensor> {
        let from = self.shape(x).to_vec();
        let mut seen = vec![false; from.len()];
        if perm.len() != from.len()
            || perm
                .iter()
                .any(|&p| p >= from.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(AutodiffError::InvalidArgument {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of {} axes", from.len()),
            });
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(x);
        }
        let map = IndexMap::Permute {
            from,
            perm: perm.to_vec(),
        };
        self.gather(x, Arc::new(map))
    }

    pub fn slice(&mut self, x: Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let from = self.shape(x).to_vec();
        if axis >= from.len() || start + len > from[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("[{start}, {}) on axis {axis} of {from:?}", start + len),
            });
        }
        let map = IndexMap::Slice { from, axis, start, len };
        self.gather(x, Arc::new(map))
    }

    /// Places `x` at offset `start` along `axis` of a zero tensor of `shape`.
    fn pad_into(&mut self, x: Tensor, shape: &[usize], axis: usize, start: usize) -> Result<Tensor> {
        let len = self.shape(x)[axis];
        let map = IndexMap::Slice {
            from: shape.to_vec(),
            axis,
            start,
            len,
        };
        self.scatter(x, Arc::new(map))
    }

    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = self
            .shape(*parts.first().ok_or(AutodiffError::InvalidArgument {
                op: "concat",
                msg: "no inputs".into(),
            })?)
            .to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let mut offset = 0;
        let mut acc: Option<Tensor> = None;
        for &p in parts {
            let len = self.shape(p)[axis];
            let padded = self.pad_into(p, &out_shape, axis, offset)?;
            offset += len;
            acc = Some(match acc {
                None => padded,
                Some(a) => self.add_same(a, padded)?,
            });
        }
        Ok(acc.unwrap())
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.matmul_t(a, b, false, false)
    }

    /// `x[N, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Option<Tensor>) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// 2-D convolution of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]` weights.
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let map = IndexMap::Im2Col {
            n,
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
        };
        let out_hw = map.out_shape()[2];
        let ho = super::index_map::conv_out(h, kh, stride, pad);
        let wo = out_hw / ho;
        let cols = self.gather(x, Arc::new(map))?;
        let k = c * kh * kw;
        let w2 = self.reshape(w, &[cout, k])?;
        let wb = self.broadcast_to(w2, &[n, cout, k])?;
        let y = self.matmul(wb, cols)?;
        let y = self.reshape(y, &[n, cout, ho, wo])?;
        match bias {
            Some(b) => {
                if self.shape(b) != [cout] {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "conv2d",
                        lhs: vec![cout],
                        rhs: self.shape(b).to_vec(),
                    });
                }
                let b4 = self.reshape(b, &[1, cout, 1, 1])?;
                self.add(y, b4)
            }
            None => Ok(y),
        }
    }

    pub fn upsample_nearest(&mut self, x: Tensor, factor: usize) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "nearest-upsample",
                msg: format!("expected [N, C, H, W] and factor >= 1, got {s:?} x{factor}"),
            });
        }
        let map = IndexMap::Upsample {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            factor,
        };
        self.gather(x, Arc::new(map))
    }

    /// Looks up rows of a `[rows, dim]` table.
    pub fn embedding(&mut self, table: Tensor, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "embedding-lookup",
                msg: format!("table must be 2-D, got {s:?}"),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(AutodiffError::InvalidArgument {
                op: "embedding-lookup",
                msg: format!("id {bad} out of range for {} rows", s[0]),
            });
        }
        let map = IndexMap::Rows {
            rows: s[0],
            row_len: s[1],
            indices: Arc::new(ids.to_vec()),
        };
        self.gather(table, Arc::new(map))
    }

    /// Layer normalization over the trailing `norm_dims` axes, then an affine
    /// map with `gamma`/`beta` broadcast against those axes.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, norm_dims: usize, eps: f64) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        if norm_dims == 0 || norm_dims > s.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "layer-norm",
                msg: format!("cannot normalize {norm_dims} axes of {s:?}"),
            });
        }
        let lead = s.len() - norm_dims;
        let count: usize = s[lead..].iter().product();
        let mut reduced = s.clone();
        reduced[lead..].iter_mut().for_each(|d| *d = 1);
        let total = self.sum_to(x, &reduced)?;
        let mean = self.scale(total, 1.0 / count as f64);
        let centered = self.sub(x, mean)?;
        let sq = self.mul_same(centered, centered)?;
        let var = self.sum_to(sq, &reduced)?;
        let var = self.scale(var, 1.0 / count as f64);
        let var = self.add_scalar(var, eps);
        let inv = self.pow(var, -0.5);
        let normed = self.mul(centered, inv)?;
        let y = self.mul(normed, gamma)?;
        self.add(y, beta)
    }

    /// Evaluation-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running_mean: &Array,
        running_var: &Array,
        eps: f64,
    ) -> Result<Tensor> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || running_mean.len() != s[1] || running_var.len() != s[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "batch-norm",
                lhs: s,
                rhs: running_mean.shape().to_vec(),
            });
        }
        let mut cshape = vec![1; s.len()];
        cshape[1] = s[1];
        let scale: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let shift: Vec<f64> = running_mean.data().iter().zip(&scale).map(|(m, k)| -m * k).collect();
        let k = self.constant(Array::new(cshape.clone(), scale));
        let sh = self.constant(Array::new(cshape.clone(), shift));
        let y = self.mul(x, k)?;
        let y = self.add(y, sh)?;
        let g = self.reshape(gamma, &cshape)?;
        let b = self.reshape(beta, &cshape)?;
        let y = self.mul(y, g)?;
        self.add(y, b)
    }

    /// Inverted dropout; the keep mask is a pure function of `seed`.
    pub fn dropout(&mut self, x: Tensor, p: f64, seed: u64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::InvalidArgument {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(x).to_vec();
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.dropout_mask(x, Array::new(shape, mask))
    }
}
