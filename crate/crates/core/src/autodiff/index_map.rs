//! Linear index maps shared by the gather/scatter operator pair.
//!
//! Every map sends each output position to at most one input position.
//! Gathering reads through the map; scattering is its adjoint and
//! accumulates through it. Because the two are adjoint, each is the other's
//! vector-Jacobian product, which keeps every map-based op (broadcast,
//! reduction to a shape, im2col, upsampling, permutation, slicing, padding,
//! row lookup) differentiable to any order.

use std::sync::Arc;

use super::array::{numel, Array};

#[derive(Clone, Debug, PartialEq)]
pub enum IndexMap {
    /// Numpy-style broadcast of `from` (right-aligned) to `to`.
    Broadcast { from: Vec<usize>, to: Vec<usize> },
    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    Permute { from: Vec<usize>, perm: Vec<usize> },
    /// Contiguous window `[start, start + len)` along `axis`.
    Slice {
        from: Vec<usize>,
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Row lookup in a `[rows, row_len]` table.
    Rows {
        rows: usize,
        row_len: usize,
        indices: Arc<Vec<usize>>,
    },
    /// `[N, C, H, W]` to `[N, C*kh*kw, Ho*Wo]` patch columns, zero padded.
    Im2Col {
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    Upsample {
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        factor: usize,
    },
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

impl IndexMap {
    pub fn in_shape(&self) -> Vec<usize> {
        match self {
            IndexMap::Broadcast { from, .. } => from.clone(),
            IndexMap::Permute { from, .. } => from.clone(),
            IndexMap::Slice { from, .. } => from.clone(),
            IndexMap::Rows { rows, row_len, .. } => vec![*rows, *row_len],
            IndexMap::Im2Col { n, c, h, w, .. } => vec![*n, *c, *h, *w],
            IndexMap::Upsample { n, c, h, w, .. } => vec![*n, *c, *h, *w],
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        match self {
            IndexMap::Broadcast { to, .. } => to.clone(),
            IndexMap::Permute { from, perm } => perm.iter().map(|&p| from[p]).collect(),
            IndexMap::Slice { from, axis, len, .. } => {
                let mut s = from.clone();
                s[*axis] = *len;
                s
            }
            IndexMap::Rows { row_len, indices, .. } => vec![indices.len(), *row_len],
            IndexMap::Im2Col {
                n,
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
            } => {
                let ho = conv_out(*h, *kh, *stride, *pad);
                let wo = conv_out(*w, *kw, *stride, *pad);
                vec![*n, c * kh * kw, ho * wo]
            }
            IndexMap::Upsample { n, c, h, w, factor } => vec![*n, *c, h * factor, w * factor],
        }
    }

    /// Calls `f(out_index, in_index)` for every output position that has a
    /// source. Positions without a source (padding) are skipped.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        match self {
            IndexMap::Broadcast { from, to } => {
                let offset = to.len() - from.len();
                let in_strides = strides(from);
                // Stride 0 along broadcast axes.
                let eff: Vec<usize> = (0..to.len())
                    .map(|ax| {
                        if ax < offset || from[ax - offset] == 1 {
                            0
                        } else {
                            in_strides[ax - offset]
                        }
                    })
                    .collect();
                walk(to, &eff, &mut f);
            }
            IndexMap::Permute { from, perm } => {
                let in_strides = strides(from);
                let out: Vec<usize> = perm.iter().map(|&p| from[p]).collect();
                let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                walk(&out, &eff, &mut f);
            }
            IndexMap::Slice { from, axis, start, len } => {
                let in_strides = strides(from);
                let mut out = from.clone();
                out[*axis] = *len;
                let base = start * in_strides[*axis];
                walk(&out, &in_strides, &mut |o, i| f(o, i + base));
            }
            IndexMap::Rows { row_len, indices, .. } => {
                for (r, &src) in indices.iter().enumerate() {
                    for k in 0..*row_len {
                        f(r * row_len + k, src * row_len + k);
                    }
                }
            }
            &IndexMap::Im2Col {
                n,
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
            } => {
                let ho = conv_out(h, kh, stride, pad);
                let wo = conv_out(w, kw, stride, pad);
                let l = ho * wo;
                let k = c * kh * kw;
                for b in 0..n {
                    for ch in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let row = (ch * kh + ki) * kw + kj;
                                let out_base = (b * k + row) * l;
                                let in_base = (b * c + ch) * h * w;
                                for oy in 0..ho {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kj) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        f(out_base + oy * wo + ox, in_base + iy as usize * w + ix as usize);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            &IndexMap::Upsample { n, c, h, w, factor } => {
                let (oh, ow) = (h * factor, w * factor);
                for plane in 0..n * c {
                    for y in 0..oh {
                        for x in 0..ow {
                            f(
                                plane * oh * ow + y * ow + x,
                                plane * h * w + (y / factor) * w + x / factor,
                            );
                        }
                    }
                }
            }
        }
    }

    pub fn gather(&self, x: &Array) -> Array {
        debug_assert_eq!(x.shape(), self.in_shape().as_slice());
        let out_shape = self.out_shape();
        let mut out = vec![0.0; numel(&out_shape)];
        let src = x.data();
        self.for_each(|o, i| out[o] = src[i]);
        Array::new(out_shape, out)
    }

    pub fn scatter(&self, g: &Array) -> Array {
        debug_assert_eq!(g.shape(), self.out_shape().as_slice());
        let in_shape = self.in_shape();
        let mut acc = vec![0.0; numel(&in_shape)];
        let src = g.data();
        self.for_each(|o, i| acc[i] += src[o]);
        Array::new(in_shape, acc)
    }
}

/// Row-major walk over `shape` emitting (linear index, strided source index).
fn walk(shape: &[usize], eff: &[usize], f: &mut impl FnMut(usize, usize)) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let last = rank - 1;
    let (inner, inner_stride) = (shape[last], eff[last]);
    let mut o = 0;
    loop {
        let mut s = src;
        for _ in 0..inner {
            f(o, s);
            o += 1;
            s += inner_stride;
        }
        // carry into the outer axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            src += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            src -= eff[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_then_scatter_sums() {
        let m = IndexMap::Broadcast {
            from: vec![2, 1],
            to: vec![3, 2, 4],
        };
        let x = Array::new(vec![2, 1], vec![1.0, 2.0]);
        let y = m.gather(&x);
        assert_eq!(y.shape(), &[3, 2, 4]);
        assert_eq!(&y.data()[..8], &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let back = m.scatter(&Array::full(&[3, 2, 4], 1.0));
        assert_eq!(back.data(), &[12.0, 12.0]);
    }

    #[test]
    fn permute_transposes() {
        let m = IndexMap::Permute {
            from: vec![2, 3],
            perm: vec![1, 0],
        };
        let x = Array::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(m.gather(&x).data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn im2col_identity_kernel() {
        let m = IndexMap::Im2Col {
            n: 1,
            c: 1,
            h: 2,
            w: 2,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
        };
        let x = Array::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]);
        let y = m.gather(&x);
        assert_eq!(y.shape(), &[1, 1, 4]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn gather_scatter_adjoint() {
        // <gather(x), y> == <x, scatter(y)>
        let m = IndexMap::Im2Col {
            n: 2,
            c: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let inn = numel(&m.in_shape());
        let out = numel(&m.out_shape());
        let x = Array::new(m.in_shape(), (0..inn).map(|i| (i as f64 * 0.37).sin()).collect());
        let y = Array::new(m.out_shape(), (0..out).map(|i| (i as f64 * 0.11).cos()).collect());
        let lhs: f64 = m.gather(&x).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(m.scatter(&y).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
