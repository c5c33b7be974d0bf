use std::sync::Arc;

use crate::kernels;
use crate::tensor::{branch_point, numel_of, Backward, Tensor};

struct SumToBack;
impl Backward for SumToBack {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.expand(i[0].shape()))]
    }
}

struct ExpandBack;
impl Backward for ExpandBack {
    fn name(&self) -> &'static str {
        "expand"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.sum_to(i[0].shape()))]
    }
}

struct ReshapeBack;
impl Backward for ReshapeBack {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.reshape(i[0].shape()))]
    }
}

struct ConcatBack {
    axis: usize,
}
impl Backward for ConcatBack {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, n: &[bool]) -> Vec<Option<Tensor>> {
        let mut start = 0;
        i.iter()
            .zip(n)
            .map(|(t, &need)| {
                let len = t.dim(self.axis);
                let piece = need.then(|| g.narrow(self.axis, start, len));
                start += len;
                piece
            })
            .collect()
    }
}

struct NarrowBack {
    axis: usize,
    start: usize,
}
impl Backward for NarrowBack {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.pad_axis(self.axis, self.start, i[0].dim(self.axis)))]
    }
}

struct PadAxisBack {
    axis: usize,
    start: usize,
}
impl Backward for PadAxisBack {
    fn name(&self) -> &'static str {
        "pad_axis"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.narrow(self.axis, self.start, i[0].dim(self.axis)))]
    }
}

struct GatherBack {
    index: Arc<Vec<usize>>,
}
impl Backward for GatherBack {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.scatter_add(self.index.clone(), i[0].shape()))]
    }
}

struct ScatterBack {
    index: Arc<Vec<usize>>,
}
impl Backward for ScatterBack {
    fn name(&self) -> &'static str {
        "scatter_add"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.gather(self.index.clone(), i[0].shape()))]
    }
}

/// (product of dims before `axis`, dim at `axis`, product of dims after).
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl Tensor {
    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let ok = kernels::broadcast_shapes(shape, self.shape()).is_some_and(|s| s == self.shape());
        assert!(ok, "cannot sum {:?} down to {:?}", self.shape(), shape);
        let data = kernels::sum_to(self.data(), self.shape(), shape);
        Tensor::from_op(data, shape.to_vec(), vec![self.clone()], SumToBack)
    }

    /// Broadcasts (copies) to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let ok = kernels::broadcast_shapes(self.shape(), shape).is_some_and(|s| s == shape);
        assert!(ok, "cannot expand {:?} to {:?}", self.shape(), shape);
        let data = kernels::expand(self.data(), self.shape(), shape);
        Tensor::from_op(data, shape.to_vec(), vec![self.clone()], ExpandBack)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel_of(shape),
            self.numel(),
            "reshape {:?} -> {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(self.to_vec(), shape.to_vec(), vec![self.clone()], ReshapeBack)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Tensor {
        self.sum().div(&Tensor::scalar(self.numel() as f64))
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    /// Mean over `axes`, keeping them as size-1 dims.
    pub fn mean_axes(&self, axes: &[usize]) -> Tensor {
        let count: usize = axes.iter().map(|&a| self.dim(a)).product();
        self.sum_axes(axes).div(&Tensor::scalar(count as f64))
    }

    /// Maximum along `axis`, keeping it as a size-1 dim. The first maximal
    /// element receives the gradient.
    pub fn max_axis(&self, axis: usize) -> Tensor {
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        assert!(len > 0, "max over empty axis");
        let x = self.data();
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..inner {
                let mut best = 0;
                for a in 1..len {
                    if x[(o * len + a) * inner + k] > x[(o * len + best) * inner + k] {
                        best = a;
                    }
                }
                arg[o * inner + k] = best;
            }
        }
        let arg = branch_point(arg);
        let index = (0..outer * inner)
            .map(|j| (j / inner * len + arg[j]) * inner + j % inner)
            .collect();
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        self.gather(Arc::new(index), &shape)
    }

    /// Joins tensors along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        for p in parts {
            assert_eq!(p.rank(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
                assert!(
                    d == axis || a == b,
                    "concat shape mismatch {:?} vs {:?}",
                    p.shape(),
                    first
                );
            }
        }
        let (outer, _, inner) = split_at_axis(first, axis);
        let total: usize = parts.iter().map(|p| p.dim(axis)).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.dim(axis) * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Tensor::from_op(data, shape, parts.to_vec(), ConcatBack { axis })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, dim, inner) = split_at_axis(self.shape(), axis);
        assert!(start + len <= dim, "narrow {start}+{len} beyond {dim}");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(data, shape, vec![self.clone()], NarrowBack { axis, start })
    }

    /// Embeds this tensor at offset `start` of a zero tensor whose `axis` has
    /// size `full` (adjoint of [`Tensor::narrow`]).
    pub fn pad_axis(&self, axis: usize, start: usize, full: usize) -> Tensor {
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        assert!(start + len <= full, "pad_axis {start}+{len} beyond {full}");
        let mut data = vec![0.0; outer * full * inner];
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data()[o * len * inner..(o + 1) * len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        Tensor::from_op(data, shape, vec![self.clone()], PadAxisBack { axis, start })
    }

    /// `out[i] = self.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Arc<Vec<usize>>, shape: &[usize]) -> Tensor {
        assert_eq!(index.len(), numel_of(shape));
        let x = self.data();
        let data = index.iter().map(|&j| x[j]).collect();
        Tensor::from_op(data, shape.to_vec(), vec![self.clone()], GatherBack { index })
    }

    /// `out.flat[index[i]] += self.flat[i]` into zeros of `shape`.
    pub fn scatter_add(&self, index: Arc<Vec<usize>>, shape: &[usize]) -> Tensor {
        assert_eq!(index.len(), self.numel());
        let mut data = vec![0.0; numel_of(shape)];
        for (&j, &v) in index.iter().zip(self.data()) {
            data[j] += v;
        }
        Tensor::from_op(data, shape.to_vec(), vec![self.clone()], ScatterBack { index })
    }

    /// 2-D max pooling over `[N,C,H,W]` with square window and no padding.
    pub fn max_pool2d(&self, kernel: usize, stride: usize) -> Tensor {
        assert_eq!(self.rank(), 4, "max_pool2d expects NCHW");
        let (n, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        assert!(h >= kernel && w >= kernel, "pool window larger than input");
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let x = self.data();
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let j = base + (oy * stride + ky) * w + ox * stride + kx;
                            if x[j] > x[best] {
                                best = j;
                            }
                        }
                    }
                    index.push(best);
                }
            }
        }
        let index = branch_point(index);
        self.gather(Arc::new(index), &[n, c, oh, ow])
    }
}
