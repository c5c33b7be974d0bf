use crate::kernels::{self, ConvGeom};
use crate::tensor::{Backward, Tensor};

#[derive(Clone, Copy)]
struct ConvArgs {
    stride: usize,
    pad: usize,
}

/// Geometry of `conv2d(x, w)` for input `x: [N,C,H,W]`, `w: [O,C,kh,kw]`.
fn geom(x_shape: &[usize], w_shape: &[usize], a: ConvArgs) -> ConvGeom {
    assert_eq!(x_shape.len(), 4, "conv input must be NCHW, got {x_shape:?}");
    assert_eq!(w_shape.len(), 4, "conv weight must be OCkk, got {w_shape:?}");
    assert_eq!(
        x_shape[1], w_shape[1],
        "conv channel mismatch: input {x_shape:?}, weight {w_shape:?}"
    );
    ConvGeom::new(
        x_shape[1], x_shape[2], x_shape[3], w_shape[2], w_shape[3], a.stride, a.pad,
    )
    .unwrap_or_else(|| panic!("conv window does not fit input {x_shape:?} (weight {w_shape:?})"))
}

struct Conv2dBack(ConvArgs);
impl Backward for Conv2dBack {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, n: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (&i[0], &i[1]);
        let a = self.0;
        vec![
            n[0].then(|| g.conv_transpose2d_to(w, a.stride, a.pad, (x.dim(2), x.dim(3)))),
            n[1].then(|| Tensor::conv2d_weight_grad(x, g, (w.dim(2), w.dim(3)), a.stride, a.pad)),
        ]
    }
}

struct ConvTransposeBack(ConvArgs);
impl Backward for ConvTransposeBack {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, n: &[bool]) -> Vec<Option<Tensor>> {
        // out = conv2d^T(x, w), so x plays the role of a conv output gradient
        // and g the role of a conv input.
        let (x, w) = (&i[0], &i[1]);
        let a = self.0;
        vec![
            n[0].then(|| g.conv2d(w, a.stride, a.pad)),
            n[1].then(|| Tensor::conv2d_weight_grad(g, x, (w.dim(2), w.dim(3)), a.stride, a.pad)),
        ]
    }
}

struct WeightGradBack(ConvArgs);
impl Backward for WeightGradBack {
    fn name(&self) -> &'static str {
        "conv2d_weight_grad"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, n: &[bool]) -> Vec<Option<Tensor>> {
        // out = sum_n gy (x) x_cols: bilinear in (x, gy).
        let (x, gy) = (&i[0], &i[1]);
        let a = self.0;
        vec![
            n[0].then(|| gy.conv_transpose2d_to(g, a.stride, a.pad, (x.dim(2), x.dim(3)))),
            n[1].then(|| x.conv2d(g, a.stride, a.pad)),
        ]
    }
}

impl Tensor {
    /// Cross-correlation of `[N,C,H,W]` with `[O,C,kh,kw]`, zero padding
    /// `pad` on every side. No bias.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let a = ConvArgs { stride, pad };
        let g = geom(self.shape(), weight.shape(), a);
        let out_ch = weight.dim(0);
        let data = kernels::conv2d(self.data(), self.dim(0), weight.data(), out_ch, &g);
        Tensor::from_op(
            data,
            vec![self.dim(0), out_ch, g.out_h, g.out_w],
            vec![self.clone(), weight.clone()],
            Conv2dBack(a),
        )
    }

    /// Transposed convolution of `[N,O,h,w]` with weight `[O,C,kh,kw]`
    /// (the layout of the forward convolution it inverts). Output size is
    /// `(h-1)*stride - 2*pad + k + output_padding`.
    pub fn conv_transpose2d(&self, weight: &Tensor, stride: usize, pad: usize, output_padding: usize) -> Tensor {
        assert!(
            output_padding < stride.max(1),
            "output_padding must be smaller than stride"
        );
        let size = |n: usize, k: usize| ((n - 1) * stride + k + output_padding).checked_sub(2 * pad);
        let h = size(self.dim(2), weight.dim(2)).expect("transposed conv output would be empty");
        let w = size(self.dim(3), weight.dim(3)).expect("transposed conv output would be empty");
        self.conv_transpose2d_to(weight, stride, pad, (h, w))
    }

    /// Transposed convolution producing exactly `out_hw`, which must be an
    /// input size of the forward convolution that yields this tensor's size.
    pub fn conv_transpose2d_to(&self, weight: &Tensor, stride: usize, pad: usize, out_hw: (usize, usize)) -> Tensor {
        assert_eq!(self.rank(), 4, "transposed conv input must be NCHW");
        assert_eq!(self.dim(1), weight.dim(0), "transposed conv channel mismatch");
        let a = ConvArgs { stride, pad };
        let in_ch = weight.dim(1);
        let g = geom(&[self.dim(0), in_ch, out_hw.0, out_hw.1], weight.shape(), a);
        assert_eq!(
            (g.out_h, g.out_w),
            (self.dim(2), self.dim(3)),
            "transposed conv target size {out_hw:?} inconsistent with input {:?}",
            self.shape()
        );
        let data = kernels::conv2d_input_grad(self.data(), self.dim(0), weight.data(), weight.dim(0), &g);
        Tensor::from_op(
            data,
            vec![self.dim(0), in_ch, out_hw.0, out_hw.1],
            vec![self.clone(), weight.clone()],
            ConvTransposeBack(a),
        )
    }

    /// Gradient of `conv2d(x, w)` with respect to `w` given the output
    /// gradient `gy`; differentiable in both arguments.
    pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, kernel: (usize, usize), stride: usize, pad: usize) -> Tensor {
        let a = ConvArgs { stride, pad };
        let w_shape = [gy.dim(1), x.dim(1), kernel.0, kernel.1];
        let g = geom(x.shape(), &w_shape, a);
        assert_eq!(
            (gy.dim(0), g.out_h, g.out_w),
            (x.dim(0), gy.dim(2), gy.dim(3)),
            "output gradient does not match conv geometry"
        );
        let data = kernels::conv2d_weight_grad(x.data(), x.dim(0), gy.data(), gy.dim(1), &g);
        Tensor::from_op(data, w_shape.to_vec(), vec![x.clone(), gy.clone()], WeightGradBack(a))
    }
}
