use crate::kernels::{broadcast_shapes, zip_broadcast};
use crate::tensor::{branch_point, Backward, Tensor};

fn reduce_like(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        g.sum_to(target.shape())
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64, rule: impl Backward + 'static) -> Tensor {
    let out_shape = broadcast_shapes(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let data = zip_broadcast(a.data(), a.shape(), b.data(), b.shape(), &out_shape, f);
    Tensor::from_op(data, out_shape, vec![a.clone(), b.clone()], rule)
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64, rule: impl Backward + 'static) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], rule)
}

/// Piecewise-linear op: `classify` picks a branch per element, and branch
/// `b` maps `v` to `slopes[b] * v + offsets[b]`.
fn piecewise(
    x: &Tensor,
    name: &'static str,
    classify: impl Fn(f64) -> usize,
    slopes: [f64; 3],
    offsets: [f64; 3],
) -> Tensor {
    let branches = branch_point(x.data().iter().map(|&v| classify(v)).collect());
    let data = x
        .data()
        .iter()
        .zip(&branches)
        .map(|(&v, &b)| {
            if slopes[b] == 0.0 {
                offsets[b]
            } else {
                slopes[b] * v + offsets[b]
            }
        })
        .collect();
    let mask = Tensor::from_vec(branches.iter().map(|&b| slopes[b]).collect(), x.shape());
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], MaskBack { name, mask })
}

struct AddBack;
impl Backward for AddBack {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, n: &[bool]) -> Vec<Option<Tensor>> {
        vec![n[0].then(|| reduce_like(g, &i[0])), n[1].then(|| reduce_like(g, &i[1]))]
    }
}

struct SubBack;
impl Backward for SubBack {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, n: &[bool]) -> Vec<Option<Tensor>> {
        vec![
            n[0].then(|| reduce_like(g, &i[0])),
            n[1].then(|| reduce_like(&g.neg(), &i[1])),
        ]
    }
}

struct MulBack;
impl Backward for MulBack {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, n: &[bool]) -> Vec<Option<Tensor>> {
        vec![
            n[0].then(|| reduce_like(&g.mul(&i[1]), &i[0])),
            n[1].then(|| reduce_like(&g.mul(&i[0]), &i[1])),
        ]
    }
}

struct DivBack;
impl Backward for DivBack {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, i: &[Tensor], out: &Tensor, g: &Tensor, n: &[bool]) -> Vec<Option<Tensor>> {
        vec![
            n[0].then(|| reduce_like(&g.div(&i[1]), &i[0])),
            n[1].then(|| reduce_like(&g.mul(out).div(&i[1]).neg(), &i[1])),
        ]
    }
}

struct ScaleBack(f64);
impl Backward for ScaleBack {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.scale(self.0))]
    }
}

struct PassBack;
impl Backward for PassBack {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.clone())]
    }
}

struct ExpBack;
impl Backward for ExpBack {
    fn name(&self) -> &'static str {
        "exp"
    }
    fn backward(&self, _: &[Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(out))]
    }
}

struct LnBack;
impl Backward for LnBack {
    fn name(&self) -> &'static str {
        "ln"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.div(&i[0]))]
    }
}

struct PowBack(f64);
impl Backward for PowBack {
    fn name(&self) -> &'static str {
        "powf"
    }
    fn backward(&self, i: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(&i[0].powf(self.0 - 1.0)).scale(self.0))]
    }
}

struct TanhBack;
impl Backward for TanhBack {
    fn name(&self) -> &'static str {
        "tanh"
    }
    fn backward(&self, _: &[Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(&out.square().neg().add_scalar(1.0)))]
    }
}

struct SigmoidBack;
impl Backward for SigmoidBack {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[Tensor], out: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(out).mul(&out.neg().add_scalar(1.0)))]
    }
}

/// Piecewise-linear ops: the derivative is a constant mask fixed at the
/// branches chosen in the forward pass.
struct MaskBack {
    name: &'static str,
    mask: Tensor,
}
impl Backward for MaskBack {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, _: &[Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(g.mul(&self.mask))]
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary(self, other, |a, b| a + b, AddBack)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary(self, other, |a, b| a - b, SubBack)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary(self, other, |a, b| a * b, MulBack)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(self, other, |a, b| a / b, DivBack)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, |v| v * c, ScaleBack(c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, |v| v + c, PassBack)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, ExpBack)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, LnBack)
    }

    pub fn powf(&self, p: f64) -> Tensor {
        unary(self, |v| v.powf(p), PowBack(p))
    }

    pub fn sqrt(&self) -> Tensor {
        self.powf(0.5)
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, TanhBack)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid, SigmoidBack)
    }

    pub fn relu(&self) -> Tensor {
        piecewise(self, "relu", |v| (v > 0.0) as usize, [0.0, 1.0, 0.0], [0.0; 3])
    }

    pub fn leaky_relu(&self, negative_slope: f64) -> Tensor {
        piecewise(
            self,
            "leaky_relu",
            |v| (v > 0.0) as usize,
            [negative_slope, 1.0, 0.0],
            [0.0; 3],
        )
    }

    /// Clamps into `[lo, hi]`; the gradient passes where the input is inside
    /// the closed interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let classify = |v: f64| {
            if v < lo {
                0
            } else if v > hi {
                2
            } else {
                1
            }
        };
        piecewise(self, "clamp", classify, [0.0, 1.0, 0.0], [lo, 0.0, hi])
    }
}

/// Numerically stable logistic function, kept inside the open interval
/// (0, 1) by saturating at the nearest representable values.
pub(crate) fn sigmoid(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}
