use bag_autograd::Tensor;

use crate::error::{BagError, Result};
use crate::nn::ParamSet;

/// Adam moments for one parameter set.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: ADAM_EPS,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Returns the updated parameters and moments. Nothing is returned (and
    /// `self` is untouched) if any gradient or resulting value is non-finite.
    pub fn step(&self, params: &ParamSet, grads: &[(String, Tensor)], lr: f64) -> Result<(ParamSet, Adam)> {
        let mut next = self.clone();
        next.t += 1;
        let t = next.t as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let mut out = params.clone();
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(BagError::NumericalAbort(format!("non-finite gradient for {name}")));
            }
            let p = params.require(name)?;
            let (m0, v0) = (self.m.require(name)?, self.v.require(name)?);
            let n = p.numel();
            let (mut m, mut v, mut w) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
            for i in 0..n {
                let gi = g.data()[i];
                let mi = self.beta1 * m0.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v0.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.push(mi);
                v.push(vi);
                w.push(p.data()[i] - lr * (mi / c1) / ((vi / c2).sqrt() + self.eps));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(BagError::NumericalAbort(format!("update would make {name} non-finite")));
            }
            next.m.insert(name.clone(), Tensor::from_vec(m, p.shape()));
            next.v.insert(name.clone(), Tensor::from_vec(v, p.shape()));
            out.insert(name.clone(), Tensor::parameter(w, p.shape()));
        }
        Ok((out, next))
    }
}
