use bag_autograd::{grad, Tensor};
use rand::Rng;

use crate::error::{BagError, Result};
use crate::networks::PatchCritic;
use crate::nn::ParamSet;

use super::{Lipschitz, LossConfig};

/// Offset inside the penalty's gradient norm, `sqrt(s + eps) - sqrt(eps)`,
/// which keeps the norm differentiable at a zero gradient. A power of two so
/// a zero gradient yields a norm of exactly zero.
pub const GP_NORM_EPS: f64 = 1.0 / (1u64 << 40) as f64;

/// Anything producing a per-sample score map `[N, 1, h, w]`.
pub trait Critic {
    fn score_map(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor>;
}

impl Critic for PatchCritic {
    fn score_map(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        self.forward(params, x)
    }
}

pub struct CriticLoss {
    /// Differentiable total, for the critic update.
    pub total: Tensor,
    /// `mean D(fake) - mean D(real)`.
    pub wasserstein: f64,
    /// Gradient-penalty term before weighting (0 under weight clipping).
    pub penalty: f64,
}

fn check_pair(real: &Tensor, fake: &Tensor) -> Result<()> {
    if real.shape() != fake.shape() || real.rank() != 4 {
        return Err(BagError::Structural(format!(
            "real {:?} and fake {:?} must be equal [N, C, H, W] batches",
            real.shape(),
            fake.shape()
        )));
    }
    Ok(())
}

/// Critic objective (lower is better for the critic). `fake` is detached, so
/// no gradient reaches the generator.
pub fn critic_loss<C: Critic, R: Rng>(
    critic: &C,
    params: &ParamSet,
    real: &Tensor,
    fake: &Tensor,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<CriticLoss> {
    check_pair(real, fake)?;
    let (real, fake) = (real.detach(), fake.detach());
    let w = critic
        .score_map(params, &fake)?
        .mean()
        .sub(&critic.score_map(params, &real)?.mean());
    let wasserstein = w.item();
    if !wasserstein.is_finite() {
        return Err(BagError::NumericalAbort(format!(
            "critic scores are not finite ({wasserstein})"
        )));
    }
    if cfg.lipschitz == Lipschitz::WeightClip || cfg.gp_weight == 0.0 {
        return Ok(CriticLoss {
            total: w,
            wasserstein,
            penalty: 0.0,
        });
    }
    let penalty = gradient_penalty(critic, params, &real, &fake, rng)?;
    let value = penalty.item();
    if !value.is_finite() {
        return Err(BagError::NumericalAbort(format!(
            "gradient penalty is not finite ({value})"
        )));
    }
    Ok(CriticLoss {
        total: w.add(&penalty.scale(cfg.gp_weight)),
        wasserstein,
        penalty: value,
    })
}

/// Mean over the batch of `(||grad_x mean D(x)|| - 1)^2` at random interpolates.
fn gradient_penalty<C: Critic, R: Rng>(
    critic: &C,
    params: &ParamSet,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let n = real.dim(0);
    let per_sample = real.numel() / n;
    let mut mixed = Vec::with_capacity(real.numel());
    for (r, f) in real.data().chunks(per_sample).zip(fake.data().chunks(per_sample)) {
        let eps: f64 = rng.random();
        mixed.extend(r.iter().zip(f).map(|(r, f)| eps * r + (1.0 - eps) * f));
    }
    let x_hat = Tensor::parameter(mixed, real.shape());
    // samples never interact, so the gradient of the summed per-sample means
    // holds each sample's own gradient
    let scores = critic.score_map(params, &x_hat)?.mean_axes(&[1, 2, 3]).sum();
    let g = grad(&scores, &[&x_hat], true)
        .remove(0)
        .unwrap_or_else(|| Tensor::zeros(real.shape()));
    let norm = g
        .square()
        .sum_axes(&[1, 2, 3])
        .add_scalar(GP_NORM_EPS)
        .sqrt()
        .add_scalar(-GP_NORM_EPS.sqrt());
    Ok(norm.add_scalar(-1.0).square().mean())
}

/// `-mean D(fake)`; `fake` stays attached to the generator.
pub fn generator_adv_loss<C: Critic>(critic: &C, params: &ParamSet, fake: &Tensor) -> Result<Tensor> {
    Ok(critic.score_map(params, fake)?.mean().neg())
}

/// Clamps every critic parameter into `[-c, c]`.
pub fn clip_weights(params: &mut ParamSet, c: f64) {
    let clipped: Vec<(String, Tensor)> = params
        .iter()
        .map(|(n, t)| {
            let data = t.data().iter().map(|v| v.clamp(-c, c)).collect();
            (n.to_string(), Tensor::parameter(data, t.shape()))
        })
        .collect();
    for (n, t) in clipped {
        params.insert(n, t);
    }
}
