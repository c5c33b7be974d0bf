//! Central finite-difference checks of analytic gradients.
//!
//! Full Jacobian sweeps of real-sized layers are far too expensive, so both
//! checkers compare a seeded random sample of coordinates.
//!
//! The analytic gradient of a piecewise-smooth function (ReLU, clamp, max) is
//! the derivative of the smooth piece containing the base point. The stencil
//! evaluations therefore replay the base point's branch decisions, so a
//! stencil straddling a kink still differences that same piece. How many
//! stencils straddled a kink is reported in `kink_crossings`.

use bag_autograd::{grad, record_branches, replay_branches, BranchTape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{BagError, Result};
use crate::nn::ParamSet;

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Stencils whose natural branches differed from the base point's.
    pub kink_crossings: usize,
    /// `(label, analytic, numeric)` for the worst coordinate.
    pub worst: Option<(String, f64, f64)>,
}

impl FdReport {
    /// At least one coordinate compared and all within `tol`.
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err >= self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((label(), analytic, numeric));
        }
    }

    fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.kink_crossings += other.kink_crossings;
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Evaluates a scalar objective on the piece recorded in `tape`; returns the
/// value and whether the stencil point naturally lies on another piece.
fn on_piece(tape: &BranchTape, f: impl FnOnce() -> Result<Tensor>) -> Result<(f64, bool)> {
    let (out, stats) = replay_branches(tape, f);
    if stats.diverged {
        return Err(BagError::Structural(
            "evaluation changed its sequence of piecewise ops".into(),
        ));
    }
    Ok((scalar(&out?)?, stats.flips > 0))
}

fn scalar(t: &Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(BagError::Structural(format!(
            "gradient check needs a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

fn sample_indices(n: usize, samples: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if samples >= n {
        return (0..n).collect();
    }
    (0..samples).map(|_| rng.random_range(0..n)).collect()
}

/// Checks `d f / d x` at up to `samples` coordinates of `x`.
pub fn check_input_grad(
    x: &Tensor,
    f: impl Fn(&Tensor) -> Result<Tensor>,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<FdReport> {
    let leaf = Tensor::parameter(x.to_vec(), x.shape());
    let (out, tape) = record_branches(|| f(&leaf));
    let out = out?;
    scalar(&out)?;
    let g = grad(&out, &[&leaf], false)[0]
        .as_ref()
        .map(Tensor::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::default();
    for i in sample_indices(x.numel(), samples, &mut rng) {
        let eval = |delta: f64| {
            let mut d = x.to_vec();
            d[i] += delta;
            on_piece(&tape, || f(&Tensor::parameter(d, x.shape())))
        };
        let ((hi, kh), (lo, kl)) = (eval(step)?, eval(-step)?);
        report.kink_crossings += (kh || kl) as usize;
        report.record(|| format!("input[{i}]"), g[i], (hi - lo) / (2.0 * step));
    }
    Ok(report)
}

/// Checks `d f / d p` for every tensor in `params`, `per_tensor` sampled
/// coordinates each.
pub fn check_param_grads(
    params: &ParamSet,
    f: impl Fn(&ParamSet) -> Result<Tensor>,
    per_tensor: usize,
    step: f64,
    seed: u64,
) -> Result<FdReport> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    check_named_param_grads(params, &names, f, per_tensor, step, seed)
}

/// Like [`check_param_grads`], restricted to the listed tensors.
pub fn check_named_param_grads(
    params: &ParamSet,
    names: &[String],
    f: impl Fn(&ParamSet) -> Result<Tensor>,
    per_tensor: usize,
    step: f64,
    seed: u64,
) -> Result<FdReport> {
    let (out, tape) = record_branches(|| f(params));
    let out = out?;
    scalar(&out)?;
    let leaves: Vec<&Tensor> = names.iter().map(|n| params.require(n)).collect::<Result<_>>()?;
    let grads = grad(&out, &leaves, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::default();
    for ((name, leaf), g) in names.iter().zip(&leaves).zip(grads) {
        let g = g.map(|t| t.to_vec()).unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut sub = FdReport::default();
        for i in sample_indices(leaf.numel(), per_tensor, &mut rng) {
            let eval = |delta: f64| {
                let mut d = leaf.to_vec();
                d[i] += delta;
                let mut perturbed = params.clone();
                perturbed.insert(name.clone(), Tensor::parameter(d, leaf.shape()));
                on_piece(&tape, || f(&perturbed))
            };
            let ((hi, kh), (lo, kl)) = (eval(step)?, eval(-step)?);
            sub.kink_crossings += (kh || kl) as usize;
            sub.record(|| format!("{name}[{i}]"), g[i], (hi - lo) / (2.0 * step));
        }
        report.merge(sub);
    }
    Ok(report)
}
