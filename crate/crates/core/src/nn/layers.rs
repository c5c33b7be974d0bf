use bag_autograd::{no_grad, Tensor};
use serde::{Deserialize, Serialize};

use super::{Fwd, ParamInit};
use crate::error::{BagError, Result};

/// Stabilizer added to variances before normalization.
pub const NORM_EPS: f64 = 1e-5;

const BN_MOMENTUM: f64 = 0.1;

/// Zero padding preserving spatial size for odd kernels at stride 1.
fn same_pad(kernel: usize) -> usize {
    kernel / 2
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut ParamInit,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = init.scaled_normal(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            fan_in,
            gain,
        );
        let bias = Some(init.constant(&format!("{name}.bias"), &[out_ch], 0.0));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// Stride-1 convolution with size-preserving zero padding.
    pub fn same(init: &mut ParamInit, name: &str, in_ch: usize, out_ch: usize, kernel: usize, gain: f64) -> Self {
        Self::new(init, name, in_ch, out_ch, kernel, 1, same_pad(kernel), gain)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }

    pub fn forward(&self, fx: &Fwd, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1) != self.in_ch {
            return Err(BagError::Structural(format!(
                "`{}` expects {} input channels, got shape {:?}",
                self.weight,
                self.in_ch,
                x.shape()
            )));
        }
        if x.dim(2) + 2 * self.pad < self.kernel || x.dim(3) + 2 * self.pad < self.kernel {
            return Err(BagError::Undersized(format!(
                "`{}` with {}x{} kernel cannot run on {:?}",
                self.weight,
                self.kernel,
                self.kernel,
                x.shape()
            )));
        }
        let y = x.conv2d(fx.param(&self.weight)?, self.stride, self.pad);
        match &self.bias {
            Some(b) => Ok(y.add(&fx.param(b)?.reshape(&[1, self.out_ch, 1, 1]))),
            None => Ok(y),
        }
    }
}

/// Transposed convolution; the weight is laid out `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: String,
    bias: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut ParamInit,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
        gain: f64,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel / (stride * stride);
        let weight = init.scaled_normal(
            &format!("{name}.weight"),
            &[in_ch, out_ch, kernel, kernel],
            fan_in.max(1),
            gain,
        );
        let bias = init.constant(&format!("{name}.bias"), &[out_ch], 0.0);
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            output_padding,
        }
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> &str {
        &self.bias
    }

    pub fn forward(&self, fx: &Fwd, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1) != self.in_ch {
            return Err(BagError::Structural(format!(
                "`{}` expects {} input channels, got shape {:?}",
                self.weight,
                self.in_ch,
                x.shape()
            )));
        }
        let y = x.conv_transpose2d(fx.param(&self.weight)?, self.stride, self.pad, self.output_padding);
        Ok(y.add(&fx.param(&self.bias)?.reshape(&[1, self.out_ch, 1, 1])))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-sample, per-channel statistics.
    Instance,
    /// Batch statistics while training, running averages at evaluation.
    Batch,
}

/// Normalization followed by a learned per-channel affine map.
#[derive(Clone, Debug)]
pub struct Norm {
    pub kind: NormKind,
    pub channels: usize,
    gamma: String,
    beta: String,
    running_mean: Option<String>,
    running_var: Option<String>,
}

/// `(x - mean) / sqrt(var + eps)` over the spatial axes of each sample and
/// channel (biased variance).
pub fn instance_normalize(x: &Tensor, eps: f64) -> Tensor {
    let mean = x.mean_axes(&[2, 3]);
    let centered = x.sub(&mean);
    let var = centered.square().mean_axes(&[2, 3]);
    centered.mul(&var.add_scalar(eps).powf(-0.5))
}

impl Norm {
    pub fn new(init: &mut ParamInit, name: &str, kind: NormKind, channels: usize) -> Self {
        let gamma = init.constant(&format!("{name}.gamma"), &[channels], 1.0);
        let beta = init.constant(&format!("{name}.beta"), &[channels], 0.0);
        let (running_mean, running_var) = match kind {
            NormKind::Instance => (None, None),
            NormKind::Batch => (
                Some(init.buffer(&format!("{name}.running_mean"), &[channels], 0.0)),
                Some(init.buffer(&format!("{name}.running_var"), &[channels], 1.0)),
            ),
        };
        Self {
            kind,
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward(&self, fx: &Fwd, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1) != self.channels {
            return Err(BagError::Structural(format!(
                "norm `{}` expects {} channels, got shape {:?}",
                self.gamma,
                self.channels,
                x.shape()
            )));
        }
        let normalized = match self.kind {
            NormKind::Instance => instance_normalize(x, NORM_EPS),
            NormKind::Batch => self.batch_normalize(fx, x)?,
        };
        let shape = [1, self.channels, 1, 1];
        Ok(normalized
            .mul(&fx.param(&self.gamma)?.reshape(&shape))
            .add(&fx.param(&self.beta)?.reshape(&shape)))
    }

    fn batch_normalize(&self, fx: &Fwd, x: &Tensor) -> Result<Tensor> {
        let (mean_name, var_name) = match (&self.running_mean, &self.running_var) {
            (Some(m), Some(v)) => (m, v),
            _ => unreachable!("batch norm always has running statistics"),
        };
        let shape = [1, self.channels, 1, 1];
        if !fx.training() {
            let mean = fx.buffer(mean_name)?.reshape(&shape);
            let var = fx.buffer(var_name)?.reshape(&shape);
            return Ok(x.sub(&mean).mul(&var.add_scalar(NORM_EPS).powf(-0.5)));
        }
        let mean = x.mean_axes(&[0, 2, 3]);
        let centered = x.sub(&mean);
        let var = centered.square().mean_axes(&[0, 2, 3]);
        let count = (x.dim(0) * x.dim(2) * x.dim(3)) as f64;
        no_grad(|| -> Result<()> {
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let blend = |old: &Tensor, new: &Tensor| {
                old.scale(1.0 - BN_MOMENTUM)
                    .add(&new.reshape(&[self.channels]).scale(BN_MOMENTUM))
            };
            fx.record_buffer(mean_name, blend(fx.buffer(mean_name)?, &mean.detach()));
            fx.record_buffer(var_name, blend(fx.buffer(var_name)?, &var.detach().scale(unbiased)));
            Ok(())
        })?;
        Ok(centered.mul(&var.add_scalar(NORM_EPS).powf(-0.5)))
    }
}
