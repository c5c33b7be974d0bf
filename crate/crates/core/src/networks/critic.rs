use bag_autograd::Tensor;

use crate::error::{BagError, Result};
use crate::nn::{leaky_relu_gain, Conv2d, Fwd, Norm, NormKind, ParamInit, ParamSet};

/// Smallest input side the critic accepts (its receptive field).
pub const CRITIC_MIN_SIZE: usize = 70;
/// Width of the first critic layer; later layers double it.
pub const CRITIC_BASE_WIDTH: usize = 64;

const SLOPE: f64 = 0.2;
const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];

/// Side length of the score map for an input side of `n`.
pub fn critic_output_size(n: usize) -> Option<usize> {
    STRIDES
        .iter()
        .try_fold(n, |size, &s| (size + 2).checked_sub(4).map(|v| v / s + 1))
}

/// 70x70 PatchGAN critic: every output element scores one input patch. No
/// layer mixes samples of a batch.
#[derive(Clone, Debug)]
pub struct PatchCritic {
    layers: Vec<(Conv2d, Option<Norm>)>,
    out: Conv2d,
}

impl PatchCritic {
    pub fn new(init: &mut ParamInit, base_width: usize) -> Self {
        let widths = [base_width, 2 * base_width, 4 * base_width, 8 * base_width];
        let gain = leaky_relu_gain(SLOPE);
        let mut cin = 3;
        let layers = widths
            .iter()
            .zip(STRIDES)
            .enumerate()
            .map(|(k, (&cout, stride))| {
                let conv = Conv2d::new(init, &format!("d{k}.conv"), cin, cout, 4, stride, 1, gain);
                let norm = (k > 0).then(|| Norm::new(init, &format!("d{k}.norm"), NormKind::Instance, cout));
                cin = cout;
                (conv, norm)
            })
            .collect();
        let out = Conv2d::new(init, "out.conv", cin, 1, 4, 1, 1, 1.0);
        Self { layers, out }
    }

    pub fn init(seed: u64, base_width: usize) -> (Self, ParamSet) {
        let mut init = ParamInit::new(seed);
        let critic = Self::new(&mut init, base_width);
        (critic, init.finish().0)
    }

    /// Score map `[N, 1, h, w]`.
    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1) != 3 {
            return Err(BagError::Structural(format!(
                "critic expects [N, 3, H, W], got {:?}",
                x.shape()
            )));
        }
        if x.dim(2) < CRITIC_MIN_SIZE || x.dim(3) < CRITIC_MIN_SIZE {
            return Err(BagError::Undersized(format!(
                "critic input {}x{} is below {CRITIC_MIN_SIZE}x{CRITIC_MIN_SIZE}",
                x.dim(2),
                x.dim(3)
            )));
        }
        let buffers = ParamSet::new();
        let fx = Fwd::eval(params, &buffers);
        let mut h = x.clone();
        for (conv, norm) in &self.layers {
            h = conv.forward(&fx, &h)?;
            if let Some(norm) = norm {
                h = norm.forward(&fx, &h)?;
            }
            h = h.leaky_relu(SLOPE);
        }
        self.out.forward(&fx, &h)
    }

    /// Mean of the score map, per sample: `[N]`.
    pub fn mean_score(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let s = self.forward(params, x)?;
        let n = s.dim(0);
        Ok(s.mean_axes(&[1, 2, 3]).reshape(&[n]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_arithmetic() {
        assert_eq!(critic_output_size(256), Some(30));
        assert_eq!(critic_output_size(70), Some(6));
        assert_eq!(critic_output_size(72), Some(7));
        assert_eq!(critic_output_size(1), None);
    }

    #[test]
    fn score_map_shape_and_rejection() {
        let (critic, params) = PatchCritic::init(0, 4);
        let s = critic.forward(&params, &Tensor::zeros(&[2, 3, 72, 80])).unwrap();
        assert_eq!(
            s.shape(),
            &[2, 1, critic_output_size(72).unwrap(), critic_output_size(80).unwrap()]
        );
        let err = critic.forward(&params, &Tensor::zeros(&[1, 3, 69, 80])).unwrap_err();
        assert!(matches!(err, BagError::Undersized(_)));
    }

    #[test]
    fn zero_weights_give_zero_scores() {
        let (critic, params) = PatchCritic::init(0, 4);
        let zeros = params.zeros_like();
        let x = Tensor::full(&[1, 3, 70, 70], 0.3);
        let s = critic.forward(&zeros, &x).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn samples_do_not_interact() {
        let (critic, params) = PatchCritic::init(1, 4);
        let a = Tensor::full(&[1, 3, 70, 70], 0.2).add(&Tensor::from_vec(
            (0..70).map(|v| v as f64 / 70.0).collect(),
            &[1, 1, 1, 70],
        ));
        let b = Tensor::full(&[1, 3, 70, 70], -0.5);
        let both = Tensor::concat(&[a.clone(), b], 0);
        let sa = critic.forward(&params, &a).unwrap();
        let sb = critic.forward(&params, &both).unwrap();
        assert_eq!(&sb.data()[..sa.numel()], sa.data());
    }
}
