//! Wasserstein adversarial loss, VGG19 perceptual loss and their combination.

mod adversarial;
mod perceptual;

use bag_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{BagError, Result};

pub use adversarial::{clip_weights, critic_loss, generator_adv_loss, Critic, CriticLoss, GP_NORM_EPS};
pub use perceptual::{perceptual_loss, ExtractorSource, FeatureExtractor, VGG19_CONV_LAYERS};

/// How the critic is kept (approximately) 1-Lipschitz.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lipschitz {
    GradientPenalty,
    /// Clamp critic weights to `[-clip_value, clip_value]` after each update.
    WeightClip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_content: f64,
    pub gp_weight: f64,
    /// 1-based index of the VGG19 convolution whose ReLU output is compared.
    pub perceptual_layer_index: usize,
    pub lipschitz: Lipschitz,
    pub clip_value: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_content: 100.0,
            gp_weight: 10.0,
            perceptual_layer_index: 7,
            lipschitz: Lipschitz::GradientPenalty,
            clip_value: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_content > 0.0 && self.lambda_content.is_finite()) {
            return Err(BagError::Config(format!(
                "lambda_content must be > 0, got {}",
                self.lambda_content
            )));
        }
        if !(self.gp_weight >= 0.0 && self.gp_weight.is_finite()) {
            return Err(BagError::Config(format!(
                "gp_weight must be >= 0, got {}",
                self.gp_weight
            )));
        }
        if !(1..=VGG19_CONV_LAYERS).contains(&self.perceptual_layer_index) {
            return Err(BagError::Config(format!(
                "perceptual_layer_index must be in 1..={VGG19_CONV_LAYERS}, got {}",
                self.perceptual_layer_index
            )));
        }
        if !(self.clip_value > 0.0 && self.clip_value.is_finite()) {
            return Err(BagError::Config(format!(
                "clip_value must be > 0, got {}",
                self.clip_value
            )));
        }
        Ok(())
    }
}

/// `adv + lambda_content * content`.
pub fn joint_loss(adv: &Tensor, content: &Tensor, cfg: &LossConfig) -> Tensor {
    adv.add(&content.scale(cfg.lambda_content))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn joint(adv: f64, content: f64, lambda: f64) -> f64 {
        let cfg = LossConfig {
            lambda_content: lambda,
            ..LossConfig::default()
        };
        joint_loss(&Tensor::scalar(adv), &Tensor::scalar(content), &cfg).item()
    }

    #[test]
    fn joint_examples() {
        assert_eq!(joint(1.0, 0.5, 100.0), 51.0);
        assert_eq!(joint(-2.5, 0.0, 100.0), -2.5);
        assert_eq!(joint(0.75, 123.0, 0.0), 0.75);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig {
                lambda_content: 0.0,
                ..Default::default()
            },
            LossConfig {
                gp_weight: -1.0,
                ..Default::default()
            },
            LossConfig {
                perceptual_layer_index: 0,
                ..Default::default()
            },
            LossConfig {
                perceptual_layer_index: 17,
                ..Default::default()
            },
            LossConfig {
                clip_value: 0.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(BagError::Config(_))));
        }
    }

    proptest! {
        #[test]
        fn joint_is_linear_in_each_argument(
            a in -1e3f64..1e3, b in -1e3f64..1e3, c in -10.0f64..10.0, d in -10.0f64..10.0, l in 0.0f64..200.0,
        ) {
            let tol = 1e-9 * (1.0 + a.abs() + b.abs() + l * (c.abs() + d.abs()));
            prop_assert!((joint(a + b, c, l) - joint(a, c, l) - (joint(b, c, l) - joint(0.0, c, l))).abs() < tol);
            prop_assert!((joint(a, c + d, l) - joint(a, c, l) - (joint(a, d, l) - joint(a, 0.0, l))).abs() < tol);
            prop_assert!((joint(a, c, l) - a - l * c).abs() < tol);
        }
    }
}
