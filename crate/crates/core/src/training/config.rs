use serde::{Deserialize, Serialize};

use crate::error::{BagError, Result};

/// Epochs at which attention snapshots are taken by default.
pub const DEFAULT_SNAPSHOT_EPOCHS: [usize; 5] = [5, 50, 100, 150, 200];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// First epoch of the linear decay to zero.
    pub decay_start: usize,
    pub critic_updates_per_gen: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Side of the square training crops.
    pub crop_size: usize,
    /// Also snapshot every this many epochs (0 disables).
    pub snapshot_every: usize,
    pub snapshot_epochs: Vec<usize>,
    /// Save `last.safetensors` every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Stop after this many generator steps in total.
    pub max_steps: Option<usize>,
    /// Train the generator on the content loss alone (no critic).
    pub content_only: bool,
    pub critic_base_width: usize,
    /// Single-threaded, fixed-order data loading.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr0: 1e-4,
            decay_start: 150,
            critic_updates_per_gen: 5,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            crop_size: 256,
            snapshot_every: 0,
            snapshot_epochs: DEFAULT_SNAPSHOT_EPOCHS.to_vec(),
            checkpoint_every: 10,
            max_steps: None,
            content_only: false,
            critic_base_width: 64,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(BagError::Config(m));
        if self.decay_start == 0 || self.decay_start > self.epochs {
            return fail(format!(
                "need 0 < decay_start <= epochs (decay_start {}, epochs {})",
                self.decay_start, self.epochs
            ));
        }
        if self.critic_updates_per_gen == 0 {
            return fail("critic_updates_per_gen must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be finite and >= 0, got {}", self.lr0));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(4) {
            return fail(format!(
                "crop_size must be a positive multiple of 4, got {}",
                self.crop_size
            ));
        }
        if self.critic_base_width == 0 {
            return fail("critic_base_width must be at least 1".into());
        }
        Ok(())
    }

    /// Whether a snapshot is due once `epoch` epochs are complete.
    pub fn snapshot_due(&self, epoch: usize) -> bool {
        self.snapshot_epochs.contains(&epoch) || (self.snapshot_every > 0 && epoch.is_multiple_of(self.snapshot_every))
    }
}

/// Learning rate during `epoch`: constant `lr0` before `decay_start`, then
/// linear to zero at `epochs`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(BagError::Config(format!(
            "epoch {epoch} is past the last epoch {}",
            cfg.epochs
        )));
    }
    if epoch < cfg.decay_start {
        return Ok(cfg.lr0);
    }
    if epoch == cfg.epochs {
        return Ok(0.0);
    }
    Ok(cfg.lr0 * ((cfg.epochs - epoch) as f64 / (cfg.epochs - cfg.decay_start) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_checkpoints() {
        let cfg = TrainConfig::default();
        let lr = |e| lr_schedule(e, &cfg).unwrap();
        assert_eq!(lr(0), 1e-4);
        assert_eq!(lr(149), 1e-4);
        assert_eq!(lr(150), 1e-4);
        assert_eq!(lr(225), 5e-5);
        assert_eq!(lr(300), 0.0);
        assert!(lr_schedule(301, &cfg).is_err());
    }

    #[test]
    fn default_protocol() {
        let cfg = TrainConfig::default();
        assert_eq!(
            (
                cfg.epochs,
                cfg.lr0,
                cfg.critic_updates_per_gen,
                cfg.batch_size,
                cfg.crop_size
            ),
            (300, 1e-4, 5, 1, 256)
        );
        assert_eq!((cfg.beta1, cfg.beta2), (0.9, 0.999));
        cfg.validate().unwrap();
    }

    #[test]
    fn validation() {
        for bad in [
            TrainConfig {
                decay_start: 0,
                ..Default::default()
            },
            TrainConfig {
                decay_start: 301,
                ..Default::default()
            },
            TrainConfig {
                critic_updates_per_gen: 0,
                ..Default::default()
            },
            TrainConfig {
                crop_size: 70,
                ..Default::default()
            },
            TrainConfig {
                beta2: 1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(BagError::Config(_))));
        }
    }

    #[test]
    fn snapshot_epochs() {
        let cfg = TrainConfig {
            snapshot_every: 30,
            ..Default::default()
        };
        let due: Vec<usize> = (1..=210).filter(|&e| cfg.snapshot_due(e)).collect();
        assert_eq!(due, [5, 30, 50, 60, 90, 100, 120, 150, 180, 200, 210]);
    }

    proptest! {
        #[test]
        fn schedule_is_non_increasing_and_ends_at_zero(epochs in 1usize..500, frac in 0.0f64..1.0, lr0 in 1e-6f64..1.0) {
            let decay_start = ((epochs as f64 * frac) as usize).max(1);
            let cfg = TrainConfig { epochs, decay_start, lr0, ..Default::default() };
            let lrs: Vec<f64> = (0..=epochs).map(|e| lr_schedule(e, &cfg).unwrap()).collect();
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(lrs[epochs], 0.0);
            prop_assert_eq!(lrs[decay_start], lr0);
            if decay_start > 0 {
                prop_assert_eq!(lrs[decay_start - 1], lr0);
            }
        }
    }
}
