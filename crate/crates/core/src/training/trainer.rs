use std::time::Instant;

use bag_autograd::{grad, no_grad, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{lr_schedule, TrainConfig};
use super::state::TrainState;
use crate::ablation::VariantSpec;
use crate::data::{random_crop_pair, PairSource};
use crate::error::{BagError, Result};
use crate::image::Image;
use crate::losses::{
    clip_weights, critic_loss, generator_adv_loss, joint_loss, perceptual_loss, FeatureExtractor, Lipschitz, LossConfig,
};
use crate::networks::{Generator, PatchCritic};
use crate::nn::{Fwd, ParamSet};

/// Offset between the generator and critic initialization seeds.
const CRITIC_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// One JSON line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Generator updates completed, including this one.
    pub step: usize,
    /// Epoch the step belongs to (0-based).
    pub epoch: usize,
    pub lr: f64,
    /// Mean critic objective over this step's critic updates; absent when
    /// training on the content loss alone.
    pub critic_loss: Option<f64>,
    pub adv_loss: f64,
    pub content_loss: f64,
    pub joint_loss: f64,
    pub wall_ms: f64,
}

impl LossRecord {
    /// The record without its timing, for reproducibility comparisons.
    pub fn losses(&self) -> (usize, usize, u64, Option<u64>, u64, u64, u64) {
        (
            self.step,
            self.epoch,
            self.lr.to_bits(),
            self.critic_loss.map(f64::to_bits),
            self.adv_loss.to_bits(),
            self.content_loss.to_bits(),
            self.joint_loss.to_bits(),
        )
    }
}

/// Outcome of one critic update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticUpdate {
    pub total: f64,
    pub wasserstein: f64,
    pub penalty: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorUpdate {
    pub adv: f64,
    pub content: f64,
    pub joint: f64,
}

/// Architectures, losses and hyperparameters shared by every step.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub loss: LossConfig,
    pub generator: Generator,
    pub critic: PatchCritic,
    pub extractor: FeatureExtractor,
}

fn gradients(total: &Tensor, params: &ParamSet) -> Vec<(String, Tensor)> {
    let names: Vec<&str> = params.names().collect();
    let leaves: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
    grad(total, &leaves, false)
        .into_iter()
        .zip(names.iter().zip(&leaves))
        .map(|(g, (n, t))| (n.to_string(), g.unwrap_or_else(|| Tensor::zeros(t.shape()))))
        .collect()
}

impl Trainer {
    pub fn new(variant: &VariantSpec, cfg: TrainConfig, loss: LossConfig, extractor: FeatureExtractor) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        if extractor.layer_index() != loss.perceptual_layer_index {
            return Err(BagError::Config(format!(
                "extractor ends at conv {} but the loss asks for conv {}",
                extractor.layer_index(),
                loss.perceptual_layer_index
            )));
        }
        let (generator, _, _) = Generator::init(variant, cfg.seed)?;
        let (critic, _) = PatchCritic::init(cfg.seed ^ CRITIC_SEED_OFFSET, cfg.critic_base_width);
        Ok(Self {
            cfg,
            loss,
            generator,
            critic,
            extractor,
        })
    }

    pub fn variant(&self) -> &VariantSpec {
        self.generator.spec()
    }

    /// Fresh parameters and optimizer state from `cfg.seed`.
    pub fn init_state(&self) -> Result<TrainState> {
        let (_, params, buffers) = Generator::init(self.variant(), self.cfg.seed)?;
        let (_, critic) = PatchCritic::init(self.cfg.seed ^ CRITIC_SEED_OFFSET, self.cfg.critic_base_width);
        Ok(TrainState::new(
            *self.variant(),
            (params, buffers),
            critic,
            (self.cfg.beta1, self.cfg.beta2),
            self.cfg.seed,
        ))
    }

    /// Checks that a loaded state fits this trainer's architecture.
    pub fn check_state(&self, state: &TrainState) -> Result<()> {
        if state.variant != *self.variant() {
            return Err(BagError::VariantMismatch {
                found: state.variant.label(),
                expected: self.variant().label(),
            });
        }
        let fresh = self.init_state()?;
        if !fresh.generator.same_layout(&state.generator) || !fresh.critic.same_layout(&state.critic) {
            return Err(BagError::CorruptCheckpoint(
                "parameter layout does not match the configured networks".into(),
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, source: &dyn PairSource) -> usize {
        source.len().div_ceil(self.cfg.batch_size)
    }

    /// Draws `batch_size` aligned crops: `(blurred, sharp)` as `[B, 3, S, S]`.
    fn draw_batch(&self, state: &mut TrainState, source: &dyn PairSource) -> Result<(Tensor, Tensor)> {
        if source.is_empty() {
            return Err(BagError::Data("training set is empty".into()));
        }
        let (mut blurred, mut sharp) = (Vec::new(), Vec::new());
        for _ in 0..self.cfg.batch_size {
            let i = state.sampler.next(source.len(), &mut state.rng);
            let crop = random_crop_pair(&source.load(i)?, self.cfg.crop_size, state.rng.random())?;
            blurred.push(crop.blurred);
            sharp.push(crop.sharp);
        }
        let stack = |v: &[Image]| Image::stack(&v.iter().collect::<Vec<_>>());
        Ok((stack(&blurred)?, stack(&sharp)?))
    }

    /// `critic_updates_per_gen` critic updates, each on a fresh batch and a
    /// fresh fake from the frozen generator.
    pub fn critic_phase(
        &self,
        state: &TrainState,
        source: &dyn PairSource,
        lr: f64,
    ) -> Result<(TrainState, Vec<CriticUpdate>)> {
        let mut s = state.clone();
        let mut updates = Vec::with_capacity(self.cfg.critic_updates_per_gen);
        for _ in 0..self.cfg.critic_updates_per_gen {
            let (blurred, sharp) = self.draw_batch(&mut s, source)?;
            let fake = no_grad(|| {
                let fx = Fwd::new(&s.generator, &s.gen_buffers, true);
                self.generator.forward(&fx, &blurred)
            })?
            .restored;
            let loss = critic_loss(&self.critic, &s.critic, &sharp, &fake, &self.loss, &mut s.rng)?;
            let total = loss.total.item();
            if !total.is_finite() {
                return Err(BagError::NumericalAbort(format!("critic loss is {total}")));
            }
            let grads = gradients(&loss.total, &s.critic);
            let (mut params, opt) = s.critic_opt.step(&s.critic, &grads, lr)?;
            if self.loss.lipschitz == Lipschitz::WeightClip {
                clip_weights(&mut params, self.loss.clip_value);
            }
            s.critic = params;
            s.critic_opt = opt;
            updates.push(CriticUpdate {
                total,
                wasserstein: loss.wasserstein,
                penalty: loss.penalty,
            });
        }
        Ok((s, updates))
    }

    /// One generator update on the joint (or content-only) objective.
    pub fn generator_phase(
        &self,
        state: &TrainState,
        source: &dyn PairSource,
        lr: f64,
    ) -> Result<(TrainState, GeneratorUpdate)> {
        let mut s = state.clone();
        let (blurred, sharp) = self.draw_batch(&mut s, source)?;
        let fx = Fwd::new(&s.generator, &s.gen_buffers, true);
        let out = self.generator.forward(&fx, &blurred)?;
        let content = perceptual_loss(&out.restored, &sharp, &self.extractor)?;
        let adv = if self.cfg.content_only {
            Tensor::scalar(0.0)
        } else {
            generator_adv_loss(&self.critic, &s.critic, &out.restored)?
        };
        let joint = joint_loss(&adv, &content, &self.loss);
        let update = GeneratorUpdate {
            adv: adv.item(),
            content: content.item(),
            joint: joint.item(),
        };
        if !update.joint.is_finite() {
            return Err(BagError::NumericalAbort(format!("generator loss is {update:?}")));
        }
        let grads = gradients(&joint, &s.generator);
        let buffers = fx.updated_buffers();
        let (params, opt) = s.gen_opt.step(&s.generator, &grads, lr)?;
        if !buffers.all_finite() {
            return Err(BagError::NumericalAbort(
                "normalization statistics became non-finite".into(),
            ));
        }
        s.generator = params;
        s.gen_opt = opt;
        s.gen_buffers = buffers;
        Ok((s, update))
    }

    /// Critic updates, then one generator update. On error the input state is
    /// left as it was.
    pub fn training_step(&self, state: &TrainState, source: &dyn PairSource) -> Result<(TrainState, LossRecord)> {
        let start = Instant::now();
        if state.epoch >= self.cfg.epochs {
            return Err(BagError::Config(format!(
                "training already finished {} epochs",
                self.cfg.epochs
            )));
        }
        let lr = lr_schedule(state.epoch, &self.cfg)?;
        let (s, critic) = if self.cfg.content_only {
            (state.clone(), None)
        } else {
            let (s, updates) = self.critic_phase(state, source, lr)?;
            let mean = updates.iter().map(|u| u.total).sum::<f64>() / updates.len() as f64;
            (s, Some(mean))
        };
        let (mut s, g) = self.generator_phase(&s, source, lr)?;
        let epoch = s.epoch;
        s.global_step += 1;
        if s.step_in_epoch == 0 {
            s.running = Default::default();
        }
        s.running.steps += 1;
        s.running.critic += critic.unwrap_or(0.0);
        s.running.adv += g.adv;
        s.running.content += g.content;
        s.running.joint += g.joint;
        s.step_in_epoch += 1;
        if s.step_in_epoch >= self.steps_per_epoch(source) {
            s.epoch += 1;
            s.step_in_epoch = 0;
        }
        let record = LossRecord {
            step: s.global_step,
            epoch,
            lr,
            critic_loss: critic,
            adv_loss: g.adv,
            content_loss: g.content,
            joint_loss: g.joint,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        Ok((s, record))
    }
}
