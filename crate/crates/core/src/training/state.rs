use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use crate::ablation::VariantSpec;
use crate::nn::ParamSet;

/// Cyclic sampler: each pass visits every pair once in a fresh random order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sampler {
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    pub fn next(&mut self, len: usize, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor >= self.order.len() || self.order.len() != len {
            self.order = (0..len).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Loss sums over the current (or just completed) epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningLosses {
    pub steps: usize,
    pub critic: f64,
    pub adv: f64,
    pub content: f64,
    pub joint: f64,
}

impl RunningLosses {
    /// `(critic, adv, content, joint)` epoch means so far.
    pub fn means(&self) -> Option<(f64, f64, f64, f64)> {
        let n = self.steps as f64;
        (self.steps > 0).then(|| (self.critic / n, self.adv / n, self.content / n, self.joint / n))
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub variant: VariantSpec,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed generator updates.
    pub global_step: usize,
    pub step_in_epoch: usize,
    pub generator: ParamSet,
    pub gen_buffers: ParamSet,
    pub critic: ParamSet,
    pub gen_opt: Adam,
    pub critic_opt: Adam,
    pub running: RunningLosses,
    pub rng: ChaCha8Rng,
    pub sampler: Sampler,
}

impl TrainState {
    pub fn new(
        variant: VariantSpec,
        generator: (ParamSet, ParamSet),
        critic: ParamSet,
        betas: (f64, f64),
        seed: u64,
    ) -> Self {
        let (params, buffers) = generator;
        Self {
            variant,
            epoch: 0,
            global_step: 0,
            step_in_epoch: 0,
            gen_opt: Adam::new(&params, betas.0, betas.1),
            critic_opt: Adam::new(&critic, betas.0, betas.1),
            generator: params,
            gen_buffers: buffers,
            critic,
            running: RunningLosses::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            sampler: Sampler::default(),
        }
    }

    /// Bitwise equality of every parameter, buffer, moment and counter.
    pub fn bitwise_eq(&self, other: &TrainState) -> bool {
        self.variant == other.variant
            && (self.epoch, self.global_step, self.step_in_epoch)
                == (other.epoch, other.global_step, other.step_in_epoch)
            && self.generator.bitwise_eq(&other.generator)
            && self.gen_buffers.bitwise_eq(&other.gen_buffers)
            && self.critic.bitwise_eq(&other.critic)
            && self.gen_opt.t == other.gen_opt.t
            && self.gen_opt.m.bitwise_eq(&other.gen_opt.m)
            && self.gen_opt.v.bitwise_eq(&other.gen_opt.v)
            && self.critic_opt.t == other.critic_opt.t
            && self.critic_opt.m.bitwise_eq(&other.critic_opt.m)
            && self.critic_opt.v.bitwise_eq(&other.critic_opt.v)
            && self.running == other.running
            && self.rng == other.rng
            && self.sampler == other.sampler
    }
}
