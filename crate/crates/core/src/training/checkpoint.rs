use std::collections::HashMap;
use std::path::Path;

use bag_autograd::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::state::{RunningLosses, Sampler, TrainState};
use crate::ablation::VariantSpec;
use crate::archive;
use crate::error::{BagError, Result};
use crate::nn::ParamSet;

pub const CHECKPOINT_FORMAT: &str = "bag-checkpoint/1";

const KEY_FORMAT: &str = "format";
const KEY_VARIANT: &str = "variant";
const KEY_STATE: &str = "state";

/// Array-name prefixes of the parameter groups.
const GEN: &str = "gen/";
const GEN_BUF: &str = "gen_buf/";
const CRITIC: &str = "critic/";
const GEN_M: &str = "gen_adam_m/";
const GEN_V: &str = "gen_adam_v/";
const CRITIC_M: &str = "critic_adam_m/";
const CRITIC_V: &str = "critic_adam_v/";

#[derive(Serialize, Deserialize)]
struct Counters {
    epoch: usize,
    global_step: usize,
    step_in_epoch: usize,
    gen_t: u64,
    critic_t: u64,
    betas: (f64, f64),
    running: RunningLosses,
    rng: ChaCha8Rng,
    sampler: Sampler,
}

fn prefixed<'a>(prefix: &'a str, set: &'a ParamSet) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    set.iter().map(move |(n, t)| (format!("{prefix}{n}"), t))
}

fn write(path: &Path, variant: &VariantSpec, groups: &[(&str, &ParamSet)], state: Option<String>) -> Result<()> {
    let named: Vec<(String, &Tensor)> = groups.iter().flat_map(|(p, s)| prefixed(p, s)).collect();
    let mut meta = HashMap::from([
        (KEY_FORMAT.to_string(), CHECKPOINT_FORMAT.to_string()),
        (KEY_VARIANT.to_string(), serde_json::to_string(variant)?),
    ]);
    if let Some(state) = state {
        meta.insert(KEY_STATE.to_string(), state);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| BagError::io(dir, e))?;
    }
    archive::write(path, named.iter().map(|(n, t)| (n.as_str(), *t)), meta)
}

/// Saves the full training state.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let counters = Counters {
        epoch: state.epoch,
        global_step: state.global_step,
        step_in_epoch: state.step_in_epoch,
        gen_t: state.gen_opt.t,
        critic_t: state.critic_opt.t,
        betas: (state.gen_opt.beta1, state.gen_opt.beta2),
        running: state.running.clone(),
        rng: state.rng.clone(),
        sampler: state.sampler.clone(),
    };
    let groups = [
        (GEN, &state.generator),
        (GEN_BUF, &state.gen_buffers),
        (CRITIC, &state.critic),
        (GEN_M, &state.gen_opt.m),
        (GEN_V, &state.gen_opt.v),
        (CRITIC_M, &state.critic_opt.m),
        (CRITIC_V, &state.critic_opt.v),
    ];
    write(path, &state.variant, &groups, Some(serde_json::to_string(&counters)?))
}

/// Saves generator weights only (enough for inference and evaluation).
pub fn save_generator(path: &Path, variant: &VariantSpec, params: &ParamSet, buffers: &ParamSet) -> Result<()> {
    write(path, variant, &[(GEN, params), (GEN_BUF, buffers)], None)
}

struct Loaded {
    variant: VariantSpec,
    archive: archive::Archive,
}

fn open(path: &Path, expected: Option<&VariantSpec>) -> Result<Loaded> {
    let archive = archive::read(path)?;
    let format = archive
        .metadata
        .get(KEY_FORMAT)
        .cloned()
        .unwrap_or_else(|| "(none)".into());
    if format != CHECKPOINT_FORMAT {
        return Err(BagError::CheckpointVersion {
            found: format,
            expected: CHECKPOINT_FORMAT.into(),
        });
    }
    let variant: VariantSpec = archive
        .metadata
        .get(KEY_VARIANT)
        .ok_or_else(|| BagError::CorruptCheckpoint(format!("{}: no variant record", path.display())))
        .and_then(|v| {
            serde_json::from_str(v)
                .map_err(|e| BagError::CorruptCheckpoint(format!("{}: variant: {e}", path.display())))
        })?;
    if let Some(expected) = expected {
        if variant != *expected {
            return Err(BagError::VariantMismatch {
                found: variant.label(),
                expected: expected.label(),
            });
        }
    }
    Ok(Loaded { variant, archive })
}

fn group(archive: &archive::Archive, prefix: &str, trainable: bool) -> ParamSet {
    let mut set = ParamSet::new();
    for (name, t) in &archive.tensors {
        if let Some(rest) = name.strip_prefix(prefix) {
            let t = if trainable {
                Tensor::parameter(t.to_vec(), t.shape())
            } else {
                t.clone()
            };
            set.insert(rest, t);
        }
    }
    set
}

/// Loads a full training state; with `expected`, a different variant is an
/// error.
pub fn load_checkpoint(path: &Path, expected: Option<&VariantSpec>) -> Result<TrainState> {
    let Loaded { variant, archive } = open(path, expected)?;
    let counters: Counters = archive
        .metadata
        .get(KEY_STATE)
        .ok_or_else(|| {
            BagError::CorruptCheckpoint(format!(
                "{}: holds generator weights only, not a training state",
                path.display()
            ))
        })
        .and_then(|s| {
            serde_json::from_str(s).map_err(|e| BagError::CorruptCheckpoint(format!("{}: state: {e}", path.display())))
        })?;
    let adam = |m: &str, v: &str, t: u64| Adam {
        beta1: counters.betas.0,
        beta2: counters.betas.1,
        eps: super::adam::ADAM_EPS,
        t,
        m: group(&archive, m, false),
        v: group(&archive, v, false),
    };
    let state = TrainState {
        variant,
        epoch: counters.epoch,
        global_step: counters.global_step,
        step_in_epoch: counters.step_in_epoch,
        generator: group(&archive, GEN, true),
        gen_buffers: group(&archive, GEN_BUF, false),
        critic: group(&archive, CRITIC, true),
        gen_opt: adam(GEN_M, GEN_V, counters.gen_t),
        critic_opt: adam(CRITIC_M, CRITIC_V, counters.critic_t),
        running: counters.running.clone(),
        rng: counters.rng.clone(),
        sampler: counters.sampler.clone(),
    };
    if !state.gen_opt.m.same_layout(&state.generator) || !state.critic_opt.m.same_layout(&state.critic) {
        return Err(BagError::CorruptCheckpoint(format!(
            "{}: optimizer moments do not match parameters",
            path.display()
        )));
    }
    Ok(state)
}

/// Generator variant, parameters and buffers from either kind of checkpoint.
pub fn load_generator(path: &Path, expected: Option<&VariantSpec>) -> Result<(VariantSpec, ParamSet, ParamSet)> {
    let Loaded { variant, archive } = open(path, expected)?;
    let params = group(&archive, GEN, true);
    if params.is_empty() {
        return Err(BagError::CorruptCheckpoint(format!(
            "{}: no generator parameters",
            path.display()
        )));
    }
    Ok((variant, params, group(&archive, GEN_BUF, false)))
}
