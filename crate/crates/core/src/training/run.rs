use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::save_checkpoint;
use super::snapshot::snapshot_attention;
use super::state::TrainState;
use super::trainer::{LossRecord, Trainer};
use crate::ablation::RenderSpec;
use crate::data::PairSource;
use crate::error::{BagError, Result};
use crate::image::Image;

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const SNAPSHOT_DIR: &str = "snapshots";

pub struct RunOutcome {
    pub state: TrainState,
    pub records: Vec<LossRecord>,
    pub snapshots: Vec<PathBuf>,
    /// Snapshot failures, which do not stop training.
    pub snapshot_errors: Vec<String>,
    pub checkpoint: PathBuf,
}

fn append_record(path: &Path, record: &LossRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| BagError::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(f, "{line}").map_err(|e| BagError::io(path, e))
}

/// Trains from `state` until `cfg.epochs` or `cfg.max_steps`, appending to
/// the loss log, snapshotting attention on `probe` and checkpointing under
/// `out`. A failed step stops the run with the last good state checkpointed.
pub fn run_training(
    trainer: &Trainer,
    mut state: TrainState,
    source: &dyn PairSource,
    out: &Path,
    probe: Option<&Image>,
) -> Result<RunOutcome> {
    trainer.check_state(&state)?;
    std::fs::create_dir_all(out).map_err(|e| BagError::io(out, e))?;
    let cfg = &trainer.cfg;
    let (log, checkpoint, snap_dir) = (out.join(LOSS_LOG), out.join(LAST_CHECKPOINT), out.join(SNAPSHOT_DIR));
    let mut outcome = RunOutcome {
        state: state.clone(),
        records: Vec::new(),
        snapshots: Vec::new(),
        snapshot_errors: Vec::new(),
        checkpoint: checkpoint.clone(),
    };
    let budget_left = |s: &TrainState| cfg.max_steps.is_none_or(|m| s.global_step < m);
    while state.epoch < cfg.epochs && budget_left(&state) {
        let (next, record) = match trainer.training_step(&state, source) {
            Ok(r) => r,
            Err(e) => {
                log::error!("step {} failed, state not advanced: {e}", state.global_step + 1);
                save_checkpoint(&state, &checkpoint)?;
                return Err(e);
            }
        };
        append_record(&log, &record)?;
        log::debug!("{record:?}");
        let finished_epoch = next.epoch > state.epoch;
        state = next;
        outcome.records.push(record);
        if !finished_epoch {
            continue;
        }
        if let Some((c, a, content, j)) = state.running.means() {
            log::info!(
                "epoch {}: critic {c:.4} adv {a:.4} content {content:.4} joint {j:.4}",
                state.epoch
            );
        }
        if let (Some(probe), true) = (probe, cfg.snapshot_due(state.epoch)) {
            let spec = RenderSpec::default();
            match snapshot_attention(
                &trainer.generator,
                &state.generator,
                &state.gen_buffers,
                probe,
                state.epoch,
                &snap_dir,
                &spec,
            ) {
                Ok(files) => outcome.snapshots.extend(files),
                Err(e) => {
                    log::warn!("attention snapshot at epoch {} failed: {e}", state.epoch);
                    outcome.snapshot_errors.push(e.to_string());
                }
            }
        }
        if cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(cfg.checkpoint_every) {
            save_checkpoint(&state, &checkpoint)?;
        }
    }
    save_checkpoint(&state, &checkpoint)?;
    outcome.state = state;
    Ok(outcome)
}
