use std::path::{Path, PathBuf};

use bag_autograd::no_grad;

use crate::ablation::{render_attention, tile_grid, RenderSpec};
use crate::error::{BagError, Result};
use crate::image::{Image, Image8};
use crate::networks::Generator;
use crate::nn::{Fwd, ParamSet};

pub fn snapshot_file(epoch: usize, module: usize) -> String {
    format!("attn_e{epoch}_m{module}.png")
}

/// Renders the probe's attention maps to `attn_e{epoch}_m{k}.png`, k = 1..=4.
pub fn snapshot_attention(
    generator: &Generator,
    params: &ParamSet,
    buffers: &ParamSet,
    probe: &Image,
    epoch: usize,
    dir: &Path,
    spec: &RenderSpec,
) -> Result<Vec<PathBuf>> {
    let out = no_grad(|| generator.forward(&Fwd::eval(params, buffers), &probe.to_tensor()))?;
    if out.attention.is_empty() {
        return Err(BagError::Config(format!(
            "variant {} has no attention maps to snapshot",
            generator.spec().label()
        )));
    }
    let mut files = Vec::new();
    for (k, a) in out.attention.iter().enumerate() {
        let path = dir.join(snapshot_file(epoch, k + 1));
        render_attention(a, spec)?.save(&path)?;
        files.push(path);
    }
    Ok(files)
}

/// Tiles saved snapshots into one image: a row per epoch, a column per module.
pub fn attention_grid(dir: &Path, epochs: &[usize], modules: usize, gap: usize) -> Result<Image8> {
    let rows = epochs
        .iter()
        .map(|&e| {
            (1..=modules)
                .map(|k| Image8::load(&dir.join(snapshot_file(e, k))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    tile_grid(&rows, gap)
}
