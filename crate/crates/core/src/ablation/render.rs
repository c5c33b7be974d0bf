//! Heat-map rendering of attention maps.

use serde::{Deserialize, Serialize};

use super::turbo::TURBO;
use crate::blocks::AttentionMap;
use crate::error::{BagError, Result};
use crate::image::Image8;

/// Colormap index used for a constant map when normalization is on.
pub const MIDPOINT_INDEX: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderSpec {
    /// Stretch each map's own min/max onto the full colormap.
    pub normalize: bool,
    /// Nearest-neighbour upscale factor.
    pub scale: usize,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            normalize: true,
            scale: 4,
        }
    }
}

/// The colormap: 256 entries from cool (index 0) to warm (index 255).
pub fn colormap() -> &'static [[u8; 3]; 256] {
    &TURBO
}

/// Colormap index of a value in `[0, 1]`.
pub fn colormap_index(t: f64) -> usize {
    (t.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Renders sample 0 of an attention map.
pub fn render_attention(a: &AttentionMap, spec: &RenderSpec) -> Result<Image8> {
    render_plane(a.plane(0), a.height(), a.width(), spec)
}

/// Renders a row-major `height` x `width` map of values.
pub fn render_plane(values: &[f64], height: usize, width: usize, spec: &RenderSpec) -> Result<Image8> {
    if values.len() != height * width || values.is_empty() {
        return Err(BagError::Structural(format!(
            "{} values for a {height}x{width} map",
            values.len()
        )));
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(BagError::NonFinite("attention map".into()));
    }
    if spec.scale == 0 {
        return Err(BagError::Config("render scale must be at least 1".into()));
    }
    let indices: Vec<usize> = if spec.normalize {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            values.iter().map(|&v| colormap_index((v - lo) / (hi - lo))).collect()
        } else {
            vec![MIDPOINT_INDEX; values.len()]
        }
    } else {
        values.iter().map(|&v| colormap_index(v)).collect()
    };
    let (oh, ow) = (height * spec.scale, width * spec.scale);
    let mut data = vec![0u8; 3 * oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let rgb = TURBO[indices[(y / spec.scale) * width + x / spec.scale]];
            for c in 0..3 {
                data[(c * oh + y) * ow + x] = rgb[c];
            }
        }
    }
    Image8::new(3, oh, ow, data)
}

/// Tiles equally sized renders into rows, separated by `gap` white pixels.
pub fn tile_grid(rows: &[Vec<Image8>], gap: usize) -> Result<Image8> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| BagError::Structural("empty grid".into()))?;
    let (th, tw) = (first.height(), first.width());
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let h = rows.len() * th + rows.len().saturating_sub(1) * gap;
    let w = cols * tw + cols.saturating_sub(1) * gap;
    let mut data = vec![255u8; 3 * h * w];
    for (r, row) in rows.iter().enumerate() {
        for (col, tile) in row.iter().enumerate() {
            if tile.dims() != (3, th, tw) {
                return Err(BagError::Structural("grid tiles differ in size".into()));
            }
            let (top, left) = (r * (th + gap), col * (tw + gap));
            for c in 0..3 {
                for y in 0..th {
                    let src = &tile.plane(c)[y * tw..(y + 1) * tw];
                    let dst = (c * h + top + y) * w + left;
                    data[dst..dst + tw].copy_from_slice(src);
                }
            }
        }
    }
    Image8::new(3, h, w, data)
}
