//! Ablation variants and attention-map visualization.

mod render;
mod runner;
mod turbo;
mod variant;

pub use render::{colormap, colormap_index, render_attention, render_plane, tile_grid, RenderSpec, MIDPOINT_INDEX};
pub use runner::{build_variant, flags, run_ablation, AblationColumn, AblationData, AblationTable, FLAG_ROWS};
pub use variant::{BlockKind, Preset, TransformModule, VariantSpec, MODULE_CONV_LAYERS};
