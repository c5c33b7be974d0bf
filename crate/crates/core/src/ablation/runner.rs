//! Trains and scores each ablation variant under one shared configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::variant::{BlockKind, Preset, VariantSpec};
use crate::blocks::ConnectionKind;
use crate::data::{ImageSample, PairSource};
use crate::error::Result;
use crate::evaluation::{evaluate_generator, MetricsReport, TimingSpec};
use crate::losses::{FeatureExtractor, LossConfig};
use crate::networks::Generator;
use crate::nn::ParamSet;
use crate::training::{run_training, TrainConfig, Trainer};

/// Builds a preset or explicit variant with freshly initialized weights.
pub fn build_variant(spec: &VariantSpec, seed: u64) -> Result<(Generator, ParamSet, ParamSet)> {
    spec.validate()?;
    Generator::init(spec, seed)
}

/// Flag rows of the ablation table, in display order.
pub const FLAG_ROWS: [&str; 6] = [
    "ResBlock",
    "DenseBlock-BN",
    "DenseBlock-IN",
    "SAU",
    "Residual connection",
    "Multilevel residual connection",
];

/// Check marks of `spec` against [`FLAG_ROWS`].
pub fn flags(spec: &VariantSpec) -> [bool; 6] {
    [
        spec.block_kind == BlockKind::Resblock,
        spec.block_kind == BlockKind::DenseblockBn,
        spec.block_kind == BlockKind::DenseblockIn,
        spec.use_sau,
        spec.connection_kind == ConnectionKind::OneLevel,
        spec.connection_kind == ConnectionKind::Multilevel,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationColumn {
    pub preset: Preset,
    pub variant: VariantSpec,
    pub flags: [bool; 6],
    pub parameters: usize,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    /// Set when training or evaluation of this variant failed.
    pub error: Option<String>,
    /// Full-scale PSNR for the same configuration, for comparison only.
    pub reference_psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub columns: Vec<AblationColumn>,
}

/// Evaluation data for the ablation: pairs to train on and pairs to score.
pub struct AblationData<'a> {
    pub train: &'a dyn PairSource,
    pub test: &'a [ImageSample],
}

fn train_and_score(
    preset: Preset,
    train_cfg: &TrainConfig,
    loss: &LossConfig,
    extractor: &FeatureExtractor,
    data: &AblationData<'_>,
    out: &Path,
    timing: TimingSpec,
) -> Result<MetricsReport> {
    let trainer = Trainer::new(&preset.spec(), train_cfg.clone(), loss.clone(), extractor.clone())?;
    let state = trainer.init_state()?;
    let dir = out.join(preset.name().replace(' ', "_").to_lowercase());
    let outcome = run_training(&trainer, state, data.train, &dir, None)?;
    let samples = data.test.iter().map(|s| (s.identifier.clone(), Ok(s.clone())));
    evaluate_generator(
        &trainer.generator,
        &outcome.state.generator,
        &outcome.state.gen_buffers,
        samples,
        timing,
    )
}

/// Trains every preset in turn from the same seed and configuration and
/// scores it on `data.test`. A failing variant gets an error cell; the rest
/// still run.
pub fn run_ablation(
    presets: &[Preset],
    train_cfg: &TrainConfig,
    loss: &LossConfig,
    extractor: &FeatureExtractor,
    data: &AblationData<'_>,
    out: &Path,
    timing: TimingSpec,
) -> Result<AblationTable> {
    let mut columns = Vec::with_capacity(presets.len());
    for &preset in presets {
        let variant = preset.spec();
        let parameters = build_variant(&variant, train_cfg.seed)?.1.num_elements();
        log::info!("ablation: training {preset} ({parameters} generator parameters)");
        let mut column = AblationColumn {
            preset,
            variant,
            flags: flags(&variant),
            parameters,
            psnr_db: None,
            ssim: None,
            error: None,
            reference_psnr_db: preset.reference_psnr(),
        };
        match train_and_score(preset, train_cfg, loss, extractor, data, out, timing) {
            Ok(report) if report.is_complete() => {
                column.psnr_db = report.mean_psnr_db;
                column.ssim = report.mean_ssim;
            }
            Ok(report) => {
                column.error = Some(format!("{} test images failed", report.failures.len()));
            }
            Err(e) => {
                log::error!("ablation: {preset} failed: {e}");
                column.error = Some(e.to_string());
            }
        }
        columns.push(column);
    }
    Ok(AblationTable { columns })
}

impl AblationTable {
    /// Aligned text: one column per variant, flag rows with check marks, then
    /// the measured and reference PSNR rows.
    pub fn render(&self) -> String {
        let mut rows: Vec<Vec<String>> = vec![std::iter::once("Model".to_string())
            .chain(self.columns.iter().map(|c| c.preset.name().to_string()))
            .collect()];
        for (i, name) in FLAG_ROWS.iter().enumerate() {
            rows.push(
                std::iter::once(name.to_string())
                    .chain(
                        self.columns
                            .iter()
                            .map(|c| if c.flags[i] { "x".into() } else { String::new() }),
                    )
                    .collect(),
            );
        }
        rows.push(
            std::iter::once("PSNR(dB)".to_string())
                .chain(self.columns.iter().map(|c| match (&c.error, c.psnr_db) {
                    (Some(_), _) => "failed".into(),
                    (None, Some(v)) => format!("{v:.2}"),
                    (None, None) => "n/a".into(),
                }))
                .collect(),
        );
        rows.push(
            std::iter::once("Reference PSNR(dB)".to_string())
                .chain(self.columns.iter().map(|c| format!("{:.2}", c.reference_psnr_db)))
                .collect(),
        );
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut text = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (cell, w))| {
                    if j == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:^w$}")
                    }
                })
                .collect();
            text.push_str(cells.join(" | ").trim_end());
            text.push('\n');
            if i == 0 || i == FLAG_ROWS.len() {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                text.push_str(&rule.join("-+-"));
                text.push('\n');
            }
        }
        text
    }
}
