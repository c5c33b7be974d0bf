//! Generator variants of the ablation study and the transformation modules
//! they place in the chain.

use std::fmt;

use bag_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    apply_attention, AttentionMap, ConnectionKind, DenseBlockUnit, ResidualFunction, SpatialAttentionUnit, DBU_LAYERS,
    FEATURE_CHANNELS,
};
use crate::error::{BagError, Result};
use crate::nn::{Conv2d, Fwd, Norm, NormKind, ParamInit, RELU_GAIN};

/// Convolution layers in every chain module, whatever its kind.
pub const MODULE_CONV_LAYERS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    PlainConv,
    Resblock,
    DenseblockBn,
    DenseblockIn,
}

impl BlockKind {
    fn is_dense(self) -> bool {
        matches!(self, BlockKind::DenseblockBn | BlockKind::DenseblockIn)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub block_kind: BlockKind,
    pub use_sau: bool,
    pub connection_kind: ConnectionKind,
    pub module_count: usize,
}

impl VariantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.module_count == 0 {
            return Err(BagError::Config("module_count must be at least 1".into()));
        }
        if self.use_sau && !self.block_kind.is_dense() {
            return Err(BagError::Config(format!(
                "spatial attention with {:?} matches no ablation row: attention is only paired with the \
                 instance-normalized dense block (Model 4, BAG), and Model Plain / Model 1 have no attention",
                self.block_kind
            )));
        }
        Ok(())
    }

    /// Short label, e.g. `denseblock_in+sau/multilevel x4`.
    pub fn label(&self) -> String {
        let kind = serde_json::to_value(self.block_kind).ok();
        let kind = kind.as_ref().and_then(|v| v.as_str()).unwrap_or("?");
        let conn = match self.connection_kind {
            ConnectionKind::OneLevel => "one_level",
            ConnectionKind::Multilevel => "multilevel",
        };
        let sau = if self.use_sau { "+sau" } else { "" };
        format!("{kind}{sau}/{conn} x{}", self.module_count)
    }
}

/// The six configurations of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    ModelPlain,
    Model1,
    Model2,
    Model3,
    Model4,
    Bag,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::ModelPlain,
        Preset::Model1,
        Preset::Model2,
        Preset::Model3,
        Preset::Model4,
        Preset::Bag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ModelPlain => "Model Plain",
            Preset::Model1 => "Model 1",
            Preset::Model2 => "Model 2",
            Preset::Model3 => "Model 3",
            Preset::Model4 => "Model 4",
            Preset::Bag => "BAG",
        }
    }

    /// Accepts the display name or a compact form (`model_plain`, `model4`,
    /// `bag`), case-insensitively.
    pub fn from_name(name: &str) -> Result<Preset> {
        let key: String = name
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Preset::ALL
            .into_iter()
            .find(|p| p.name().replace(' ', "").to_ascii_lowercase() == key)
            .ok_or_else(|| {
                let known: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                BagError::Config(format!("unknown preset `{name}` (known: {})", known.join(", ")))
            })
    }

    pub fn spec(self) -> VariantSpec {
        let (block_kind, use_sau, connection_kind) = match self {
            Preset::ModelPlain => (BlockKind::PlainConv, false, ConnectionKind::Multilevel),
            Preset::Model1 => (BlockKind::Resblock, false, ConnectionKind::Multilevel),
            Preset::Model2 => (BlockKind::DenseblockBn, false, ConnectionKind::Multilevel),
            Preset::Model3 => (BlockKind::DenseblockIn, false, ConnectionKind::Multilevel),
            Preset::Model4 => (BlockKind::DenseblockIn, true, ConnectionKind::OneLevel),
            Preset::Bag => (BlockKind::DenseblockIn, true, ConnectionKind::Multilevel),
        };
        VariantSpec {
            block_kind,
            use_sau,
            connection_kind,
            module_count: 4,
        }
    }

    /// PSNR (dB) reported for the full-scale ablation run; reference only.
    pub fn reference_psnr(self) -> f64 {
        match self {
            Preset::ModelPlain => 27.08,
            Preset::Model1 => 28.20,
            Preset::Model2 => 28.80,
            Preset::Model3 => 29.06,
            Preset::Model4 => 29.14,
            Preset::Bag => 29.41,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// 3x3 conv + norm + ReLU at the chain width.
#[derive(Clone, Debug)]
struct ConvUnit {
    conv: Conv2d,
    norm: Norm,
}

impl ConvUnit {
    fn new(init: &mut ParamInit, name: &str, norm: NormKind) -> Self {
        Self {
            conv: Conv2d::same(
                init,
                &format!("{name}.conv"),
                FEATURE_CHANNELS,
                FEATURE_CHANNELS,
                3,
                RELU_GAIN,
            ),
            norm: Norm::new(init, &format!("{name}.norm"), norm, FEATURE_CHANNELS),
        }
    }

    fn pre_activation(&self, fx: &Fwd, x: &Tensor) -> Result<Tensor> {
        self.norm.forward(fx, &self.conv.forward(fx, x)?)
    }

    fn forward(&self, fx: &Fwd, x: &Tensor) -> Result<Tensor> {
        Ok(self.pre_activation(fx, x)?.relu())
    }
}

#[derive(Clone, Debug)]
enum DenseTail {
    Attention(SpatialAttentionUnit),
    Conv(ConvUnit),
}

/// One chain module of a variant.
#[derive(Clone, Debug)]
pub struct TransformModule(Kind);

#[derive(Clone, Debug)]
enum Kind {
    /// Seven stacked conv + IN + ReLU layers.
    Plain(Vec<ConvUnit>),
    /// Three two-conv residual blocks and a fusion conv.
    Res {
        blocks: Vec<(ConvUnit, ConvUnit)>,
        fusion: ConvUnit,
    },
    /// A dense block unit followed by spatial attention or one extra conv.
    Dense { dbu: DenseBlockUnit, tail: DenseTail },
}

impl TransformModule {
    pub fn new(init: &mut ParamInit, name: &str, spec: &VariantSpec) -> Self {
        TransformModule(match spec.block_kind {
            BlockKind::PlainConv => Kind::Plain(
                (0..MODULE_CONV_LAYERS)
                    .map(|k| ConvUnit::new(init, &format!("{name}.layer{k}"), NormKind::Instance))
                    .collect(),
            ),
            BlockKind::Resblock => Kind::Res {
                blocks: (0..3)
                    .map(|k| {
                        (
                            ConvUnit::new(init, &format!("{name}.res{k}.a"), NormKind::Instance),
                            ConvUnit::new(init, &format!("{name}.res{k}.b"), NormKind::Instance),
                        )
                    })
                    .collect(),
                fusion: ConvUnit::new(init, &format!("{name}.fusion"), NormKind::Instance),
            },
            BlockKind::DenseblockBn | BlockKind::DenseblockIn => {
                let norm = if spec.block_kind == BlockKind::DenseblockBn {
                    NormKind::Batch
                } else {
                    NormKind::Instance
                };
                let dbu = DenseBlockUnit::new(init, &format!("{name}.dbu"), FEATURE_CHANNELS, DBU_LAYERS, norm);
                let tail = if spec.use_sau {
                    DenseTail::Attention(SpatialAttentionUnit::new(init, &format!("{name}.sau")))
                } else {
                    DenseTail::Conv(ConvUnit::new(init, &format!("{name}.extra"), norm))
                };
                Kind::Dense { dbu, tail }
            }
        })
    }

    pub fn conv_count(&self) -> usize {
        match &self.0 {
            Kind::Plain(layers) => layers.len(),
            Kind::Res { blocks, .. } => 2 * blocks.len() + 1,
            Kind::Dense { dbu, tail } => {
                dbu.conv_count()
                    + match tail {
                        DenseTail::Attention(sau) => sau.conv_count(),
                        DenseTail::Conv(_) => 1,
                    }
            }
        }
    }
}

impl ResidualFunction for TransformModule {
    fn residual(&self, fx: &Fwd, x: &Tensor) -> Result<(Tensor, Option<AttentionMap>)> {
        match &self.0 {
            Kind::Plain(layers) => {
                let mut h = x.clone();
                for layer in layers {
                    h = layer.forward(fx, &h)?;
                }
                Ok((h, None))
            }
            Kind::Res { blocks, fusion } => {
                let mut h = x.clone();
                for (a, b) in blocks {
                    h = b.pre_activation(fx, &a.forward(fx, &h)?)?.add(&h);
                }
                Ok((fusion.forward(fx, &h)?, None))
            }
            Kind::Dense { dbu, tail } => {
                let features = dbu.forward(fx, x)?;
                match tail {
                    DenseTail::Attention(sau) => {
                        let a = sau.forward(fx, &features)?;
                        Ok((apply_attention(&a, &features)?, Some(a)))
                    }
                    DenseTail::Conv(unit) => Ok((unit.forward(fx, &features)?, None)),
                }
            }
        }
    }
}
