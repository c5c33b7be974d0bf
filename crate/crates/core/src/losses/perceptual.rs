use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bag_autograd::Tensor;
use sha2::{Digest, Sha256};

use crate::archive;
use crate::error::{BagError, Result};
use crate::nn::{ParamInit, ParamSet, RELU_GAIN};

/// Convolutions in VGG19's feature stack.
pub const VGG19_CONV_LAYERS: usize = 16;

/// VGG19 feature configuration: output widths, `None` for 2x2 max pooling.
#[rustfmt::skip]
const VGG19: [Option<usize>; 20] = {
    const M: Option<usize> = None;
    [
        Some(64), Some(64), M,
        Some(128), Some(128), M,
        Some(256), Some(256), Some(256), Some(256), M,
        Some(512), Some(512), Some(512), Some(512), M,
        Some(512), Some(512), Some(512), Some(512),
    ]
};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Where the extractor's weights come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExtractorSource {
    /// A safetensors file with torchvision key names (`features.{i}.weight`).
    /// The checksum is taken from `sha256` or else from `<path>.sha256`.
    Weights { path: PathBuf, sha256: Option<String> },
    /// Randomly initialized, NOT pretrained. Only useful for tests and smoke runs.
    Random { seed: u64 },
}

impl FromStr for ExtractorSource {
    type Err = BagError;

    /// `random:<seed>` or a weights path.
    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("random:") {
            Some(seed) => seed
                .parse()
                .map(|seed| ExtractorSource::Random { seed })
                .map_err(|_| BagError::Config(format!("bad extractor seed in {s:?}"))),
            None if s.is_empty() => Err(BagError::Config("empty extractor weights path".into())),
            None => Ok(ExtractorSource::Weights {
                path: PathBuf::from(s),
                sha256: None,
            }),
        }
    }
}

impl fmt::Display for ExtractorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractorSource::Weights { path, .. } => write!(f, "{}", path.display()),
            ExtractorSource::Random { seed } => write!(f, "random:{seed}"),
        }
    }
}

#[derive(Clone, Debug)]
enum Stage {
    /// Torchvision index of the conv; weight and bias names derive from it.
    Conv {
        index: usize,
        in_ch: usize,
        out_ch: usize,
    },
    Pool,
}

/// Frozen VGG19 prefix ending at the ReLU after convolution `layer_index`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    stages: Vec<Stage>,
    weights: ParamSet,
    layer_index: usize,
    source: String,
}

fn stages_for(layer_index: usize) -> Result<Vec<Stage>> {
    if !(1..=VGG19_CONV_LAYERS).contains(&layer_index) {
        return Err(BagError::Config(format!(
            "perceptual layer index must be in 1..={VGG19_CONV_LAYERS}, got {layer_index}"
        )));
    }
    let (mut stages, mut index, mut in_ch, mut convs) = (Vec::new(), 0, 3, 0);
    for entry in VGG19 {
        match entry {
            Some(out_ch) => {
                stages.push(Stage::Conv { index, in_ch, out_ch });
                convs += 1;
                if convs == layer_index {
                    return Ok(stages);
                }
                in_ch = out_ch;
                index += 2;
            }
            None => {
                stages.push(Stage::Pool);
                index += 1;
            }
        }
    }
    unreachable!("layer index checked above")
}

fn unavailable_help(what: String) -> BagError {
    BagError::ExtractorUnavailable(format!(
        "{what}. Export pretrained VGG19 features with `python scripts/export_vgg19.py <out.safetensors>` \
         (writes the file and its .sha256) and point `extractor.source` at it, or set \
         `extractor.source=random:<seed>` for a randomly initialized, non-pretrained stand-in"
    ))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn expected_checksum(path: &Path, given: Option<&str>) -> Result<String> {
    if let Some(sum) = given {
        return Ok(sum.trim().to_ascii_lowercase());
    }
    let sidecar = PathBuf::from(format!("{}.sha256", path.display()));
    let text = std::fs::read_to_string(&sidecar).map_err(|_| {
        unavailable_help(format!(
            "no checksum for {} (looked for {})",
            path.display(),
            sidecar.display()
        ))
    })?;
    text.split_whitespace()
        .next()
        .map(str::to_ascii_lowercase)
        .ok_or_else(|| unavailable_help(format!("{} is empty", sidecar.display())))
}

impl FeatureExtractor {
    pub fn load(source: &ExtractorSource, layer_index: usize) -> Result<Self> {
        let stages = stages_for(layer_index)?;
        let weights = match source {
            ExtractorSource::Weights { path, sha256 } => Self::read_weights(path, sha256.as_deref(), &stages)?,
            ExtractorSource::Random { seed } => {
                log::warn!("perceptual loss uses a RANDOM, non-pretrained VGG19 (seed {seed}); content losses are not comparable to pretrained ones");
                let mut init = ParamInit::new(*seed);
                for s in &stages {
                    if let Stage::Conv { index, in_ch, out_ch } = *s {
                        init.scaled_normal(
                            &format!("features.{index}.weight"),
                            &[out_ch, in_ch, 3, 3],
                            in_ch * 9,
                            RELU_GAIN,
                        );
                        init.constant(&format!("features.{index}.bias"), &[out_ch], 0.0);
                    }
                }
                // frozen: plain (non-trainable) tensors
                let mut frozen = ParamSet::new();
                for (n, t) in init.finish().0.iter() {
                    frozen.insert(n, t.detach());
                }
                frozen
            }
        };
        Ok(Self {
            stages,
            weights,
            layer_index,
            source: source.to_string(),
        })
    }

    fn read_weights(path: &Path, sha256: Option<&str>, stages: &[Stage]) -> Result<ParamSet> {
        let bytes =
            std::fs::read(path).map_err(|e| unavailable_help(format!("cannot read {}: {e}", path.display())))?;
        let expected = expected_checksum(path, sha256)?;
        let actual = sha256_hex(&bytes);
        if actual != expected {
            return Err(unavailable_help(format!(
                "checksum mismatch for {}: expected {expected}, file has {actual}",
                path.display()
            )));
        }
        let archive = archive::decode(&bytes, path)?;
        let mut weights = ParamSet::new();
        for s in stages {
            if let Stage::Conv { index, in_ch, out_ch } = *s {
                for (suffix, shape) in [("weight", vec![out_ch, in_ch, 3, 3]), ("bias", vec![out_ch])] {
                    let name = format!("features.{index}.{suffix}");
                    let t = archive
                        .get(&name)
                        .ok_or_else(|| unavailable_help(format!("{} lacks {name}", path.display())))?;
                    if t.shape() != shape.as_slice() {
                        return Err(unavailable_help(format!(
                            "{name} has shape {:?}, expected {shape:?}",
                            t.shape()
                        )));
                    }
                    weights.insert(name, t.detach());
                }
            }
        }
        Ok(weights)
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    /// The weights' origin, as given to [`FeatureExtractor::load`].
    pub fn source(&self) -> &str {
        self.source.as_str()
    }

    pub fn is_pretrained(&self) -> bool {
        !self.source.starts_with("random:")
    }

    /// Features of a `[N, 3, H, W]` batch in `[-1, 1]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.dim(1) != 3 {
            return Err(BagError::Structural(format!(
                "extractor expects [N, 3, H, W], got {:?}",
                x.shape()
            )));
        }
        let mean = Tensor::from_vec(IMAGENET_MEAN.to_vec(), &[1, 3, 1, 1]);
        let inv_std = Tensor::from_vec(IMAGENET_STD.iter().map(|s| 1.0 / s).collect(), &[1, 3, 1, 1]);
        let mut h = x.add_scalar(1.0).scale(0.5).sub(&mean).mul(&inv_std);
        for s in &self.stages {
            h = match *s {
                Stage::Conv { index, out_ch, .. } => {
                    let w = self.weights.require(&format!("features.{index}.weight"))?;
                    let b = self.weights.require(&format!("features.{index}.bias"))?;
                    h.conv2d(w, 1, 1).add(&b.reshape(&[1, out_ch, 1, 1])).relu()
                }
                Stage::Pool => {
                    if h.dim(2) < 2 || h.dim(3) < 2 {
                        return Err(BagError::Undersized(format!(
                            "{}x{} image for the extractor",
                            x.dim(2),
                            x.dim(3)
                        )));
                    }
                    h.max_pool2d(2, 2)
                }
            };
        }
        Ok(h)
    }
}

/// `sum((phi(restored) - phi(sharp))^2) / (C * H * W)`, averaged over the batch.
pub fn perceptual_loss(restored: &Tensor, sharp: &Tensor, extractor: &FeatureExtractor) -> Result<Tensor> {
    if restored.shape() != sharp.shape() {
        return Err(BagError::Structural(format!(
            "restored {:?} and sharp {:?} differ in shape",
            restored.shape(),
            sharp.shape()
        )));
    }
    let diff = extractor.features(restored)?.sub(&extractor.features(sharp)?);
    let loss = diff.square().mean();
    if !loss.item().is_finite() {
        return Err(BagError::NumericalAbort("perceptual loss is not finite".into()));
    }
    Ok(loss)
}
