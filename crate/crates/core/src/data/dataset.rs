use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BagError, Result};
use crate::image::{normalize, Image, Image8};

const BLUR_DIR: &str = "blur";
const SHARP_DIR: &str = "sharp";
const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = BagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(BagError::Config(format!("split must be train or test, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    /// `<sequence>/<name>`
    pub identifier: String,
    pub blurred: PathBuf,
    pub sharp: PathBuf,
}

/// Sorted blurred/sharp pairs of one split, from
/// `<root>/<split>/<sequence>/{blur,sharp}/<name>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    pub pairs: Vec<PairEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub blurred: Image,
    pub sharp: Image,
    pub identifier: String,
}

pub(super) fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| BagError::io(dir, e))? {
        out.push(entry.map_err(|e| BagError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

pub(super) fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Indexes one split. A root without that split's directory is an empty
/// split; a missing root is an error.
pub fn load_index(root: &Path, split: Split) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(BagError::Data(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let split_dir = root.join(split.to_string());
    let mut pairs = Vec::new();
    if split_dir.is_dir() {
        for seq in sorted_entries(&split_dir)? {
            let blur_dir = seq.join(BLUR_DIR);
            if !blur_dir.is_dir() {
                continue;
            }
            let seq_name = seq.file_name().unwrap_or_default().to_string_lossy().into_owned();
            for blurred in sorted_entries(&blur_dir)?.into_iter().filter(|p| is_image(p)) {
                let name = blurred.file_name().unwrap_or_default().to_owned();
                let sharp = seq.join(SHARP_DIR).join(&name);
                if !sharp.is_file() {
                    return Err(BagError::MissingCounterpart {
                        orphan: blurred,
                        expected: sharp,
                    });
                }
                pairs.push(PairEntry {
                    identifier: format!("{seq_name}/{}", name.to_string_lossy()),
                    blurred,
                    sharp,
                });
            }
        }
    }
    log::info!("{} {split} pairs under {}", pairs.len(), root.display());
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        pairs,
    })
}

/// Decodes and normalizes a pair.
pub fn load_sample(entry: &PairEntry) -> Result<ImageSample> {
    let (b, s) = (Image8::load(&entry.blurred)?, Image8::load(&entry.sharp)?);
    if b.dims() != s.dims() {
        return Err(BagError::Data(format!(
            "{}: blurred {:?} and sharp {:?} differ in size",
            entry.identifier,
            b.dims(),
            s.dims()
        )));
    }
    Ok(ImageSample {
        blurred: normalize(&b),
        sharp: normalize(&s),
        identifier: entry.identifier.clone(),
    })
}

/// Crops the same `size` x `size` window from both images; the offset is
/// drawn from a generator seeded with `seed`.
pub fn random_crop_pair(sample: &ImageSample, size: usize, seed: u64) -> Result<ImageSample> {
    let (_, h, w) = sample.blurred.dims();
    if sample.sharp.dims() != sample.blurred.dims() {
        return Err(BagError::Data(format!("{}: pair sizes differ", sample.identifier)));
    }
    if size == 0 || h < size || w < size {
        return Err(BagError::Undersized(format!(
            "{}: {h}x{w} image cannot yield a {size}x{size} crop",
            sample.identifier
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (top, left) = (rng.random_range(0..=h - size), rng.random_range(0..=w - size));
    Ok(ImageSample {
        blurred: sample.blurred.crop(top, left, size, size)?,
        sharp: sample.sharp.crop(top, left, size, size)?,
        identifier: sample.identifier.clone(),
    })
}
