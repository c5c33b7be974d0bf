//! Paired blurred/sharp data: directory indexing, aligned cropping and a
//! synthetic blur generator for self-contained datasets.

mod dataset;
mod source;
mod synth;

pub use dataset::{load_index, load_sample, random_crop_pair, DatasetIndex, ImageSample, PairEntry, Split};
pub use source::{InMemory, OnDisk, PairSource};
pub use synth::{
    procedural_sharp, read_manifest, regenerate, synthesize_blur, synthesize_directory, write_synthetic_dataset,
    KernelKind, KernelSpec, NoiseSpec, SynthRecord, SyntheticSetSpec, MANIFEST_FILE,
};
