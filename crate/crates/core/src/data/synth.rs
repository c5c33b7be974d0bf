use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{is_image, sorted_entries, Split};
use crate::error::{BagError, Result};
use crate::image::{denormalize, normalize, Image, Image8};

/// Name of the per-dataset record of how every pair was made.
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const TAP_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Delta,
    Box,
    LinearMotion,
}

/// A square blur kernel with nonnegative taps summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub length: usize,
    /// Motion direction in degrees, counter-clockwise from the +x axis.
    pub angle: f64,
    /// Odd side length of `taps`.
    pub size: usize,
    /// Row-major `size` x `size` weights.
    pub taps: Vec<f64>,
}

impl KernelSpec {
    pub fn delta() -> Self {
        Self {
            kind: KernelKind::Delta,
            length: 1,
            angle: 0.0,
            size: 1,
            taps: vec![1.0],
        }
    }

    /// Uniform `length` x `length` average; `length` must be odd.
    pub fn box_blur(length: usize) -> Result<Self> {
        if length.is_multiple_of(2) {
            return Err(BagError::Config(format!("box kernel length must be odd, got {length}")));
        }
        let n = (length * length) as f64;
        Ok(Self {
            kind: KernelKind::Box,
            length,
            angle: 0.0,
            size: length,
            taps: vec![1.0 / n; length * length],
        })
    }

    /// `length` equally weighted samples along a centered line segment,
    /// bilinearly splatted onto the pixel grid.
    pub fn linear_motion(length: usize, angle: f64) -> Result<Self> {
        if length == 0 || !angle.is_finite() {
            return Err(BagError::Config(format!(
                "bad motion kernel: length {length}, angle {angle}"
            )));
        }
        let size = 2 * length.div_ceil(2) + 1;
        let centre = (size / 2) as f64;
        let (dx, dy) = ((angle * PI / 180.0).cos(), -(angle * PI / 180.0).sin());
        // snap near-axis directions so axis-aligned kernels land on whole pixels
        let snap = |v: f64| if v.abs() < 1e-12 { 0.0 } else { v };
        let (dx, dy) = (snap(dx), snap(dy));
        let w = 1.0 / length as f64;
        let mut taps = vec![0.0; size * size];
        for i in 0..length {
            let t = i as f64 - (length - 1) as f64 / 2.0;
            let (x, y) = (centre + t * dx, centre + t * dy);
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                    if wx * wy > 0.0 {
                        taps[(y0 as usize + oy) * size + x0 as usize + ox] += w * wx * wy;
                    }
                }
            }
        }
        Ok(Self {
            kind: KernelKind::LinearMotion,
            length,
            angle,
            size,
            taps,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.is_multiple_of(2) || self.taps.len() != self.size * self.size {
            return Err(BagError::Config(format!(
                "kernel needs an odd side and side^2 taps (side {}, {} taps)",
                self.size,
                self.taps.len()
            )));
        }
        if self.taps.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(BagError::Config("kernel taps must be finite and nonnegative".into()));
        }
        let sum: f64 = self.taps.iter().sum();
        if (sum - 1.0).abs() > TAP_SUM_TOL {
            return Err(BagError::Config(format!("kernel taps sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Parses `delta`, `box:<odd length>` or `motion:<length>:<angle degrees>`.
impl FromStr for KernelSpec {
    type Err = BagError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| BagError::Config(format!("bad number `{v}` in kernel `{s}`")))
        };
        let len = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| BagError::Config(format!("bad length `{v}` in kernel `{s}`")))
        };
        match parts.as_slice() {
            ["delta"] => Ok(KernelSpec::delta()),
            ["box", l] => KernelSpec::box_blur(len(l)?),
            ["motion", l, a] => KernelSpec::linear_motion(len(l)?, num(a)?),
            _ => Err(BagError::Config(format!(
                "unknown kernel `{s}` (expected delta, box:<len> or motion:<len>:<angle>)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of additive Gaussian noise, in `[-1, 1]` units.
    pub sigma: f64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec { sigma: 0.0 };
}

/// Reflect-101 border index (`-1 -> 1`, `n -> n - 2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Blurs every channel with `kernel`, adds seeded Gaussian noise and clamps
/// to `[-1, 1]`.
///
/// Each output is accumulated as `x[p] + sum t * (x[q] - x[p])`, which equals
/// the plain weighted sum for unit-sum kernels but is exact on flat regions and
/// for the delta kernel.
pub fn synthesize_blur(sharp: &Image, kernel: &KernelSpec, noise: NoiseSpec, seed: u64) -> Result<Image> {
    kernel.validate()?;
    if !(noise.sigma >= 0.0 && noise.sigma.is_finite()) {
        return Err(BagError::Config(format!(
            "noise sigma must be >= 0, got {}",
            noise.sigma
        )));
    }
    if !sharp.is_finite() {
        return Err(BagError::NonFinite("sharp image".into()));
    }
    let (c, h, w) = sharp.dims();
    let r = (kernel.size / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = kernel
        .taps
        .iter()
        .enumerate()
        .filter(|(_, t)| **t != 0.0)
        .map(|(i, &t)| ((i / kernel.size) as isize - r, (i % kernel.size) as isize - r, t))
        .collect();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = sharp.plane(ch);
        for y in 0..h {
            for x in 0..w {
                let centre = plane[y * w + x];
                let mut acc = 0.0;
                for &(dy, dx, t) in &taps {
                    let q = reflect(y as isize + dy, h) * w + reflect(x as isize + dx, w);
                    acc += t * (plane[q] - centre);
                }
                out[(ch * h + y) * w + x] = centre + acc;
            }
        }
    }
    if noise.sigma > 0.0 {
        let normal = Normal::new(0.0, noise.sigma).map_err(|e| BagError::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut out {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut out {
        *v = v.clamp(-1.0, 1.0);
    }
    Image::new(c, h, w, out)
}

/// A textured test scene: overlapping shaded rectangles and discs with
/// sharp edges.
pub fn procedural_sharp(height: usize, width: usize, seed: u64) -> Image8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = vec![[0.0f64; 3]; height * width];
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(40.0..200.0));
    let tilt: [f64; 2] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    for (i, p) in px.iter_mut().enumerate() {
        let (y, x) = ((i / width) as f64, (i % width) as f64);
        *p = bg.map(|b| b + tilt[0] * y + tilt[1] * x);
    }
    let (hf, wf) = (height as f64, width as f64);
    let shapes = 6 + (height * width) / 1500;
    for _ in 0..shapes {
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
        let (cy, cx) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
        let (ry, rx) = (
            rng.random_range(2.0..hf / 4.0 + 3.0),
            rng.random_range(2.0..wf / 4.0 + 3.0),
        );
        let disc = rng.random_bool(0.5);
        let stripes = rng.random_range(0.0..0.6);
        for y in (cy - ry).max(0.0) as usize..((cy + ry).ceil() as usize).min(height) {
            for x in (cx - rx).max(0.0) as usize..((cx + rx).ceil() as usize).min(width) {
                let (ny, nx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                if disc && ny * ny + nx * nx > 1.0 {
                    continue;
                }
                let shade = 1.0 - stripes * (((x + y) / 3) % 2) as f64;
                px[y * width + x] = colour.map(|c| c * shade);
            }
        }
    }
    let mut data = vec![0u8; 3 * height * width];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            data[c * height * width + i] = p[c].round().clamp(0.0, 255.0) as u8;
        }
    }
    Image8::new(3, height, width, data).expect("sizes match")
}

/// How one synthetic pair was made; enough to regenerate it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    /// `<split>/<sequence>/<name>`
    pub identifier: String,
    pub kernel: KernelSpec,
    pub sigma: f64,
    pub seed: u64,
    /// Seed of the procedural sharp image; `None` if it came from a file.
    pub scene_seed: Option<u64>,
    pub height: usize,
    pub width: usize,
}

/// Rebuilds the 8-bit blurred image of a record from its sharp image.
pub fn regenerate(record: &SynthRecord, sharp: &Image8) -> Result<Image8> {
    let blurred = synthesize_blur(
        &normalize(sharp),
        &record.kernel,
        NoiseSpec { sigma: record.sigma },
        record.seed,
    )?;
    Ok(denormalize(&blurred))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSetSpec {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub height: usize,
    pub width: usize,
    /// Motion lengths are drawn uniformly from this inclusive range.
    pub min_length: usize,
    pub max_length: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Pairs per sequence directory.
    pub sequence_len: usize,
}

impl Default for SyntheticSetSpec {
    fn default() -> Self {
        Self {
            train_pairs: 8,
            test_pairs: 2,
            height: 96,
            width: 96,
            min_length: 5,
            max_length: 11,
            sigma: 0.0,
            seed: 0,
            sequence_len: 4,
        }
    }
}

/// Writes a procedurally generated paired dataset in the directory layout
/// `load_index` reads, plus a manifest of every pair.
pub fn write_synthetic_dataset(root: &Path, spec: &SyntheticSetSpec) -> Result<Vec<SynthRecord>> {
    if spec.min_length == 0 || spec.min_length > spec.max_length || spec.sequence_len == 0 {
        return Err(BagError::Config(
            "need 1 <= min_length <= max_length and sequence_len >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    for (split, count) in [(Split::Train, spec.train_pairs), (Split::Test, spec.test_pairs)] {
        for i in 0..count {
            let seq = format!("seq{:03}", i / spec.sequence_len);
            let name = format!("{:06}.png", i % spec.sequence_len);
            let scene_seed: u64 = rng.random();
            let kernel = KernelSpec::linear_motion(
                rng.random_range(spec.min_length..=spec.max_length),
                rng.random_range(0.0..180.0),
            )?;
            let record = SynthRecord {
                identifier: format!("{split}/{seq}/{name}"),
                kernel,
                sigma: spec.sigma,
                seed: rng.random(),
                scene_seed: Some(scene_seed),
                height: spec.height,
                width: spec.width,
            };
            let sharp = procedural_sharp(spec.height, spec.width, scene_seed);
            let dir: PathBuf = root.join(split.to_string()).join(&seq);
            regenerate(&record, &sharp)?.save(&dir.join("blur").join(&name))?;
            sharp.save(&dir.join("sharp").join(&name))?;
            records.push(record);
        }
    }
    write_manifest(&root.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

pub(crate) fn write_manifest(path: &Path, records: &[SynthRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| BagError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| BagError::io(path, e))?;
    }
    w.flush().map_err(|e| BagError::io(path, e))
}

/// Blurs every image in `sharp_dir` with one kernel, writing
/// `<out>/blur/<stem>.png`, a re-encoded `<out>/sharp/<stem>.png` and the
/// manifest. Per-image noise seeds are drawn from `seed`.
pub fn synthesize_directory(
    sharp_dir: &Path,
    out: &Path,
    kernel: &KernelSpec,
    noise: NoiseSpec,
    seed: u64,
) -> Result<Vec<SynthRecord>> {
    kernel.validate()?;
    let inputs: Vec<PathBuf> = sorted_entries(sharp_dir)?.into_iter().filter(|p| is_image(p)).collect();
    if inputs.is_empty() {
        return Err(BagError::Data(format!("no images in {}", sharp_dir.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(inputs.len());
    for path in inputs {
        let sharp = Image8::load(&path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let name = format!("{stem}.png");
        let record = SynthRecord {
            identifier: name.clone(),
            kernel: kernel.clone(),
            sigma: noise.sigma,
            seed: rng.random(),
            scene_seed: None,
            height: sharp.height(),
            width: sharp.width(),
        };
        regenerate(&record, &sharp)?.save(&out.join("blur").join(&name))?;
        sharp.save(&out.join("sharp").join(&name))?;
        records.push(record);
    }
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SynthRecord>> {
    let file = File::open(path).map_err(|e| BagError::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| BagError::io(path, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}
