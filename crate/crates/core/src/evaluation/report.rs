use std::path::Path;
use std::time::Instant;

use bag_autograd::no_grad;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::metrics::{psnr, ssim};
use crate::data::{load_sample, DatasetIndex, ImageSample};
use crate::error::{BagError, Result};
use crate::image::{denormalize, Image};
use crate::networks::Generator;
use crate::nn::{Fwd, ParamSet};
use crate::training::load_generator;

/// Full-scale reference result after 300 epochs on GoPro: PSNR (dB), SSIM,
/// seconds per image. A documented reference, not a desk-scale target.
pub const REFERENCE_GOPRO: (f64, f64, f64) = (29.4, 0.89, 1.13);

/// Serializes infinite PSNR as the string `"inf"`.
mod db {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub identifier: String,
    #[serde(with = "db")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub runtime_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub identifier: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<ImageMetrics>,
    pub failures: Vec<Failure>,
    /// Mean over records with finite PSNR; `None` when there are none.
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_runtime_s: Option<f64>,
    /// Records left out of `mean_psnr_db` because their PSNR is infinite.
    pub infinite_psnr: usize,
}

impl MetricsReport {
    pub fn from_records(records: Vec<ImageMetrics>, failures: Vec<Failure>) -> Self {
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let finite: Vec<f64> = records.iter().map(|r| r.psnr_db).filter(|p| p.is_finite()).collect();
        let infinite_psnr = records.len() - finite.len();
        if infinite_psnr > 0 {
            log::warn!("{infinite_psnr} image(s) restored exactly (infinite PSNR), excluded from the PSNR mean");
        }
        Self {
            mean_psnr_db: mean(finite),
            mean_ssim: mean(records.iter().map(|r| r.ssim).collect()),
            mean_runtime_s: mean(records.iter().map(|r| r.runtime_s).collect()),
            infinite_psnr,
            records,
            failures,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Warm-up and timed repetitions of each forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingSpec {
    pub warmup: usize,
    pub runs: usize,
}

impl Default for TimingSpec {
    fn default() -> Self {
        Self { warmup: 1, runs: 3 }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Restores one image, returning the output and the median forward time.
pub fn timed_restore(
    generator: &Generator,
    params: &ParamSet,
    buffers: &ParamSet,
    blurred: &Image,
    timing: TimingSpec,
) -> Result<(Image, f64)> {
    let x = blurred.to_tensor();
    let fx = Fwd::eval(params, buffers);
    let run = || no_grad(|| generator.forward(&fx, &x));
    for _ in 0..timing.warmup {
        run()?;
    }
    let mut times = Vec::new();
    let mut last = None;
    for _ in 0..timing.runs.max(1) {
        let start = Instant::now();
        let out = run()?;
        times.push(start.elapsed().as_secs_f64());
        last = Some(out);
    }
    let restored = Image::from_tensor(&last.expect("at least one run").restored, 0)?;
    Ok((restored, median(times)))
}

fn score(
    generator: &Generator,
    params: &ParamSet,
    buffers: &ParamSet,
    sample: &ImageSample,
    timing: TimingSpec,
) -> Result<ImageMetrics> {
    let (restored, runtime_s) = timed_restore(generator, params, buffers, &sample.blurred, timing)?;
    let (out, sharp) = (denormalize(&restored), denormalize(&sample.sharp));
    Ok(ImageMetrics {
        identifier: sample.identifier.clone(),
        psnr_db: psnr(&out, &sharp)?,
        ssim: ssim(&out, &sharp)?,
        runtime_s,
    })
}

/// Scores a generator on every pair; a failing image is recorded and the
/// evaluation moves on.
pub fn evaluate_generator(
    generator: &Generator,
    params: &ParamSet,
    buffers: &ParamSet,
    samples: impl IntoIterator<Item = (String, Result<ImageSample>)>,
    timing: TimingSpec,
) -> Result<MetricsReport> {
    let (mut records, mut failures) = (Vec::new(), Vec::new());
    for (identifier, sample) in samples {
        match sample.and_then(|s| score(generator, params, buffers, &s, timing)) {
            Ok(m) => records.push(m),
            Err(e) => {
                log::warn!("{identifier}: {e}");
                failures.push(Failure {
                    identifier,
                    error: e.to_string(),
                });
            }
        }
    }
    if records.is_empty() && failures.is_empty() {
        return Err(BagError::Data("nothing to evaluate".into()));
    }
    Ok(MetricsReport::from_records(records, failures))
}

pub fn evaluate_checkpoint(checkpoint: &Path, index: &DatasetIndex, timing: TimingSpec) -> Result<MetricsReport> {
    if index.is_empty() {
        return Err(BagError::Data(format!(
            "no {} pairs under {}",
            index.split,
            index.root.display()
        )));
    }
    let (variant, params, buffers) = load_generator(checkpoint, None)?;
    let (generator, _, _) = Generator::init(&variant, 0)?;
    let samples = index.pairs.iter().map(|p| (p.identifier.clone(), load_sample(p)));
    evaluate_generator(&generator, &params, &buffers, samples, timing)
}

fn fmt_mean(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.decimals$}"))
}

/// Aligned text table with the columns Method, PSNR(dB), SSIM, Time(s).
pub fn render_table(rows: &[(String, &MetricsReport)]) -> String {
    let mut cells = vec![["Method".to_string(), "PSNR(dB)".into(), "SSIM".into(), "Time(s)".into()]];
    for (name, r) in rows {
        cells.push([
            name.clone(),
            fmt_mean(r.mean_psnr_db, 2),
            fmt_mean(r.mean_ssim, 4),
            fmt_mean(r.mean_runtime_s, 3),
        ]);
    }
    let widths: Vec<usize> = (0..4)
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
            out.push('\n');
        }
    }
    out
}
