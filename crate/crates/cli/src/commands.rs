use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bag_core::ablation::{render_attention, run_ablation, AblationData, Preset};
use bag_core::data::{
    load_index, load_sample, synthesize_directory, write_synthetic_dataset, ImageSample, KernelSpec, NoiseSpec, OnDisk,
    PairSource, Split,
};
use bag_core::evaluation::{evaluate_checkpoint, render_table, REFERENCE_GOPRO};
use bag_core::image::{denormalize, normalize, Image, Image8};
use bag_core::losses::FeatureExtractor;
use bag_core::networks::Generator;
use bag_core::training::{
    attention_grid, load_checkpoint, load_generator, run_training, save_generator, Trainer, SNAPSHOT_DIR,
};
use bag_core::BagError;
use clap::Args;
use serde_json::{json, Value};

use crate::config::{Layered, Settings};
use crate::provenance::RunRecord;
use crate::Common;

pub const GENERATOR_FILE: &str = "generator.safetensors";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TEXT: &str = "metrics.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TEXT: &str = "ablation.txt";
pub const GRID_FILE: &str = "attention_grid.png";

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn data_root(settings: &Settings) -> Result<PathBuf> {
    settings
        .data
        .root
        .clone()
        .ok_or_else(|| BagError::Config("no dataset root: pass --data or set data.root".into()).into())
}

/// Rejects bad training settings before any data is read.
fn validate_training(settings: &Settings) -> Result<()> {
    settings.model.variant()?;
    settings.train.validate()?;
    settings.loss.validate()?;
    settings.extractor.source()?;
    Ok(())
}

fn extractor(settings: &Settings) -> Result<FeatureExtractor> {
    Ok(FeatureExtractor::load(
        &settings.extractor.source()?,
        settings.loss.perceptual_layer_index,
    )?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Largest top-left crop with both sides a multiple of 4.
fn crop_to_multiple_of_4(img: &Image) -> Result<Image> {
    let (h, w) = (img.height() / 4 * 4, img.width() / 4 * 4);
    if h == 0 || w == 0 {
        bail!(BagError::Undersized(format!("{}x{} probe", img.height(), img.width())));
    }
    Ok(img.crop(0, 0, h, w)?)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset root holding `train/<sequence>/{blur,sharp}/`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of epochs; also moves the decay start to half of it unless
    /// `train.decay_start` is set explicitly.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many generator steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Ablation preset to train, e.g. `BAG` or `model_plain`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Continue from a full training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Image whose attention maps are snapshotted; defaults to the first training pair.
    #[arg(long)]
    pub probe: Option<PathBuf>,
}

impl TrainArgs {
    pub fn apply(&self, layers: &mut Layered) -> Result<()> {
        if let Some(d) = &self.data {
            layers.set("data.root", path_value(d))?;
        }
        if let Some(e) = self.epochs {
            layers.set("train.epochs", e.into())?;
            if !layers.is_set("train.decay_start") {
                layers.set("train.decay_start", (e / 2).max(1).into())?;
            }
        }
        if let Some(m) = self.max_steps {
            layers.set("train.max_steps", m.into())?;
        }
        if let Some(p) = &self.preset {
            layers.set("model.preset", p.as_str().into())?;
        }
        Ok(())
    }
}

pub fn train(args: &TrainArgs, settings: &Settings, record: &mut RunRecord) -> Result<()> {
    validate_training(settings)?;
    let out = &args.common.out;
    let variant = settings.model.variant()?;
    let root = data_root(settings)?;
    let index = load_index(&root, Split::Train)?;
    if index.is_empty() {
        bail!(BagError::Data(format!(
            "no training pairs under {}",
            root.join("train").display()
        )));
    }
    let probe = match &args.probe {
        Some(p) => normalize(&Image8::load(p)?),
        None => load_sample(&index.pairs[0])?.blurred,
    };
    let probe = crop_to_multiple_of_4(&probe)?;
    let trainer = Trainer::new(
        &variant,
        settings.train.clone(),
        settings.loss.clone(),
        extractor(settings)?,
    )?;
    let state = match &args.resume {
        Some(p) => load_checkpoint(p, Some(&variant))?,
        None => trainer.init_state()?,
    };
    let source = OnDisk::new(index, settings.data.cache);
    let probe = variant.use_sau.then_some(&probe);
    let outcome = run_training(&trainer, state, &source, out, probe)?;
    let generator = out.join(GENERATOR_FILE);
    save_generator(
        &generator,
        &variant,
        &outcome.state.generator,
        &outcome.state.gen_buffers,
    )?;
    record.outputs.push(outcome.checkpoint.clone());
    record.outputs.push(generator);
    record.outputs.extend(outcome.snapshots.iter().cloned());
    let last = outcome.records.last();
    record.summary = json!({
        "steps": outcome.state.global_step,
        "epoch": outcome.state.epoch,
        "records": outcome.records.len(),
        "final": last,
        "snapshot_errors": outcome.snapshot_errors,
    });
    println!(
        "trained {} steps ({} epochs) -> {}",
        outcome.state.global_step,
        outcome.state.epoch,
        out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Generator or full training checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

impl EvalArgs {
    pub fn apply(&self, layers: &mut Layered) -> Result<()> {
        if let Some(d) = &self.data {
            layers.set("data.root", path_value(d))?;
        }
        Ok(())
    }
}

pub fn eval(args: &EvalArgs, settings: &Settings, record: &mut RunRecord) -> Result<()> {
    let out = &args.common.out;
    let index = load_index(&data_root(settings)?, args.split)?;
    let report = evaluate_checkpoint(&args.checkpoint, &index, settings.eval)?;
    let name = args
        .checkpoint
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let mut table = render_table(&[(name, &report)]);
    let (p, s, t) = REFERENCE_GOPRO;
    table.push_str(&format!("reference (GoPro, full training): {p} dB, SSIM {s}, {t} s\n"));
    let json_path = out.join(METRICS_JSON);
    write_text(&json_path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_text(&out.join(METRICS_TEXT), &table)?;
    print!("{table}");
    record.outputs.push(json_path);
    record.summary = json!({
        "images": report.records.len(),
        "failures": report.failures.len(),
        "mean_psnr_db": report.mean_psnr_db,
        "mean_ssim": report.mean_ssim,
        "mean_runtime_s": report.mean_runtime_s,
    });
    if !report.failures.is_empty() {
        bail!(BagError::Data(format!(
            "{} of the images failed",
            report.failures.len()
        )));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Also write each image's attention maps as `<stem>_attn_m<k>.png`.
    #[arg(long)]
    pub dump_attention: bool,
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries =
        std::fs::read_dir(input).map_err(|e| BagError::Data(format!("cannot read input {}: {e}", input.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_model(checkpoint: &Path) -> Result<(Generator, bag_core::nn::ParamSet, bag_core::nn::ParamSet)> {
    let (variant, params, buffers) = load_generator(checkpoint, None)?;
    let (generator, _, _) = Generator::init(&variant, 0)?;
    Ok((generator, params, buffers))
}

pub fn infer(args: &InferArgs, settings: &Settings, record: &mut RunRecord) -> Result<()> {
    let out = &args.common.out;
    let (generator, params, buffers) = load_model(&args.checkpoint)?;
    if args.dump_attention && !generator.spec().use_sau {
        bail!(BagError::Config(format!(
            "--dump-attention: variant {} has no attention maps",
            generator.spec().label()
        )));
    }
    let files = image_files(&args.input)?;
    if files.is_empty() {
        bail!(BagError::Data(format!("no images at {}", args.input.display())));
    }
    let mut failed = 0;
    for file in &files {
        let stem = file
            .file_stem()
            .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let result = (|| -> Result<Vec<PathBuf>> {
            let blurred = normalize(&Image8::load(file)?);
            let (restored, attention) = generator.restore(&params, &buffers, &blurred)?;
            let mut written = vec![out.join(format!("{stem}.png"))];
            denormalize(&restored).save(&written[0])?;
            if args.dump_attention {
                for (k, a) in attention.iter().enumerate() {
                    let path = out.join(format!("{stem}_attn_m{}.png", k + 1));
                    render_attention(a, &settings.render)?.save(&path)?;
                    written.push(path);
                }
            }
            Ok(written)
        })();
        match result {
            Ok(written) => record.outputs.extend(written),
            Err(e) => {
                log::warn!("skipping {}: {e:#}", file.display());
                failed += 1;
            }
        }
    }
    record.summary = json!({ "inputs": files.len(), "failed": failed });
    println!(
        "restored {} of {} images -> {}",
        files.len() - failed,
        files.len(),
        out.display()
    );
    if failed == files.len() {
        bail!(BagError::Data(format!("all {failed} inputs failed")));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Snapshot directory of a training run (`<run>/snapshots`); tiles it into a grid.
    #[arg(long, conflicts_with_all = ["checkpoint", "input"])]
    pub snapshots: Option<PathBuf>,
    /// Grid rows; defaults to `train.snapshot_epochs`.
    #[arg(long, value_delimiter = ',')]
    pub epochs: Option<Vec<usize>>,
    #[arg(long, default_value_t = 4)]
    pub modules: usize,
    /// Render one image's attention maps with this checkpoint.
    #[arg(long, requires = "input")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub input: Option<PathBuf>,
}

pub fn visualize(args: &VisualizeArgs, settings: &Settings, record: &mut RunRecord) -> Result<()> {
    let out = &args.common.out;
    match (&args.snapshots, &args.checkpoint, &args.input) {
        (Some(dir), _, _) => {
            let epochs = args
                .epochs
                .clone()
                .unwrap_or_else(|| settings.train.snapshot_epochs.clone());
            let grid = attention_grid(dir, &epochs, args.modules, 4)?;
            let path = out.join(GRID_FILE);
            grid.save(&path)?;
            println!(
                "{} epochs x {} modules -> {}",
                epochs.len(),
                args.modules,
                path.display()
            );
            record.outputs.push(path);
        }
        (None, Some(checkpoint), Some(input)) => {
            let (generator, params, buffers) = load_model(checkpoint)?;
            let img = crop_to_multiple_of_4(&normalize(&Image8::load(input)?))?;
            let (_, attention) = generator.restore(&params, &buffers, &img)?;
            if attention.is_empty() {
                bail!(BagError::Config(format!(
                    "variant {} has no attention maps",
                    generator.spec().label()
                )));
            }
            let stem = input
                .file_stem()
                .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            for (k, a) in attention.iter().enumerate() {
                let path = out.join(format!("{stem}_attn_m{}.png", k + 1));
                render_attention(a, &settings.render)?.save(&path)?;
                record.outputs.push(path);
            }
            println!("{} attention maps -> {}", attention.len(), out.display());
        }
        _ => bail!(BagError::Config(format!(
            "pass --snapshots <run>/{SNAPSHOT_DIR}, or --checkpoint with --input"
        ))),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated presets; all six when omitted.
    #[arg(long, value_delimiter = ',')]
    pub presets: Option<Vec<String>>,
    /// Dataset root with `train/` and `test/` splits.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

impl AblateArgs {
    pub fn apply(&self, layers: &mut Layered) -> Result<()> {
        TrainArgs {
            common: self.common.clone(),
            data: self.data.clone(),
            epochs: self.epochs,
            max_steps: self.max_steps,
            preset: None,
            resume: None,
            probe: None,
        }
        .apply(layers)
    }
}

pub fn ablate(args: &AblateArgs, settings: &Settings, record: &mut RunRecord) -> Result<()> {
    validate_training(settings)?;
    let out = &args.common.out;
    let presets: Vec<Preset> = match &args.presets {
        Some(names) => names
            .iter()
            .map(|n| Preset::from_name(n))
            .collect::<bag_core::Result<_>>()?,
        None => Preset::ALL.to_vec(),
    };
    let root = data_root(settings)?;
    let train_index = load_index(&root, Split::Train)?;
    let test_index = load_index(&root, Split::Test)?;
    if train_index.is_empty() || test_index.is_empty() {
        bail!(BagError::Data(format!(
            "ablation needs train and test pairs under {}",
            root.display()
        )));
    }
    let test: Vec<ImageSample> = test_index
        .pairs
        .iter()
        .map(load_sample)
        .collect::<bag_core::Result<_>>()?;
    let train = OnDisk::new(train_index, settings.data.cache);
    let data = AblationData {
        train: &train as &dyn PairSource,
        test: &test,
    };
    let table = run_ablation(
        &presets,
        &settings.train,
        &settings.loss,
        &extractor(settings)?,
        &data,
        out,
        settings.eval,
    )?;
    let text = table.render();
    let json_path = out.join(ABLATION_JSON);
    write_text(&json_path, &(serde_json::to_string_pretty(&table)? + "\n"))?;
    write_text(&out.join(ABLATION_TEXT), &text)?;
    print!("{text}");
    record.outputs.push(json_path);
    let failed: Vec<&str> = table
        .columns
        .iter()
        .filter(|c| c.error.is_some())
        .map(|c| c.preset.name())
        .collect();
    record.summary = json!({ "presets": presets.len(), "failed": failed });
    if failed.len() == table.columns.len() {
        bail!(BagError::Data("every ablation variant failed".into()));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of sharp images to blur; without it, procedural scenes are
    /// generated per the `synth.*` keys.
    #[arg(long)]
    pub sharp: Option<PathBuf>,
    /// `delta`, `box:<odd len>` or `motion:<len>:<angle>`.
    #[arg(long, default_value = "motion:9:0", requires = "sharp")]
    pub kernel: String,
    /// Gaussian noise sigma in [-1, 1] units.
    #[arg(long, default_value_t = 0.0, requires = "sharp")]
    pub sigma: f64,
}

pub fn synthesize(args: &SynthesizeArgs, settings: &Settings, record: &mut RunRecord) -> Result<()> {
    let out = &args.common.out;
    let records = match &args.sharp {
        Some(dir) => {
            let kernel: KernelSpec = args.kernel.parse()?;
            synthesize_directory(dir, out, &kernel, NoiseSpec { sigma: args.sigma }, settings.synth.seed)?
        }
        None => write_synthetic_dataset(out, &settings.synth)?,
    };
    println!("{} pairs -> {}", records.len(), out.display());
    record.summary = json!({ "pairs": records.len() });
    Ok(())
}
