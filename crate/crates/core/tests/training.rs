use bag_autograd::Tensor;
use bag_core::ablation::{Preset, RenderSpec, VariantSpec};
use bag_core::blocks::ConnectionKind;
use bag_core::data::{procedural_sharp, synthesize_blur, ImageSample, InMemory, KernelSpec, NoiseSpec};
use bag_core::error::BagError;
use bag_core::image::{normalize, Image};
use bag_core::losses::{ExtractorSource, FeatureExtractor, LossConfig};
use bag_core::training::{
    attention_grid, load_checkpoint, load_generator, run_training, save_checkpoint, snapshot_attention, TrainConfig,
    Trainer, LOSS_LOG,
};

fn pairs(n: usize, size: usize) -> InMemory {
    InMemory(
        (0..n)
            .map(|i| {
                let sharp = normalize(&procedural_sharp(size, size, i as u64));
                let k = KernelSpec::linear_motion(7, 30.0 * i as f64).unwrap();
                ImageSample {
                    blurred: synthesize_blur(&sharp, &k, NoiseSpec::NONE, 0).unwrap(),
                    sharp,
                    identifier: format!("p{i}"),
                }
            })
            .collect(),
    )
}

fn extractor() -> FeatureExtractor {
    FeatureExtractor::load(&ExtractorSource::Random { seed: 1 }, 7).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        decay_start: 2,
        crop_size: 72,
        critic_updates_per_gen: 2,
        critic_base_width: 8,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn trainer(cfg: TrainConfig) -> Trainer {
    Trainer::new(&Preset::Bag.spec(), cfg, LossConfig::default(), extractor()).unwrap()
}

#[test]
fn fixed_seed_runs_repeat_exactly() {
    let t = trainer(small_config());
    let data = pairs(3, 80);
    let run = || {
        let mut s = t.init_state().unwrap();
        let mut out = Vec::new();
        for _ in 0..10 {
            let (next, r) = t.training_step(&s, &data).unwrap();
            s = next;
            out.push(r.losses());
        }
        (out, s)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert!(sa.bitwise_eq(&sb));
    // 3 pairs, batch 1: three steps per epoch
    assert_eq!(sa.epoch, 3);
    assert_eq!(sa.global_step, 10);
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let t = trainer(small_config());
    let data = pairs(2, 76);
    let dir = tempfile::tempdir().unwrap();
    let mut s = t.init_state().unwrap();
    let mut straight = Vec::new();
    let mut mid = None;
    for i in 0..5 {
        if i == 3 {
            mid = Some(s.clone());
        }
        let (next, r) = t.training_step(&s, &data).unwrap();
        straight.push(r.losses());
        s = next;
    }
    let path = dir.path().join("ckpt.safetensors");
    save_checkpoint(mid.as_ref().unwrap(), &path).unwrap();
    let mut resumed = load_checkpoint(&path, Some(&Preset::Bag.spec())).unwrap();
    assert!(resumed.bitwise_eq(mid.as_ref().unwrap()));
    t.check_state(&resumed).unwrap();
    let mut tail = Vec::new();
    for _ in 0..2 {
        let (next, r) = t.training_step(&resumed, &data).unwrap();
        tail.push(r.losses());
        resumed = next;
    }
    assert_eq!(tail, straight[3..]);
    assert!(resumed.bitwise_eq(&s));

    let other = VariantSpec {
        connection_kind: ConnectionKind::OneLevel,
        ..Preset::Bag.spec()
    };
    assert!(matches!(
        load_checkpoint(&path, Some(&other)),
        Err(BagError::VariantMismatch { .. })
    ));
    let (v, params, _) = load_generator(&path, None).unwrap();
    assert_eq!(v, Preset::Bag.spec());
    assert!(params.bitwise_eq(&mid.unwrap().generator));
}

#[test]
fn corrupt_and_foreign_archives_are_named_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.safetensors");
    bag_core::archive::write(&path, [("a", &Tensor::zeros(&[1]))], Default::default()).unwrap();
    assert!(matches!(
        load_checkpoint(&path, None),
        Err(BagError::CheckpointVersion { .. })
    ));
    std::fs::write(&path, b"not an archive").unwrap();
    assert!(matches!(
        load_checkpoint(&path, None),
        Err(BagError::CorruptCheckpoint(_))
    ));
}

#[test]
fn each_phase_touches_only_its_network() {
    let t = trainer(small_config());
    let data = pairs(2, 72);
    let s = t.init_state().unwrap();
    let (after_critic, updates) = t.critic_phase(&s, &data, 1e-4).unwrap();
    assert_eq!(updates.len(), 2);
    assert_eq!(after_critic.generator.fingerprint(), s.generator.fingerprint());
    assert_ne!(after_critic.critic.fingerprint(), s.critic.fingerprint());
    let (after_gen, _) = t.generator_phase(&after_critic, &data, 1e-4).unwrap();
    assert_eq!(after_gen.critic.fingerprint(), after_critic.critic.fingerprint());
    assert_ne!(after_gen.generator.fingerprint(), after_critic.generator.fingerprint());
}

#[test]
fn zero_critic_first_wasserstein_term_is_zero() {
    let mut t = trainer(small_config());
    t.loss = LossConfig {
        gp_weight: 0.0,
        lambda_content: 0.0,
        ..LossConfig::default()
    };
    let data = pairs(1, 72);
    let mut s = t.init_state().unwrap();
    s.critic = s.critic.zeros_like();
    let (_, updates) = t.critic_phase(&s, &data, 1e-4).unwrap();
    assert_eq!(updates[0].wasserstein, 0.0);
}

#[test]
fn non_finite_step_is_refused_without_advancing() {
    let t = trainer(small_config());
    let data = pairs(1, 72);
    let mut s = t.init_state().unwrap();
    let w = s.generator.get("head.bias").unwrap();
    s.generator
        .insert("head.bias", Tensor::parameter(vec![f64::NAN; w.numel()], w.shape()));
    let before = s.clone();
    let err = t.training_step(&s, &data).unwrap_err();
    assert!(matches!(err, BagError::NumericalAbort(_)), "{err}");
    assert!(s.critic.bitwise_eq(&before.critic) && s.global_step == 0);
}

#[test]
fn budgeted_run_writes_log_snapshots_and_checkpoint() {
    let cfg = TrainConfig {
        epochs: 3,
        decay_start: 1,
        crop_size: 16,
        content_only: true,
        max_steps: Some(5),
        snapshot_epochs: vec![1, 2],
        ..small_config()
    };
    let t = trainer(cfg);
    let data = pairs(2, 20);
    let dir = tempfile::tempdir().unwrap();
    let probe = Image::filled(3, 12, 12, 0.25);
    let out = run_training(&t, t.init_state().unwrap(), &data, dir.path(), Some(&probe)).unwrap();
    // two steps per epoch: epoch 3 ends the run after 6 steps, the budget after 5
    assert_eq!(out.records.len(), 5);
    let log = std::fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
    assert_eq!(log.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in [
        "step",
        "epoch",
        "lr",
        "critic_loss",
        "adv_loss",
        "content_loss",
        "joint_loss",
        "wall_ms",
    ] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(out.snapshots.len(), 8);
    let grid = attention_grid(&dir.path().join("snapshots"), &[1, 2], 4, 2).unwrap();
    assert_eq!(grid.dims(), (3, 2 * 12 + 2, 4 * 12 + 3 * 2));
    let resumed = load_checkpoint(&out.checkpoint, None).unwrap();
    assert_eq!(resumed.global_step, 5);
}

#[test]
fn constant_probe_gives_uniform_interior_snapshots() {
    let t = trainer(small_config());
    let s = t.init_state().unwrap();
    let dir = tempfile::tempdir().unwrap();
    // each module widens the border-affected band by its DBU and SAU reach
    let probe = Image::filled(3, 352, 352, -0.3);
    let spec = RenderSpec {
        normalize: false,
        scale: 1,
    };
    let files = snapshot_attention(&t.generator, &s.generator, &s.gen_buffers, &probe, 5, dir.path(), &spec).unwrap();
    let names: Vec<String> = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names,
        ["attn_e5_m1.png", "attn_e5_m2.png", "attn_e5_m3.png", "attn_e5_m4.png"]
    );
    for f in files {
        let img = bag_core::image::Image8::load(&f).unwrap();
        // borders see zero padding; deep enough inside, every pixel matches
        let margin = 40;
        let reference = [
            img.get(0, margin, margin),
            img.get(1, margin, margin),
            img.get(2, margin, margin),
        ];
        for y in margin..88 - margin {
            for x in margin..88 - margin {
                assert_eq!([img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)], reference);
            }
        }
    }
    assert!(snapshot_attention(
        &t.generator,
        &s.generator,
        &s.gen_buffers,
        &Image::filled(3, 10, 12, 0.0),
        5,
        dir.path(),
        &spec
    )
    .is_err());
}
