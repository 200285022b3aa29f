use super::*;
use crate::container::NamedArrays;
use crate::data::{generate_synthetic_dataset, write_synthetic_dataset};
use crate::lora::{Realization, ScalingMode};
use crate::vit::ViTConfig;

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 8,
        channels: 3,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        mlp_ratio: 2.0,
        ..ViTConfig::default()
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 4,
        base_lr: 1e-2,
        lora: AdapterConfig {
            rank: 2,
            alpha: 2.0,
            ..AdapterConfig::default()
        },
        ..TrainConfig::default()
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    manifest: DatasetManifest,
    backbone: ViTBackbone,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic_dataset(3, 4, 16, 5).unwrap();
    let files = write_synthetic_dataset(&data, dir.path().join("data"), 0, 0).unwrap();
    Fixture {
        manifest: DatasetManifest::load(files.train).unwrap(),
        backbone: ViTBackbone::random(tiny_vit(), 1).unwrap(),
        _dir: dir,
    }
}

#[test]
fn cosine_schedule_endpoints_and_monotonicity() {
    let total = 37;
    assert_eq!(cosine_lr(1e-4, 0, total), 1e-4);
    assert_eq!(cosine_lr(1e-4, total, total), 0.0);
    let lrs: Vec<f64> = (0..=total).map(|s| cosine_lr(1e-4, s, total)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!(lrs.iter().all(|&l| l >= 0.0));
    assert!((cosine_lr(2.0, 5, 10) - 1.0).abs() < 1e-15);
}

#[test]
fn adamw_first_step_matches_hand_formula() {
    let cfg = TrainConfig::default();
    let mut opt = AdamW::new(&cfg);
    let mut p = ndarray::arr1(&[1.0, -2.0]).into_dyn();
    let g = ndarray::arr1(&[0.5, -0.25]).into_dyn();
    opt.begin_step();
    opt.update("p", &mut p, &g, 0.1);
    // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps) after decay.
    for (i, (&p0, &g0)) in [1.0f64, -2.0].iter().zip([0.5f64, -0.25].iter()).enumerate() {
        let expected = p0 * (1.0 - 0.1 * 0.05) - 0.1 * g0 / (g0.abs() + 1e-8);
        assert!((p[i] - expected).abs() < 1e-15);
    }
    assert_eq!(opt.t, 1);
}

#[test]
fn zero_step_checkpoint_is_transparent() {
    let f = fixture();
    let ckpt = initial_checkpoint(&f.backbone, f.manifest.identities(), &tiny_config(), 3).unwrap();
    assert!(ckpt.adapters.is_identity());
    let merged = export_merged(&ckpt, &f.backbone).unwrap();
    assert_eq!(merged, f.backbone);
}

#[test]
fn training_leaves_backbone_untouched_and_lowers_loss() {
    let f = fixture();
    let frozen = f.backbone.clone();
    let cfg = TrainConfig {
        epochs: 6,
        augment: AugmentConfig::none(),
        ..tiny_config()
    };
    let out = finetune(&f.backbone, &f.manifest, &cfg, 11, &RunOptions::default()).unwrap();
    assert_eq!(f.backbone, frozen);
    assert_eq!(f.backbone.fingerprint(), out.checkpoint.backbone_fingerprint);
    assert_eq!(out.records.len(), 6 * 3);
    assert!(out.records.iter().all(|r| r.loss.is_finite()));
    assert!(out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap());
    assert!(!out.checkpoint.adapters.is_identity());
}

#[test]
fn parameter_census_matches_closed_form() {
    let f = fixture();
    for realization in [Realization::Fused, Realization::PerHead] {
        let mut cfg = tiny_config();
        cfg.lora.realization = realization;
        let start = initial_checkpoint(&f.backbone, f.manifest.identities(), &cfg, 2).unwrap();
        let out = finetune(&f.backbone, &f.manifest, &cfg, 2, &RunOptions::default()).unwrap();
        let changed = changed_parameters(&start.trainable(), &out.checkpoint.trainable());
        let (d, r, h, blocks) = (8, 2, 2, 1);
        let adapters = match realization {
            Realization::Fused => blocks * 2 * r * (d + d),
            Realization::PerHead => blocks * 2 * h * r * (d + d / h),
        };
        assert_eq!(changed, adapters + 3 * d, "{realization:?}");
    }
}

#[test]
fn parallel_and_sequential_gradients_are_bit_identical() {
    let f = fixture();
    let cfg = tiny_config();
    let mut ckpt = initial_checkpoint(&f.backbone, f.manifest.identities(), &cfg, 4).unwrap();
    for (_, b) in ckpt.adapters.named_factors_mut() {
        b.mapv_inplace(|v| v + 0.01);
    }
    let images: Vec<Array3<f64>> = (0..6).map(|s| crate::vit::random_image(&tiny_vit(), s)).collect();
    let labels = [0, 1, 2, 0, 1, 2];
    let a = batch_grads(&f.backbone, &ckpt.adapters, &ckpt.head, &images, &labels, true).unwrap();
    let b = batch_grads(&f.backbone, &ckpt.adapters, &ckpt.head, &images, &labels, false).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.named(&ckpt.adapters), b.named(&ckpt.adapters));
    let loss = batch_loss(&f.backbone, &ckpt.adapters, &ckpt.head, &images, &labels).unwrap();
    assert!((loss - a.loss).abs() < 1e-12);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let f = fixture();
    let cfg = TrainConfig {
        parallel: false,
        ..tiny_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let full = finetune(
        &f.backbone,
        &f.manifest,
        &cfg,
        9,
        &RunOptions {
            out_dir: Some(full_dir.clone()),
            stop_after_epoch: None,
        },
    )
    .unwrap();

    let part_dir = dir.path().join("part");
    let part_opts = RunOptions {
        out_dir: Some(part_dir.clone()),
        stop_after_epoch: Some(2),
    };
    let part = finetune(&f.backbone, &f.manifest, &cfg, 9, &part_opts).unwrap();
    assert_eq!(part.checkpoint.epoch, 2);
    let saved = Checkpoint::load(part_dir.join("checkpoint.safetensors")).unwrap();
    assert_eq!(saved, part.checkpoint);
    let rest = resume(
        saved,
        &f.backbone,
        &f.manifest,
        &cfg,
        &RunOptions {
            out_dir: Some(part_dir.clone()),
            stop_after_epoch: None,
        },
    )
    .unwrap();

    assert_eq!(rest.checkpoint, full.checkpoint);
    let mut joined = part.records.clone();
    joined.extend(rest.records.clone());
    assert_eq!(joined, full.records);
    assert_eq!(read_metric_log(part_dir.join("metrics.jsonl")).unwrap(), full.records);
    assert_eq!(
        std::fs::read(part_dir.join("checkpoint.safetensors")).unwrap(),
        std::fs::read(full_dir.join("checkpoint.safetensors")).unwrap()
    );
    let mid = Checkpoint::load(full_dir.join("checkpoints/epoch_002.safetensors")).unwrap();
    assert_eq!(mid, part.checkpoint);
}

#[test]
fn resume_rejects_other_backbone_and_config() {
    let f = fixture();
    let cfg = tiny_config();
    let ckpt = initial_checkpoint(&f.backbone, f.manifest.identities(), &cfg, 1).unwrap();
    let other = ViTBackbone::random(tiny_vit(), 2).unwrap();
    let err = resume(ckpt.clone(), &other, &f.manifest, &cfg, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::FingerprintMismatch { .. }));
    assert!(matches!(export_merged(&ckpt, &other), Err(Error::FingerprintMismatch { .. })));

    for (field, edit) in [
        ("lora.rank", Box::new(|c: &mut TrainConfig| c.lora.rank = 3) as Box<dyn Fn(&mut TrainConfig)>),
        ("lora.alpha", Box::new(|c: &mut TrainConfig| c.lora.alpha = 4.0)),
        ("lora.scaling_mode", Box::new(|c: &mut TrainConfig| c.lora.scaling_mode = ScalingMode::Standard)),
    ] {
        let mut other_cfg = cfg.clone();
        edit(&mut other_cfg);
        let err = resume(ckpt.clone(), &f.backbone, &f.manifest, &other_cfg, &RunOptions::default()).unwrap_err();
        assert!(matches!(&err, Error::IncompatibleCheckpoint(m) if m.contains(field)), "{err}");
    }
}

#[test]
fn non_finite_loss_aborts() {
    let f = fixture();
    let cfg = tiny_config();
    let mut ckpt = initial_checkpoint(&f.backbone, f.manifest.identities(), &cfg, 1).unwrap();
    ckpt.head.weight[[0, 0]] = f64::NAN;
    let err = resume(ckpt, &f.backbone, &f.manifest, &cfg, &RunOptions::default()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, epoch: 0, .. }));
}

#[test]
fn checkpoint_round_trip_with_neck_and_clip() {
    let f = fixture();
    let cfg = TrainConfig {
        epochs: 1,
        neck: Some(6),
        grad_clip: Some(0.5),
        ..tiny_config()
    };
    let out = finetune(&f.backbone, &f.manifest, &cfg, 5, &RunOptions::default()).unwrap();
    let bytes = out.checkpoint.to_named_arrays().unwrap().to_bytes().unwrap();
    let back = Checkpoint::from_named_arrays(&NamedArrays::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.head.input_dim(), 8);
}

#[test]
fn config_validation_names_fields() {
    let mut c = TrainConfig::default();
    c.lora.rank = 0;
    assert!(matches!(c.validate(), Err(Error::InvalidConfig { field, .. }) if field == "lora.rank"));
    let c = TrainConfig {
        margin: 1.0,
        ..TrainConfig::default()
    };
    assert!(matches!(c.validate(), Err(Error::InvalidConfig { field, .. }) if field == "train.margin"));
    assert_eq!(TrainConfig::full_scale_casia().batch_size, 512);
    assert_eq!(TrainConfig::full_scale_large().epochs, 30);
}

