use nds_core::nn::gradcheck::STEP;
use nds_core::nn::{Graph, Mode, ParameterStore, Tensor, Var};
use nds_core::zoo::{
    check_architecture, forward_batch, forward_sequence, ArchitectureKind, BackboneKind, Model, ModelConfig,
};
use nds_core::{Error, Raster};

fn field(h: usize, w: usize, c: usize, phase: f64) -> Raster {
    Raster::from_fn(h, w, c, |r, col, ch| {
        0.5 + 0.4 * ((r as f64 * 0.37 + col as f64 * 0.61 + ch as f64 * 1.3 + phase).sin())
    })
    .unwrap()
}

fn inputs_for(cfg: &ModelConfig, side: usize) -> Vec<Raster> {
    (0..cfg.arch.input_count())
        .map(|i| field(side, side, cfg.flight_channels(), i as f64 * 0.9))
        .collect()
}

#[test]
fn branch_parameter_accounting() {
    for backbone in [BackboneKind::CompactVgg, BackboneKind::CompactEffNet] {
        let cfg = |arch| ModelConfig {
            arch,
            backbone,
            ..ModelConfig::default()
        };
        let (_, shared) = Model::build::<f32>(&cfg(ArchitectureKind::ProposedShared)).unwrap();
        let (_, unshared) = Model::build::<f32>(&cfg(ArchitectureKind::ProposedUnshared)).unwrap();
        let (_, single) = Model::build::<f32>(&cfg(ArchitectureKind::SingleUNet)).unwrap();
        let branch = shared.count_prefix("branch");
        assert!(branch > 0);
        assert_eq!(unshared.count_prefix("branch"), 3 * branch);
        assert_eq!(single.count(), branch);
        assert_eq!(shared.count_prefix("lstm."), unshared.count_prefix("lstm."));
    }
}

#[test]
fn shared_branches_agree_on_repeated_flight() {
    let cfg = ModelConfig::tiny(ArchitectureKind::ProposedShared, BackboneKind::CompactEffNet);
    let (model, store) = Model::build::<f64>(&cfg).unwrap();
    let img = field(32, 32, 3, 0.3);
    let out = forward_sequence(&model, &store, &[img.clone(), img.clone(), img], Mode::Infer).unwrap();
    assert_eq!(out.intermediates.len(), 3);
    assert_eq!(out.intermediates[0], out.intermediates[1]);
    assert_eq!(out.intermediates[1], out.intermediates[2]);
}

#[test]
fn every_architecture_keeps_spatial_dims_and_range() {
    for arch in ArchitectureKind::ALL {
        for backbone in [BackboneKind::CompactVgg, BackboneKind::CompactEffNet] {
            let cfg = ModelConfig::tiny(arch, backbone);
            let (model, store) = Model::build::<f32>(&cfg).unwrap();
            let out = forward_sequence(&model, &store, &inputs_for(&cfg, 64), Mode::Infer).unwrap();
            assert_eq!(out.masks.len(), arch.output_count(), "{arch:?}");
            for m in &out.masks {
                assert_eq!(m.dims(), (64, 64, 1));
                assert!(m.values().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

#[test]
fn nine_channel_yields_one_mask() {
    let cfg = ModelConfig::tiny(ArchitectureKind::NineChannel, BackboneKind::CompactVgg);
    let (model, store) = Model::build::<f32>(&cfg).unwrap();
    let out = forward_sequence(&model, &store, &inputs_for(&cfg, 32), Mode::Infer).unwrap();
    assert_eq!(out.masks.len(), 1);
}

#[test]
fn cascading_with_zero_parameters_gives_half() {
    let cfg = ModelConfig::tiny(ArchitectureKind::CascadingConcat, BackboneKind::CompactVgg);
    let (model, mut store) = Model::build::<f64>(&cfg).unwrap();
    store.fill_trainable_values(0.0);
    let mut inputs = inputs_for(&cfg, 32);
    inputs[0] = Raster::zeros(32, 32, 3);
    let out = forward_sequence(&model, &store, &inputs, Mode::Infer).unwrap();
    assert!(out.masks[0].values().iter().all(|&v| v == 0.5));
}

#[test]
fn wrong_input_count_is_rejected() {
    let cfg = ModelConfig::tiny(ArchitectureKind::ProposedShared, BackboneKind::CompactVgg);
    let (model, store) = Model::build::<f32>(&cfg).unwrap();
    let two = vec![field(16, 16, 3, 0.0), field(16, 16, 3, 1.0)];
    assert!(matches!(
        forward_sequence(&model, &store, &two, Mode::Infer),
        Err(Error::Validation(_))
    ));
    let odd = vec![field(24, 24, 3, 0.0); 3];
    assert!(matches!(
        forward_sequence(&model, &store, &odd, Mode::Infer),
        Err(Error::Validation(_))
    ));
}

#[test]
fn incompatible_channels_are_a_config_error() {
    let cfg = ModelConfig {
        arch: ArchitectureKind::NineChannelConv1D,
        input_channels: 4,
        ..ModelConfig::default()
    };
    assert!(matches!(Model::build::<f32>(&cfg), Err(Error::Config(_))));
}

fn train_grads(model: &Model, store: &ParameterStore<f64>, inputs: &[Raster], seed_mask: Option<usize>) -> ParameterStore<f64> {
    let mut g = Graph::new(store, Mode::Train);
    let xs: Vec<Var> = inputs
        .iter()
        .map(|r| g.input(nds_core::zoo::rasters_to_tensor(&[r]).unwrap()))
        .collect();
    let out = model.forward(&mut g, &xs).unwrap();
    let seeds: Vec<(Var, Tensor<f64>)> = out
        .masks
        .iter()
        .enumerate()
        .filter(|(i, _)| seed_mask.is_none_or(|k| k == *i))
        .map(|(_, &m)| (m, Tensor::full(g.shape(m), 1.0)))
        .collect();
    let grads = g.backward(&seeds).unwrap();
    let mut acc = store.clone();
    acc.zero_grad();
    acc.accumulate(&grads);
    acc
}

fn grad_norm(store: &ParameterStore<f64>, pred: impl Fn(&str) -> bool) -> f64 {
    store
        .iter()
        .filter(|(_, p)| pred(&p.name))
        .map(|(id, _)| store.grad(id).data().iter().map(|v| v * v).sum::<f64>())
        .sum()
}

#[test]
fn frozen_encoder_receives_no_gradient() {
    let cfg = ModelConfig {
        freeze_encoder: true,
        ..ModelConfig::tiny(ArchitectureKind::ProposedShared, BackboneKind::CompactEffNet)
    };
    let (model, store) = Model::build::<f64>(&cfg).unwrap();
    let acc = train_grads(&model, &store, &inputs_for(&cfg, 16), None);
    let mut encoder = 0;
    for (id, p) in acc.iter() {
        if p.name.contains("encoder.") {
            encoder += 1;
            assert!(acc.grad(id).data().iter().all(|&v| v == 0.0), "{}", p.name);
        }
    }
    assert!(encoder > 0);
    assert!(grad_norm(&acc, |n| n.contains("decoder.")) > 0.0);
}

#[test]
fn cascading_oldest_loss_reaches_only_first_unet() {
    let cfg = ModelConfig::tiny(ArchitectureKind::CascadingMultiply, BackboneKind::CompactVgg);
    let (model, store) = Model::build::<f64>(&cfg).unwrap();
    let inputs = inputs_for(&cfg, 16);
    let oldest = train_grads(&model, &store, &inputs, Some(0));
    assert!(grad_norm(&oldest, |n| n.starts_with("branch0.")) > 0.0);
    assert_eq!(grad_norm(&oldest, |n| n.starts_with("branch1.")), 0.0);
    assert_eq!(grad_norm(&oldest, |n| n.starts_with("branch2.")), 0.0);
    let newest = train_grads(&model, &store, &inputs, Some(2));
    for b in 0..3 {
        let prefix = format!("branch{b}.");
        assert!(grad_norm(&newest, |n| n.starts_with(&prefix)) > 0.0, "{prefix}");
    }
}

#[test]
fn inference_is_deterministic_and_batch_invariant() {
    let cfg = ModelConfig::tiny(ArchitectureKind::ProposedUnshared, BackboneKind::CompactVgg);
    let (model, store) = Model::build::<f64>(&cfg).unwrap();
    let a = inputs_for(&cfg, 32);
    let b: Vec<Raster> = (0..3).map(|i| field(32, 32, 3, 5.0 + i as f64)).collect();
    let alone = forward_sequence(&model, &store, &a, Mode::Infer).unwrap();
    assert_eq!(forward_sequence(&model, &store, &a, Mode::Infer).unwrap(), alone);
    let batch = forward_batch(&model, &store, &[a.iter().collect(), b.iter().collect()], Mode::Infer).unwrap();
    for (x, y) in batch[0].masks.iter().zip(&alone.masks) {
        let diff = x
            .values()
            .iter()
            .zip(y.values())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let cfg = ModelConfig::tiny(ArchitectureKind::PreLstmConcat, BackboneKind::CompactEffNet);
    let (model, store) = Model::build::<f32>(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ndck");
    model.to_checkpoint(&store, None).save(&path).unwrap();
    let (loaded, lstore) = Model::load::<f32>(&path).unwrap();
    assert_eq!(loaded.config(), &cfg);
    let x = inputs_for(&cfg, 16);
    assert_eq!(
        forward_sequence(&model, &store, &x, Mode::Infer).unwrap(),
        forward_sequence(&loaded, &lstore, &x, Mode::Infer).unwrap()
    );
}

// All ten architectures are checked by the acceptance suite; these are the
// fast ones, covering both backbones.
#[test]
fn gradient_check_fast_architectures() {
    for arch in [ArchitectureKind::SingleUNet, ArchitectureKind::NineChannel, ArchitectureKind::OnlyLstm] {
        let report = check_architecture(arch, BackboneKind::CompactEffNet, STEP).unwrap();
        assert!(report.pass, "{arch:?}: {report:?}");
    }
}

// ReLU and max pooling are not differentiable at ties; with these inputs a
// 1e-4 step crosses one, so the VGG check uses a finer step.
#[test]
fn gradient_check_vgg_backbone() {
    let report = check_architecture(ArchitectureKind::SingleUNet, BackboneKind::CompactVgg, 1e-5).unwrap();
    assert!(report.pass, "{report:?}");
}
