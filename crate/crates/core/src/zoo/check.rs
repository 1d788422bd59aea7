use super::{rasters_to_tensor, ArchitectureKind, BackboneKind, Model, ModelConfig};
use crate::error::Result;
use crate::loss::{sequence_with_grad, LossConfig};
use crate::nn::gradcheck::{finite_diff_check, GradCheckReport, GraphObjective, TOLERANCE};
#[cfg(doc)]
use crate::nn::gradcheck::STEP;
use crate::nn::{Graph, Tensor, Var};
use crate::raster::Raster;

/// Side of the inputs used by [`check_architecture`].
pub const CHECK_SIDE: usize = 16;
const CHECK_BATCH: usize = 4;

/// A sample-specific smooth pattern plus pixel noise, in [0.05, 0.95].
fn noisy(h: usize, w: usize, c: usize, seed: u64) -> Result<Raster> {
    let s = seed as f64;
    let (fr, fc, level) = (0.3 + 0.17 * (s * 1.7).sin(), 0.25 + 0.2 * (s * 2.3).cos(), 0.3 + 0.4 * (s * 0.77).sin().abs());
    Raster::from_fn(h, w, c, |r, col, ch| {
        let k = ((r * w + col) * c + ch) as f64 + s * 1013.0;
        let noise = ((k * 12.9898).sin() * 43758.5453).rem_euclid(1.0) - 0.5;
        let wave = (r as f64 * fr + col as f64 * fc + ch as f64 + s).sin();
        (level + 0.25 * wave + 0.2 * noise).clamp(0.05, 0.95)
    })
}

/// The training objective against a fixed striped target: per sample the
/// mean focal + dice over outputs, then the batch mean.
fn training_loss(outputs: &[&Tensor<f64>]) -> (f64, Vec<Tensor<f64>>) {
    let batch = outputs[0].shape()[0];
    let per = outputs[0].len() / batch;
    let target: Vec<f64> = (0..per).map(|i| ((i / 3 + i / 29) % 2) as f64).collect();
    let cfg = LossConfig::default();
    let mut grads: Vec<Vec<f64>> = outputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
    let mut total = 0.0;
    for s in 0..batch {
        let preds: Vec<&[f64]> = outputs.iter().map(|t| &t.data()[s * per..(s + 1) * per]).collect();
        let (loss, g) = sequence_with_grad(&preds, &target, &cfg);
        total += loss / batch as f64;
        for (dst, g) in grads.iter_mut().zip(g) {
            dst.extend(g.into_iter().map(|v| v / batch as f64));
        }
    }
    let grads = outputs.iter().zip(grads).map(|(t, g)| Tensor::new(t.shape(), g)).collect();
    (total, grads)
}

/// Finite-difference check of every trainable parameter of the tiny
/// configuration of `arch`, in train mode on a batch of four 16×16
/// sequences. Intermediate supervision is switched on where the
/// architecture supports it so auxiliary outputs are covered. The
/// standard step is [`STEP`].
pub fn check_architecture(arch: ArchitectureKind, backbone: BackboneKind, step: f64) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        intermediate_supervision: matches!(arch, ArchitectureKind::PreLstmConcat),
        ..ModelConfig::tiny(arch, backbone)
    };
    let (model, store) = Model::build::<f64>(&cfg)?;
    let inputs = (0..arch.input_count())
        .map(|i| {
            // Independent samples keep batch statistics at the 1×1
            // bottleneck well conditioned.
            let batch = (0..CHECK_BATCH)
                .map(|k| noisy(CHECK_SIDE, CHECK_SIDE, cfg.flight_channels(), (10 * i + k) as u64))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Raster> = batch.iter().collect();
            rasters_to_tensor::<f64>(&refs)
        })
        .collect::<Result<Vec<Tensor<f64>>>>()?;
    let objective = GraphObjective {
        forward: |g: &mut Graph<'_, f64>| -> Result<Vec<Var>> {
            let xs: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let out = model.forward(g, &xs)?;
            Ok(out.masks.into_iter().chain(out.aux).collect())
        },
        loss: training_loss,
    };
    finite_diff_check(&store, &objective, step, TOLERANCE)
}
