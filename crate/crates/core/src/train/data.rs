use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainConfig;
use crate::dataset::{
    augment_sequence, resize_bilinear, resize_nearest, sample_patch, AugmentParams, FieldSequence, Provenance,
    SamplingStrategy, SequenceSample,
};
use crate::error::{Error, Result};
use crate::raster::{build_representation, InputRepresentation, Raster};
use crate::zoo::ArchitectureKind;

/// Worker threads for sample preparation, from `NDS_NUM_WORKERS` (default 1).
pub fn worker_count() -> usize {
    std::env::var("NDS_NUM_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th draw of `epoch`; independent of worker count.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch as u64) ^ index as u64)
}

/// Field visiting order of one epoch.
pub fn epoch_order(fields: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..fields).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch, usize::MAX));
    order.shuffle(&mut rng);
    order
}

/// Replaces RGBN inputs with the configured representation.
pub fn represent(sample: SequenceSample, repr: InputRepresentation) -> Result<SequenceSample> {
    let inputs = sample
        .inputs
        .iter()
        .map(|r| build_representation(r, repr))
        .collect::<Result<Vec<_>>>()?;
    Ok(SequenceSample { inputs, ..sample })
}

/// One randomized training patch. Wise cropping on a field without any
/// positive pixel falls back to a random crop of the same side.
pub fn training_sample(field: &FieldSequence, cfg: &TrainConfig, seed: u64) -> Result<SequenceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = match sample_patch(field, cfg.task, cfg.strategy, &mut rng) {
        Err(Error::NoPositiveRegion { .. }) => {
            let side = cfg.strategy.side();
            sample_patch(field, cfg.task, SamplingStrategy::RandomCrop { side }, &mut rng)?
        }
        other => other?,
    };
    let sample = if cfg.augment {
        let params = AugmentParams::random(&mut rng, sample.side().0);
        augment_sequence(&sample, &params)
    } else {
        sample
    };
    represent(sample, cfg.repr)
}

/// The deterministic center patch (or full rescale) of a field.
pub fn center_sample(field: &FieldSequence, cfg: &TrainConfig) -> Result<SequenceSample> {
    let flights = field.task_flights(cfg.task)?;
    let side = cfg.strategy.side();
    let provenance = |row, col| Provenance {
        field_id: field.field_id.clone(),
        row,
        col,
        task: cfg.task,
    };
    let sample = match cfg.strategy {
        SamplingStrategy::FullRescale { .. } => SequenceSample::new(
            flights.iter().map(|f| resize_bilinear(f, side, side)).collect(),
            resize_nearest(&field.target_mask, side, side),
            provenance(0, 0),
        )?,
        _ => {
            let (h, w) = (field.height(), field.width());
            if h < side || w < side {
                return Err(Error::Validation(format!(
                    "field {} is {h}x{w}, smaller than patch side {side}",
                    field.field_id
                )));
            }
            let (row, col) = ((h - side) / 2, (w - side) / 2);
            SequenceSample::new(
                flights
                    .iter()
                    .map(|f| f.window(row, col, side, side))
                    .collect::<Result<Vec<_>>>()?,
                field.target_mask.window(row, col, side, side)?,
                provenance(row, col),
            )?
        }
    };
    represent(sample, cfg.repr)
}

/// The rasters a model reads from a sample, oldest first: the most recent
/// flight alone for single-timestep models, all three otherwise.
pub fn model_inputs(arch: ArchitectureKind, sample: &SequenceSample) -> Vec<&Raster> {
    let n = sample.inputs.len();
    sample.inputs[n - arch.input_count()..].iter().collect()
}

/// Evaluates `make(i)` for `i in 0..n` on `workers` threads, keeping order.
pub fn parallel_map<R: Send>(n: usize, workers: usize, make: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(make).collect();
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let make = &make;
                scope.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(make).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sample worker panicked"))
            .collect()
    })
}
