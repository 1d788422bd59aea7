use serde::{Deserialize, Serialize};

use super::data::{model_inputs, represent};
use crate::dataset::{
    resize_bilinear, resize_nearest, stitch_tiles, tile_plan, FieldSequence, Provenance, SamplingStrategy,
    SequenceSample, TaskKind, Window,
};
use crate::error::{Error, Result};
use crate::loss::{combined_with_grad, LossConfig, Overlap};
use crate::nn::{Mode, ParameterStore};
use crate::raster::{InputRepresentation, Raster};
use crate::zoo::{forward_batch, Model};

/// How a field is cut into model-sized inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tiling {
    /// Overlapping `side × side` tiles, averaged where they overlap.
    Tiles { side: usize, overlap: usize },
    /// The whole field resized to `side × side`; predictions are resized
    /// back to the field extent.
    Rescale { side: usize },
}

impl Tiling {
    /// The tiling matching a sampling strategy: rescaling stays rescaling,
    /// crops become tiles of the crop side with 1/8 overlap.
    pub fn for_strategy(strategy: SamplingStrategy) -> Tiling {
        match strategy {
            SamplingStrategy::FullRescale { side } => Tiling::Rescale { side },
            SamplingStrategy::RandomCrop { side } | SamplingStrategy::WiseCrop { side } => Tiling::Tiles {
                side,
                overlap: side / 8,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalScope {
    /// Every model-sized tile scored on its own.
    Tile,
    /// Tiles stitched back into whole fields, scored per field.
    Field,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub timestep: String,
    pub f1: f64,
    pub iou: f64,
    pub loss: f64,
}

/// Scores per model output, most recent output first. IOU and F1 pool
/// pixel counts over the split; losses are means over scored units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scope: EvalScope,
    pub rows: Vec<MetricsRow>,
    pub total_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub tile: MetricsReport,
    pub field: MetricsReport,
}

/// Infer-mode masks for each sample, oldest output first.
pub fn predict_batch(model: &Model, store: &ParameterStore<f32>, samples: &[SequenceSample]) -> Result<Vec<Vec<Raster>>> {
    let arch = model.arch();
    let inputs: Vec<Vec<&Raster>> = samples.iter().map(|s| model_inputs(arch, s)).collect();
    Ok(forward_batch(model, store, &inputs, Mode::Infer)?
        .into_iter()
        .map(|p| p.masks)
        .collect())
}

/// Per-tile samples and predictions of one field, plus every output
/// stitched to the full field extent.
pub struct FieldPrediction {
    pub tiles: Vec<(SequenceSample, Vec<Raster>)>,
    pub stitched: Vec<Raster>,
}

#[allow(clippy::too_many_arguments)]
pub fn field_predictions(
    model: &Model,
    store: &ParameterStore<f32>,
    seq: &FieldSequence,
    task: TaskKind,
    repr: InputRepresentation,
    tiling: Tiling,
    batch_size: usize,
) -> Result<FieldPrediction> {
    let flights = seq.task_flights(task)?;
    let (h, w) = (seq.height(), seq.width());
    let provenance = |row, col| Provenance {
        field_id: seq.field_id.clone(),
        row,
        col,
        task,
    };
    let (windows, samples): (Vec<Window>, Vec<SequenceSample>) = match tiling {
        Tiling::Rescale { side } => {
            let s = SequenceSample::new(
                flights.iter().map(|f| resize_bilinear(f, side, side)).collect(),
                resize_nearest(&seq.target_mask, side, side),
                provenance(0, 0),
            )?;
            let full = Window {
                row: 0,
                col: 0,
                height: h,
                width: w,
            };
            (vec![full], vec![represent(s, repr)?])
        }
        Tiling::Tiles { side, overlap } => {
            let plan = tile_plan(h, w, side, overlap)?;
            let samples = plan
                .iter()
                .map(|win| {
                    let s = SequenceSample::new(
                        flights
                            .iter()
                            .map(|f| f.window(win.row, win.col, side, side))
                            .collect::<Result<Vec<_>>>()?,
                        seq.target_mask.window(win.row, win.col, side, side)?,
                        provenance(win.row, win.col),
                    )?;
                    represent(s, repr)
                })
                .collect::<Result<Vec<_>>>()?;
            (plan, samples)
        }
    };
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        preds.extend(predict_batch(model, store, chunk)?);
    }
    let outputs = preds.first().map_or(0, Vec::len);
    let stitched = (0..outputs)
        .map(|k| match tiling {
            Tiling::Rescale { .. } => Ok(resize_bilinear(&preds[0][k], h, w)),
            Tiling::Tiles { .. } => {
                let tiles: Vec<(Window, Raster)> = windows.iter().zip(&preds).map(|(win, p)| (*win, p[k].clone())).collect();
                stitch_tiles(&tiles, h, w)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldPrediction {
        tiles: samples.into_iter().zip(preds).collect(),
        stitched,
    })
}

/// Full-field probability map of the most recent output.
pub fn predict_field(
    model: &Model,
    store: &ParameterStore<f32>,
    seq: &FieldSequence,
    task: TaskKind,
    repr: InputRepresentation,
    tiling: Tiling,
) -> Result<Raster> {
    let mut p = field_predictions(model, store, seq, task, repr, tiling, 4)?;
    p.stitched
        .pop()
        .ok_or_else(|| Error::State("model produced no output".into()))
}

#[derive(Default)]
struct Accumulator {
    overlap: Vec<Overlap>,
    loss: Vec<f64>,
    units: usize,
}

impl Accumulator {
    fn add(&mut self, preds: &[Raster], target: &Raster, cfg: &LossConfig) {
        if self.overlap.is_empty() {
            self.overlap = vec![Overlap::default(); preds.len()];
            self.loss = vec![0.0; preds.len()];
        }
        for (k, p) in preds.iter().enumerate() {
            let o = Overlap::count(p.values(), target.values(), cfg.eval_threshold);
            let acc = &mut self.overlap[k];
            acc.intersection += o.intersection;
            acc.predicted += o.predicted;
            acc.actual += o.actual;
            self.loss[k] += combined_with_grad(p.values(), target.values(), cfg).0;
        }
        self.units += 1;
    }

    fn report(&self, scope: EvalScope, task: TaskKind) -> MetricsReport {
        let labels = task.labels();
        let n = self.units.max(1) as f64;
        let outputs = self.overlap.len();
        // Outputs are stored oldest first; rows list the most recent first.
        let rows: Vec<MetricsRow> = (0..outputs)
            .rev()
            .enumerate()
            .map(|(r, k)| MetricsRow {
                timestep: labels[r].clone(),
                f1: self.overlap[k].f1(),
                iou: self.overlap[k].iou(),
                loss: self.loss[k] / n,
            })
            .collect();
        let total_loss = rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64;
        MetricsReport {
            scope,
            rows,
            total_loss,
        }
    }
}

/// Scores every output against the target mask, on tiles and on stitched
/// fields. Row `t` is the most recent output; `t-1`, `t-2` (or the task's
/// offset labels) follow.
pub fn evaluate(
    model: &Model,
    store: &ParameterStore<f32>,
    fields: &[FieldSequence],
    task: TaskKind,
    repr: InputRepresentation,
    tiling: Tiling,
    loss: &LossConfig,
) -> Result<Evaluation> {
    if fields.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    if model.config().flight_channels() != repr.channels() {
        return Err(Error::Config(format!(
            "model expects {} channels per flight but representation {repr:?} has {}",
            model.config().flight_channels(),
            repr.channels()
        )));
    }
    let mut tile = Accumulator::default();
    let mut field = Accumulator::default();
    for seq in fields {
        let p = field_predictions(model, store, seq, task, repr, tiling, 4)?;
        for (sample, preds) in &p.tiles {
            tile.add(preds, &sample.target, loss);
        }
        field.add(&p.stitched, &seq.target_mask, loss);
    }
    Ok(Evaluation {
        tile: tile.report(EvalScope::Tile, task),
        field: field.report(EvalScope::Field, task),
    })
}
