//! Field sequences, manifests, splitting, patch sampling, augmentation and
//! tile stitching.

mod augment;
pub mod io;
mod sampling;
mod split;
mod stitch;

use serde::{Deserialize, Serialize};

pub use augment::{augment_sequence, AugmentParams};
pub use io::{load_manifest, ManifestEntry, ManifestFlight};
pub use sampling::{resize_bilinear, resize_nearest, sample_patch, select_window, SamplingStrategy};
pub use split::{split_dataset, split_sizes};
pub use stitch::{stitch_tiles, tile_plan, Window};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// One aerial capture of a field.
#[derive(Clone, Debug, PartialEq)]
pub struct Flight {
    pub index: i64,
    pub raster: Raster,
}

/// All flights of one field plus the annotated mask of its target flight.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSequence {
    pub field_id: String,
    pub flights: Vec<Flight>,
    pub target_mask: Raster,
    pub target_flight_index: i64,
    pub resolution_m_per_px: f64,
}

impl FieldSequence {
    /// Validates ordering, extents, band count and mask binarity.
    pub fn new(
        field_id: impl Into<String>,
        flights: Vec<Flight>,
        target_mask: Raster,
        target_flight_index: i64,
        resolution_m_per_px: f64,
    ) -> Result<Self> {
        let field_id = field_id.into();
        let fail = |msg: String| Err(Error::Validation(format!("field {field_id}: {msg}")));
        if flights.is_empty() {
            return fail("no flights".into());
        }
        if flights.windows(2).any(|w| w[0].index >= w[1].index) {
            return fail("flight indices must be strictly ascending".into());
        }
        if target_mask.channels() != 1 || !target_mask.is_binary() {
            return fail("target mask must be a single-channel {0,1} raster".into());
        }
        for f in &flights {
            if f.raster.channels() != 4 {
                return fail(format!(
                    "flight {} has {} channels, expected RGBN",
                    f.index,
                    f.raster.channels()
                ));
            }
            if !f.raster.same_extent(&target_mask) {
                return fail(format!(
                    "flight {} is {}x{} but the mask is {}x{}",
                    f.index,
                    f.raster.height(),
                    f.raster.width(),
                    target_mask.height(),
                    target_mask.width()
                ));
            }
        }
        if !(resolution_m_per_px > 0.0) {
            return fail("resolution must be positive".into());
        }
        Ok(FieldSequence {
            field_id,
            flights,
            target_mask,
            target_flight_index,
            resolution_m_per_px,
        })
    }

    pub fn height(&self) -> usize {
        self.target_mask.height()
    }

    pub fn width(&self) -> usize {
        self.target_mask.width()
    }

    pub fn flight(&self, index: i64) -> Option<&Flight> {
        self.flights
            .binary_search_by_key(&index, |f| f.index)
            .ok()
            .map(|i| &self.flights[i])
    }

    /// The flights a task reads, oldest first.
    pub fn task_flights(&self, task: TaskKind) -> Result<Vec<&Raster>> {
        task.offsets()
            .iter()
            .rev()
            .map(|&k| {
                let idx = self.target_flight_index - k as i64;
                self.flight(idx).map(|f| &f.raster).ok_or_else(|| {
                    Error::Validation(format!(
                        "field {}: task {} needs flight {idx} (t-{k}), which is missing",
                        self.field_id,
                        task.name()
                    ))
                })
            })
            .collect()
    }
}

/// Which flight window feeds the model; offsets count back from the target
/// flight `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Detection,
    #[serde(alias = "prediction_1_3", alias = "t1:3")]
    Prediction13,
    #[serde(alias = "prediction_2_4", alias = "t2:4")]
    Prediction24,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Detection, TaskKind::Prediction13, TaskKind::Prediction24];

    /// Offsets from most recent to oldest.
    pub fn offsets(self) -> [usize; 3] {
        match self {
            TaskKind::Detection => [0, 1, 2],
            TaskKind::Prediction13 => [1, 2, 3],
            TaskKind::Prediction24 => [2, 3, 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Detection => "detection",
            TaskKind::Prediction13 => "prediction13",
            TaskKind::Prediction24 => "prediction24",
        }
    }

    /// Row labels for per-output reports, most recent first.
    pub fn labels(self) -> [String; 3] {
        self.offsets().map(|k| if k == 0 { "t".to_string() } else { format!("t-{k}") })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub field_id: String,
    pub row: usize,
    pub col: usize,
    pub task: TaskKind,
}

/// Three co-registered input patches (oldest first) and the target mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub inputs: Vec<Raster>,
    pub target: Raster,
    pub provenance: Provenance,
}

impl SequenceSample {
    pub fn new(inputs: Vec<Raster>, target: Raster, provenance: Provenance) -> Result<Self> {
        if inputs.len() != 3 || inputs.iter().any(|r| !r.same_extent(&target)) {
            return Err(Error::Validation(format!(
                "sample from {} needs 3 inputs matching the target extent",
                provenance.field_id
            )));
        }
        Ok(SequenceSample {
            inputs,
            target,
            provenance,
        })
    }

    pub fn side(&self) -> (usize, usize) {
        (self.target.height(), self.target.width())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn field(n: usize, side: usize, first_index: i64) -> FieldSequence {
        let flights = (0..n)
            .map(|k| Flight {
                index: first_index + k as i64,
                raster: Raster::filled(side, side, 4, 0.1 * (k + 1) as f64),
            })
            .collect();
        FieldSequence::new("f", flights, Raster::zeros(side, side, 1), first_index + n as i64 - 1, 0.5).unwrap()
    }

    #[test]
    fn offsets_resolve_from_target_index() {
        let seq = field(5, 4, 6);
        for task in TaskKind::ALL {
            let flights = seq.task_flights(task).unwrap();
            let k = task.offsets();
            assert_eq!(flights[2], &seq.flight(10 - k[0] as i64).unwrap().raster);
            assert_eq!(flights[0], &seq.flight(10 - k[2] as i64).unwrap().raster);
        }
        let short = field(3, 4, 0);
        assert!(short.task_flights(TaskKind::Prediction13).is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        let f = |i| Flight {
            index: i,
            raster: Raster::zeros(4, 4, 4),
        };
        assert!(FieldSequence::new("a", vec![f(2), f(1)], Raster::zeros(4, 4, 1), 2, 1.0).is_err());
        assert!(FieldSequence::new("a", vec![f(1)], Raster::zeros(3, 4, 1), 1, 1.0).is_err());
        assert!(FieldSequence::new("a", vec![f(1)], Raster::filled(4, 4, 1, 0.5), 1, 1.0).is_err());
    }

    #[test]
    fn labels_follow_offsets() {
        assert_eq!(TaskKind::Detection.labels(), ["t", "t-1", "t-2"]);
        assert_eq!(TaskKind::Prediction24.labels(), ["t-2", "t-3", "t-4"]);
    }
}
