use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FieldSequence, Provenance, SequenceSample, TaskKind};
use crate::error::{Error, Result};
use crate::raster::Raster;

/// How a training patch is drawn from a field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingStrategy {
    /// Bilinear resize of the whole field to `side × side`.
    FullRescale { side: usize },
    /// A uniformly random `side × side` window.
    RandomCrop { side: usize },
    /// A window containing at least one positive target pixel.
    WiseCrop { side: usize },
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        SamplingStrategy::WiseCrop { side: 512 }
    }
}

impl SamplingStrategy {
    pub fn side(self) -> usize {
        match self {
            SamplingStrategy::FullRescale { side }
            | SamplingStrategy::RandomCrop { side }
            | SamplingStrategy::WiseCrop { side } => side,
        }
    }

    pub fn validate(self) -> Result<()> {
        let side = self.side();
        if side < 32 || !side.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "patch side must be >= 32 and divisible by 16, got {side}"
            )));
        }
        Ok(())
    }
}

/// Bilinear resize with half-pixel centers; constant rasters stay constant.
pub fn resize_bilinear(r: &Raster, out_h: usize, out_w: usize) -> Raster {
    let (h, w, c) = r.dims();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let axis = |dst: usize, scale: f64, n: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, sx, w)).collect();
    let mut values = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, sy, h);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let top = r.get(y0, x0, ch) * (1.0 - fx) + r.get(y0, x1, ch) * fx;
                let bottom = r.get(y1, x0, ch) * (1.0 - fx) + r.get(y1, x1, ch) * fx;
                values.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Raster::new(out_h, out_w, c, values).expect("resize preserves finiteness")
}

/// Nearest-neighbour resize; keeps masks binary.
pub fn resize_nearest(r: &Raster, out_h: usize, out_w: usize) -> Raster {
    let (h, w, c) = r.dims();
    let pick = |dst: usize, n_out: usize, n: usize| (((dst as f64 + 0.5) * n as f64 / n_out as f64) as usize).min(n - 1);
    Raster::from_fn(out_h, out_w, c, |y, x, ch| r.get(pick(y, out_h, h), pick(x, out_w, w), ch))
        .expect("resize preserves finiteness")
}

/// Chooses the top-left corner of a `side × side` window for a strategy.
/// Full rescale always reports `(0, 0)`.
pub fn select_window(
    seq: &FieldSequence,
    strategy: SamplingStrategy,
    rng: &mut impl Rng,
) -> Result<(usize, usize)> {
    let (h, w) = (seq.height(), seq.width());
    let side = strategy.side();
    if let SamplingStrategy::FullRescale { .. } = strategy {
        return Ok((0, 0));
    }
    if h < side || w < side {
        return Err(Error::Validation(format!(
            "field {} is {h}x{w}, smaller than patch side {side}",
            seq.field_id
        )));
    }
    match strategy {
        SamplingStrategy::RandomCrop { .. } => Ok((rng.gen_range(0..=h - side), rng.gen_range(0..=w - side))),
        SamplingStrategy::WiseCrop { .. } => {
            let positives = seq.target_mask.positive_pixels();
            if positives.is_empty() {
                return Err(Error::NoPositiveRegion {
                    field_id: seq.field_id.clone(),
                });
            }
            let (pr, pc) = positives[rng.gen_range(0..positives.len())];
            // Origins whose window [o, o + side) contains the pixel.
            let range = |p: usize, n: usize| (p.saturating_sub(side - 1), p.min(n - side));
            let (r0, r1) = range(pr, h);
            let (c0, c1) = range(pc, w);
            Ok((rng.gen_range(r0..=r1), rng.gen_range(c0..=c1)))
        }
        SamplingStrategy::FullRescale { .. } => unreachable!(),
    }
}

/// Draws one co-registered patch: the same window (or rescale) is applied
/// to every task flight and to the target mask.
pub fn sample_patch(
    seq: &FieldSequence,
    task: TaskKind,
    strategy: SamplingStrategy,
    rng: &mut impl Rng,
) -> Result<SequenceSample> {
    let flights = seq.task_flights(task)?;
    let side = strategy.side();
    let (row, col) = select_window(seq, strategy, rng)?;
    let (inputs, target) = match strategy {
        SamplingStrategy::FullRescale { .. } => (
            flights.iter().map(|f| resize_bilinear(f, side, side)).collect(),
            resize_nearest(&seq.target_mask, side, side),
        ),
        _ => (
            flights
                .iter()
                .map(|f| f.window(row, col, side, side))
                .collect::<Result<Vec<_>>>()?,
            seq.target_mask.window(row, col, side, side)?,
        ),
    };
    SequenceSample::new(
        inputs,
        target,
        Provenance {
            field_id: seq.field_id.clone(),
            row,
            col,
            task,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Flight;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq_with_mask(side: usize, positives: &[(usize, usize)]) -> FieldSequence {
        let mut mask = Raster::zeros(side, side, 1);
        for &(r, c) in positives {
            mask.set(r, c, 0, 1.0);
        }
        let flights = (0..3)
            .map(|k| Flight {
                index: k,
                raster: Raster::from_fn(side, side, 4, |r, c, ch| ((r * 7 + c * 3 + ch + k as usize) % 11) as f64 / 10.0)
                    .unwrap(),
            })
            .collect();
        FieldSequence::new("s", flights, mask, 2, 1.0).unwrap()
    }

    #[test]
    fn wise_crop_contains_single_positive() {
        let seq = seq_with_mask(96, &[(70, 5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let s = sample_patch(&seq, TaskKind::Detection, SamplingStrategy::WiseCrop { side: 32 }, &mut rng).unwrap();
            let p = &s.provenance;
            assert!(p.row <= 70 && 70 < p.row + 32 && p.col <= 5 && 5 < p.col + 32);
            assert_eq!(s.target.count_positive(), 1);
        }
    }

    #[test]
    fn wise_crop_on_clean_field_errors() {
        let seq = seq_with_mask(64, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = sample_patch(&seq, TaskKind::Detection, SamplingStrategy::WiseCrop { side: 32 }, &mut rng);
        assert!(matches!(err, Err(Error::NoPositiveRegion { .. })));
    }

    #[test]
    fn random_crop_on_exact_field_is_full_field() {
        let seq = seq_with_mask(32, &[(3, 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = sample_patch(&seq, TaskKind::Detection, SamplingStrategy::RandomCrop { side: 32 }, &mut rng).unwrap();
        assert_eq!((s.provenance.row, s.provenance.col), (0, 0));
        assert_eq!(s.inputs[2], seq.flights[2].raster);
        let small = sample_patch(&seq, TaskKind::Detection, SamplingStrategy::RandomCrop { side: 48 }, &mut rng);
        assert!(matches!(small, Err(Error::Validation(_))));
    }

    #[test]
    fn rescale_preserves_constants_and_binarity() {
        let r = Raster::filled(100, 60, 4, 0.37);
        let out = resize_bilinear(&r, 32, 32);
        assert!(out.values().iter().all(|&v| (v - 0.37).abs() < 1e-12));
        let seq = seq_with_mask(80, &[(10, 10), (11, 10), (50, 70)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_patch(&seq, TaskKind::Detection, SamplingStrategy::FullRescale { side: 32 }, &mut rng).unwrap();
        assert!(s.target.is_binary());
        assert_eq!(s.side(), (32, 32));
    }

    #[test]
    fn identity_resize_is_exact() {
        let r = Raster::from_fn(8, 8, 2, |r, c, ch| (r * 16 + c * 2 + ch) as f64).unwrap();
        assert_eq!(resize_bilinear(&r, 8, 8), r);
        assert_eq!(resize_nearest(&r, 8, 8), r);
    }

    #[test]
    fn strategy_side_validation() {
        assert!(SamplingStrategy::WiseCrop { side: 32 }.validate().is_ok());
        assert!(SamplingStrategy::RandomCrop { side: 40 }.validate().is_err());
        assert!(SamplingStrategy::FullRescale { side: 16 }.validate().is_err());
    }
}
