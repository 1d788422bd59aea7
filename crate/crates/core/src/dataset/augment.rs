use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SequenceSample;
use crate::raster::Raster;

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const MAX_SHIFT_FRACTION: f64 = 0.1;

/// One geometric transform: flips, then a rotation about the patch center,
/// then an integer shift. Uncovered pixels are filled with 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotation_deg: f64,
    /// `(rows, cols)` shift; positive moves content down/right.
    pub shift_px: (i32, i32),
}

impl AugmentParams {
    pub fn is_identity(&self) -> bool {
        !self.flip_h && !self.flip_v && self.rotation_deg == 0.0 && self.shift_px == (0, 0)
    }

    /// Uniform draw within the documented bounds for a `side` patch.
    pub fn random(rng: &mut impl Rng, side: usize) -> AugmentParams {
        let max_shift = (MAX_SHIFT_FRACTION * side as f64).floor() as i32;
        AugmentParams {
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
            rotation_deg: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            shift_px: (
                rng.gen_range(-max_shift..=max_shift),
                rng.gen_range(-max_shift..=max_shift),
            ),
        }
    }

    /// Clamps rotation and shift into their bounds for a `side` patch.
    pub fn clamped(mut self, side: usize) -> AugmentParams {
        let max_shift = (MAX_SHIFT_FRACTION * side as f64).floor() as i32;
        let r = if self.rotation_deg.is_finite() { self.rotation_deg } else { 0.0 };
        self.rotation_deg = r.clamp(-MAX_ROTATION_DEG, MAX_ROTATION_DEG);
        self.shift_px.0 = self.shift_px.0.clamp(-max_shift, max_shift);
        self.shift_px.1 = self.shift_px.1.clamp(-max_shift, max_shift);
        self
    }

    /// Source coordinate `(row, col)` that lands on output pixel `(r, c)`.
    fn source(&self, h: usize, w: usize, r: usize, c: usize) -> (f64, f64) {
        let mut y = r as f64 - self.shift_px.0 as f64;
        let mut x = c as f64 - self.shift_px.1 as f64;
        if self.rotation_deg != 0.0 {
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let (s, co) = (-self.rotation_deg.to_radians()).sin_cos();
            let (dx, dy) = (x - cx, y - cy);
            x = cx + co * dx - s * dy;
            y = cy + s * dx + co * dy;
        }
        if self.flip_h {
            x = w as f64 - 1.0 - x;
        }
        if self.flip_v {
            y = h as f64 - 1.0 - y;
        }
        (y, x)
    }

    fn warp(&self, src: &Raster, nearest: bool) -> Raster {
        let (h, w, ch) = src.dims();
        let mut values = Vec::with_capacity(h * w * ch);
        let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
        for r in 0..h {
            for c in 0..w {
                let (y, x) = self.source(h, w, r, c);
                if nearest {
                    let (yi, xi) = (y.round() as isize, x.round() as isize);
                    for k in 0..ch {
                        values.push(if inside(yi, xi) { src.get(yi as usize, xi as usize, k) } else { 0.0 });
                    }
                    continue;
                }
                let (y0, x0) = (y.floor(), x.floor());
                let (fy, fx) = (y - y0, x - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                for k in 0..ch {
                    let mut acc = 0.0;
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            let (yy, xx) = (y0 + dy, x0 + dx);
                            let wgt = wy * wx;
                            if wgt != 0.0 && inside(yy, xx) {
                                acc += wgt * src.get(yy as usize, xx as usize, k);
                            }
                        }
                    }
                    values.push(acc);
                }
            }
        }
        Raster::new(h, w, ch, values).expect("warp preserves finiteness")
    }
}

/// Applies one transform to every input (bilinear) and to the target
/// (nearest neighbour). Photometric values are never altered.
pub fn augment_sequence(sample: &SequenceSample, params: &AugmentParams) -> SequenceSample {
    let params = params.clamped(sample.target.height().min(sample.target.width()));
    if params.is_identity() {
        return sample.clone();
    }
    SequenceSample {
        inputs: sample.inputs.iter().map(|r| params.warp(r, false)).collect(),
        target: params.warp(&sample.target, true),
        provenance: sample.provenance.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Provenance, TaskKind};
    use proptest::prelude::*;

    fn sample(side: usize) -> SequenceSample {
        let img = |k: usize| {
            Raster::from_fn(side, side, 4, |r, c, ch| ((r * 31 + c * 7 + ch * 3 + k) % 17) as f64 / 16.0).unwrap()
        };
        let mask = Raster::from_fn(side, side, 1, |r, c, _| ((r / 3 + c / 5) % 3 == 0) as u8 as f64).unwrap();
        SequenceSample::new(
            vec![img(0), img(1), img(2)],
            mask,
            Provenance {
                field_id: "x".into(),
                row: 0,
                col: 0,
                task: TaskKind::Detection,
            },
        )
        .unwrap()
    }

    #[test]
    fn identity_is_bit_exact() {
        let s = sample(32);
        assert_eq!(augment_sequence(&s, &AugmentParams::default()), s);
    }

    #[test]
    fn horizontal_flip_mirrors_columns() {
        let s = sample(32);
        let p = AugmentParams {
            flip_h: true,
            ..Default::default()
        };
        let out = augment_sequence(&s, &p);
        for (a, b) in out.inputs.iter().chain([&out.target]).zip(s.inputs.iter().chain([&s.target])) {
            for r in 0..32 {
                for c in 0..32 {
                    assert_eq!(a.pixel(r, c), b.pixel(r, 31 - c));
                }
            }
        }
        assert_eq!(augment_sequence(&out, &p), s);
    }

    #[test]
    fn shift_moves_content_and_pads_with_zero() {
        let s = sample(32);
        let p = AugmentParams {
            shift_px: (2, -3),
            ..Default::default()
        };
        let out = augment_sequence(&s, &p);
        assert_eq!(out.inputs[0].pixel(5, 5), s.inputs[0].pixel(3, 8));
        assert!(out.inputs[1].pixel(0, 0).iter().all(|&v| v == 0.0));
        assert!(out.inputs[1].pixel(10, 31).iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn flips_preserve_positive_count(fh: bool, fv: bool) {
            let s = sample(32);
            let p = AugmentParams { flip_h: fh, flip_v: fv, ..Default::default() };
            let out = augment_sequence(&s, &p);
            prop_assert_eq!(out.target.count_positive(), s.target.count_positive());
        }

        #[test]
        fn masks_stay_binary(seed in 0u64..500) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = AugmentParams::random(&mut rng, 32);
            let out = augment_sequence(&sample(32), &p);
            prop_assert!(out.target.is_binary());
            prop_assert!(out.inputs.iter().all(|r| r.values().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }
}
