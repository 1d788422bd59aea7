//! Multi-channel rasters and normalized-difference vegetation indices.
//!
//! A [`Raster`] stores reflectance (or probability) values in row-major
//! `(row, col, channel)` order. Four-band imagery is always stored as
//! Red, Green, Blue, NIR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RED: usize = 0;
pub const GREEN: usize = 1;
pub const BLUE: usize = 2;
pub const NIR: usize = 3;

/// A dense `height × width × channels` grid of finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Validation(format!(
                "raster dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Validation(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {} at flat index {i}",
                values[i]
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0 && value.is_finite());
        Raster {
            height,
            width,
            channels,
            values: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// Builds a raster by evaluating `f(row, col, channel)` for every cell.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    values.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// True when the two rasters share height and width.
    pub fn same_extent(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    fn offset(&self, row: usize, col: usize, channel: usize) -> usize {
        debug_assert!(row < self.height && col < self.width && channel < self.channels);
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.values[self.offset(row, col, channel)]
    }

    /// Writes one value. Panics on a non-finite value.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        assert!(value.is_finite(), "raster values must be finite");
        let i = self.offset(row, col, channel);
        self.values[i] = value;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.offset(row, col, 0);
        &self.values[i..i + self.channels]
    }

    /// Extracts one channel as a single-channel raster.
    pub fn channel(&self, channel: usize) -> Result<Raster> {
        if channel >= self.channels {
            return Err(Error::Representation(format!(
                "channel {channel} requested from a {}-channel raster",
                self.channels
            )));
        }
        let values = self
            .values
            .chunks_exact(self.channels)
            .map(|px| px[channel])
            .collect();
        Ok(Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            values,
        })
    }

    /// Concatenates rasters along the channel axis.
    pub fn stack_channels(parts: &[&Raster]) -> Result<Raster> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("cannot stack zero rasters".into()))?;
        if let Some(bad) = parts.iter().find(|p| !p.same_extent(first)) {
            return Err(Error::Validation(format!(
                "cannot stack {}x{} with {}x{}",
                first.height, first.width, bad.height, bad.width
            )));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut values = Vec::with_capacity(first.height * first.width * channels);
        for px in 0..first.height * first.width {
            for p in parts {
                values.extend_from_slice(&p.values[px * p.channels..(px + 1) * p.channels]);
            }
        }
        Ok(Raster {
            height: first.height,
            width: first.width,
            channels,
            values,
        })
    }

    /// Copies the `height × width` window whose top-left corner is `(row, col)`.
    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Raster> {
        if height == 0 || width == 0 || row + height > self.height || col + width > self.width {
            return Err(Error::Validation(format!(
                "window {height}x{width} at ({row},{col}) exceeds raster {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width * self.channels);
        for r in row..row + height {
            let start = self.offset(r, col, 0);
            values.extend_from_slice(&self.values[start..start + width * self.channels]);
        }
        Ok(Raster {
            height,
            width,
            channels: self.channels,
            values,
        })
    }

    /// Applies `f` to every value. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        assert!(values.iter().all(|v| v.is_finite()), "map produced a non-finite value");
        Raster {
            values,
            ..*self
        }
    }

    /// Number of cells whose value exceeds 0.5 (intended for binary masks).
    pub fn count_positive(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }

    /// Row/col coordinates of every positive mask cell in channel 0.
    pub fn positive_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c, 0) > 0.5 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Normalized-difference indices over RGBN reflectance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    /// (NIR − Red) / (NIR + Red)
    Ndvi,
    /// (NIR − Green) / (NIR + Green)
    Gndvi,
    /// (Green − NIR) / (NIR + Green)
    Ndwi,
}

impl IndexKind {
    pub const ALL: [IndexKind; 3] = [IndexKind::Ndvi, IndexKind::Gndvi, IndexKind::Ndwi];

    pub fn name(self) -> &'static str {
        match self {
            IndexKind::Ndvi => "ndvi",
            IndexKind::Gndvi => "gndvi",
            IndexKind::Ndwi => "ndwi",
        }
    }

    /// Evaluates the index for one RGBN pixel. A zero denominator yields 0.
    #[inline]
    pub fn evaluate(self, red: f64, green: f64, nir: f64) -> f64 {
        let (num, den) = match self {
            IndexKind::Ndvi => (nir - red, nir + red),
            IndexKind::Gndvi => (nir - green, nir + green),
            IndexKind::Ndwi => (green - nir, nir + green),
        };
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }
}

/// The input channel layouts compared when choosing what the network sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRepresentation {
    #[default]
    Rgb,
    NdviOnly,
    RgbPlusNdvi,
    RgbPlusGndvi,
    RgbPlusNdwi,
    /// NDVI, GNDVI, NDWI in that order.
    IndexTriple,
}

impl InputRepresentation {
    pub const ALL: [InputRepresentation; 6] = [
        InputRepresentation::Rgb,
        InputRepresentation::NdviOnly,
        InputRepresentation::RgbPlusNdvi,
        InputRepresentation::RgbPlusGndvi,
        InputRepresentation::RgbPlusNdwi,
        InputRepresentation::IndexTriple,
    ];

    pub fn channels(self) -> usize {
        match self {
            InputRepresentation::Rgb => 3,
            InputRepresentation::NdviOnly => 1,
            InputRepresentation::RgbPlusNdvi
            | InputRepresentation::RgbPlusGndvi
            | InputRepresentation::RgbPlusNdwi => 4,
            InputRepresentation::IndexTriple => 3,
        }
    }
}

fn check_rgbn(rgbn: &Raster) -> Result<()> {
    if rgbn.channels() != 4 {
        return Err(Error::Representation(format!(
            "expected 4 channels (R,G,B,NIR), got {}",
            rgbn.channels()
        )));
    }
    if let Some(v) = rgbn.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!(
            "reflectance {v} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Computes a single-channel index raster from an RGBN raster.
pub fn compute_index(kind: IndexKind, rgbn: &Raster) -> Result<Raster> {
    check_rgbn(rgbn)?;
    let values = rgbn
        .values()
        .chunks_exact(4)
        .map(|px| kind.evaluate(px[RED], px[GREEN], px[NIR]))
        .collect();
    Raster::new(rgbn.height(), rgbn.width(), 1, values)
}

/// Assembles the channels of `repr` from an RGBN raster.
pub fn build_representation(rgbn: &Raster, repr: InputRepresentation) -> Result<Raster> {
    check_rgbn(rgbn)?;
    let rgb = || -> Raster {
        let values = rgbn
            .values()
            .chunks_exact(4)
            .flat_map(|px| [px[RED], px[GREEN], px[BLUE]])
            .collect();
        Raster {
            height: rgbn.height(),
            width: rgbn.width(),
            channels: 3,
            values,
        }
    };
    let with_index = |kind| -> Result<Raster> {
        let index = compute_index(kind, rgbn)?;
        Raster::stack_channels(&[&rgb(), &index])
    };
    match repr {
        InputRepresentation::Rgb => Ok(rgb()),
        InputRepresentation::NdviOnly => compute_index(IndexKind::Ndvi, rgbn),
        InputRepresentation::RgbPlusNdvi => with_index(IndexKind::Ndvi),
        InputRepresentation::RgbPlusGndvi => with_index(IndexKind::Gndvi),
        InputRepresentation::RgbPlusNdwi => with_index(IndexKind::Ndwi),
        InputRepresentation::IndexTriple => {
            let ndvi = compute_index(IndexKind::Ndvi, rgbn)?;
            let gndvi = compute_index(IndexKind::Gndvi, rgbn)?;
            let ndwi = compute_index(IndexKind::Ndwi, rgbn)?;
            Raster::stack_channels(&[&ndvi, &gndvi, &ndwi])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pixel(r: f64, g: f64, b: f64, n: f64) -> Raster {
        Raster::new(1, 1, 4, vec![r, g, b, n]).unwrap()
    }

    #[test]
    fn ndvi_hand_value() {
        let out = compute_index(IndexKind::Ndvi, &pixel(0.2, 0.0, 0.0, 0.8)).unwrap();
        assert!((out.get(0, 0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn ndvi_equal_bands_is_zero() {
        for x in [1e-6, 0.3, 1.0] {
            let out = compute_index(IndexKind::Ndvi, &pixel(x, 0.5, 0.5, x)).unwrap();
            assert_eq!(out.get(0, 0, 0), 0.0);
        }
    }

    #[test]
    fn zero_denominator_maps_to_zero() {
        let out = compute_index(IndexKind::Ndwi, &pixel(0.4, 0.0, 0.1, 0.0)).unwrap();
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn wrong_channel_count_is_representation_error() {
        let rgb = Raster::zeros(2, 2, 3);
        assert!(matches!(
            compute_index(IndexKind::Ndvi, &rgb),
            Err(Error::Representation(_))
        ));
        assert!(matches!(
            build_representation(&rgb, InputRepresentation::Rgb),
            Err(Error::Representation(_))
        ));
    }

    #[test]
    fn non_finite_rejected_at_construction() {
        assert!(matches!(
            Raster::new(1, 1, 4, vec![0.1, f64::NAN, 0.1, 0.1]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn out_of_range_reflectance_rejected() {
        assert!(matches!(
            compute_index(IndexKind::Ndvi, &pixel(1.5, 0.0, 0.0, 0.1)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn representations_have_documented_channels() {
        let rgbn = Raster::from_fn(3, 5, 4, |r, c, ch| ((r * 7 + c * 3 + ch) % 10) as f64 / 10.0)
            .unwrap();
        for repr in InputRepresentation::ALL {
            let out = build_representation(&rgbn, repr).unwrap();
            assert_eq!(out.channels(), repr.channels(), "{repr:?}");
            assert!(out.same_extent(&rgbn));
        }
        let rgb = build_representation(&rgbn, InputRepresentation::Rgb).unwrap();
        for r in 0..3 {
            for c in 0..5 {
                assert_eq!(rgb.pixel(r, c), &rgbn.pixel(r, c)[..3]);
            }
        }
        let triple = build_representation(&rgbn, InputRepresentation::IndexTriple).unwrap();
        let ndwi = compute_index(IndexKind::Ndwi, &rgbn).unwrap();
        assert_eq!(triple.channel(2).unwrap(), ndwi);
    }

    #[test]
    fn ndvi_only_on_zero_raster_is_zero() {
        let out = build_representation(&Raster::zeros(4, 4, 4), InputRepresentation::NdviOnly)
            .unwrap();
        assert_eq!(out, Raster::zeros(4, 4, 1));
    }

    #[test]
    fn window_and_stack() {
        let r = Raster::from_fn(4, 4, 1, |r, c, _| (r * 4 + c) as f64).unwrap();
        let w = r.window(1, 2, 2, 2).unwrap();
        assert_eq!(w.values(), &[6.0, 7.0, 10.0, 11.0]);
        assert!(r.window(3, 3, 2, 2).is_err());
        let s = Raster::stack_channels(&[&w, &w]).unwrap();
        assert_eq!(s.pixel(1, 1), &[11.0, 11.0]);
    }

    fn rgbn_strategy() -> impl Strategy<Value = Raster> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0.0f64..=1.0, h * w * 4)
                .prop_map(move |v| Raster::new(h, w, 4, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn indices_are_bounded(rgbn in rgbn_strategy()) {
            for kind in IndexKind::ALL {
                let out = compute_index(kind, &rgbn).unwrap();
                prop_assert!(out.values().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn ndwi_is_negated_gndvi(rgbn in rgbn_strategy()) {
            let g = compute_index(IndexKind::Gndvi, &rgbn).unwrap();
            let n = compute_index(IndexKind::Ndwi, &rgbn).unwrap();
            for (a, b) in g.values().iter().zip(n.values()) {
                prop_assert_eq!(a.abs(), b.abs());
                prop_assert!(*a == 0.0 || a.signum() == -b.signum());
            }
        }

        #[test]
        fn row_permutation_commutes(rgbn in rgbn_strategy(), shift in 0usize..6) {
            let h = rgbn.height();
            let perm = |r: usize| (r + shift) % h;
            let permuted = Raster::from_fn(h, rgbn.width(), 4, |r, c, ch| rgbn.get(perm(r), c, ch)).unwrap();
            for kind in IndexKind::ALL {
                let a = compute_index(kind, &rgbn).unwrap();
                let b = compute_index(kind, &permuted).unwrap();
                for r in 0..h {
                    for c in 0..rgbn.width() {
                        prop_assert_eq!(b.get(r, c, 0), a.get(perm(r), c, 0));
                    }
                }
            }
        }

        #[test]
        fn rgb_ignores_nir(rgbn in rgbn_strategy(), nir in 0.0f64..=1.0) {
            let mut mutated = rgbn.clone();
            for r in 0..rgbn.height() {
                for c in 0..rgbn.width() {
                    mutated.set(r, c, NIR, nir);
                }
            }
            prop_assert_eq!(
                build_representation(&rgbn, InputRepresentation::Rgb).unwrap(),
                build_representation(&mutated, InputRepresentation::Rgb).unwrap()
            );
        }
    }
}
