//! Procedural longitudinal field imagery with growing stress regions.
//!
//! Each field gets a season-dependent canopy with row texture, per-flight
//! illumination gain, an optional seamline, sensor noise, one or more
//! stress blobs that appear at a random flight and grow every flight after,
//! and short-lived distractor patches that look like stress in a single
//! flight only. Blob sizes are scaled so the final mask covers a target
//! fraction of the field.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::io::{write_manifest, write_ndsr, write_png};
use crate::dataset::{FieldSequence, Flight, ManifestEntry, ManifestFlight};
use crate::error::{Error, Result};
use crate::raster::{Raster, BLUE, GREEN, NIR, RED};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub side: usize,
    pub num_flights: usize,
    pub blob_count_range: (usize, usize),
    /// Area multiplier per flight once a blob exists.
    pub growth_rate: f64,
    /// Mean fraction of the final mask that is stressed.
    pub target_prevalence: f64,
    pub seamline: bool,
    pub seamline_delta: f64,
    pub row_period: f64,
    pub noise_sigma: f64,
    /// Number of single-flight distractor patches per flight.
    pub transient_range: (usize, usize),
    pub resolution_m_per_px: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            side: 64,
            num_flights: 6,
            blob_count_range: (1, 3),
            growth_rate: 1.5,
            target_prevalence: 0.21,
            seamline: true,
            seamline_delta: 0.05,
            row_period: 6.0,
            noise_sigma: 0.01,
            transient_range: (1, 3),
            resolution_m_per_px: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.side < 16 {
            return bad("side must be at least 16");
        }
        if self.num_flights < 5 {
            return bad("num_flights must be at least 5");
        }
        if self.blob_count_range.0 > self.blob_count_range.1 {
            return bad("blob_count_range must be (min, max) with min <= max");
        }
        if self.transient_range.0 > self.transient_range.1 {
            return bad("transient_range must be (min, max) with min <= max");
        }
        if !(self.growth_rate > 1.0 && self.growth_rate.is_finite()) {
            return bad("growth_rate must be > 1");
        }
        if !(self.target_prevalence > 0.0 && self.target_prevalence <= 0.5) {
            return bad("target_prevalence must be in (0, 0.5]");
        }
        if !(0.0..=0.1).contains(&self.seamline_delta) {
            return bad("seamline_delta must be in [0, 0.1]");
        }
        if !(self.row_period > 0.0) || !(self.noise_sigma >= 0.0) || !(self.resolution_m_per_px > 0.0) {
            return bad("row_period and resolution must be positive, noise_sigma non-negative");
        }
        Ok(())
    }
}

/// A generated field together with the stress mask of every flight.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthField {
    pub sequence: FieldSequence,
    pub flight_masks: Vec<Raster>,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, side: f64, lo: f64, hi: f64, radius: (f64, f64)) -> Ellipse {
        let theta = rng.gen_range(0.0..PI);
        Ellipse {
            cy: rng.gen_range(lo..hi) * side,
            cx: rng.gen_range(lo..hi) * side,
            a: rng.gen_range(radius.0..radius.1),
            b: rng.gen_range(radius.0..radius.1),
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Normalized elliptical distance; 1 on the boundary of unit scale.
    fn distance(&self, r: f64, c: f64) -> f64 {
        let (dy, dx) = (r - self.cy, c - self.cx);
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

fn gaussian_blur(values: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for r in 0..side {
            for c in 0..side {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &w) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (rr, cc) = if horizontal { (r as isize, c as isize + d) } else { (r as isize + d, c as isize) };
                    if rr >= 0 && cc >= 0 && (rr as usize) < side && (cc as usize) < side {
                        acc += w * src[rr as usize * side + cc as usize];
                        norm += w;
                    }
                }
                out[r * side + c] = acc / norm;
            }
        }
        out
    };
    pass(&pass(values, true), false)
}

/// Smooth zero-mean, unit-variance noise field.
fn shape_noise(rng: &mut ChaCha8Rng, side: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..side * side).map(|_| rng.sample(StandardNormal)).collect();
    let smooth = gaussian_blur(&white, side, (side as f64 / 16.0).max(1.0));
    let n = smooth.len() as f64;
    let mean = smooth.iter().sum::<f64>() / n;
    let sd = (smooth.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    smooth.iter().map(|v| (v - mean) / sd).collect()
}

const SOIL: [f64; 4] = [0.26, 0.22, 0.18, 0.30];
const CANOPY: [f64; 4] = [0.05, 0.12, 0.04, 0.62];
/// Per-band shift at full stress severity: brighter green, lower NIR.
const STRESS: [f64; 4] = [0.07, 0.14, 0.02, -0.26];
const SHAPE_NOISE: f64 = 0.3;

fn field_rng(seed: u64, ordinal: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ordinal);
    rng
}

/// Generates field `ordinal`; a pure function of `(config, ordinal)`.
pub fn generate_field_sequence(config: &SynthConfig, ordinal: u64) -> Result<SynthField> {
    config.validate()?;
    let mut rng = field_rng(config.seed, ordinal);
    let side = config.side;
    let n = side * side;
    let f = config.num_flights;
    let sf = side as f64;

    let blob_count = rng.gen_range(config.blob_count_range.0..=config.blob_count_range.1);
    let blobs: Vec<(Ellipse, usize)> = (0..blob_count)
        .map(|_| (Ellipse::random(&mut rng, sf, 0.15, 0.85, (0.6, 1.4)), rng.gen_range(0..=f - 2)))
        .collect();
    let noise = shape_noise(&mut rng, side);
    let warp: Vec<f64> = noise.iter().map(|v| (SHAPE_NOISE * v).exp()).collect();

    // Per-blob distance field; the blob covers pixels with distance below
    // `scale * growth^((k - (F-1)) / 2)` at flight k.
    let dist: Vec<Vec<f64>> = blobs
        .iter()
        .map(|(e, _)| {
            (0..n)
                .map(|i| e.distance((i / side) as f64, (i % side) as f64) * warp[i])
                .collect()
        })
        .collect();
    let scale = if blobs.is_empty() {
        0.0
    } else {
        let wanted = config.target_prevalence * rng.gen_range(0.75..1.25);
        let mut nearest: Vec<f64> = (0..n)
            .map(|i| dist.iter().map(|d| d[i]).fold(f64::INFINITY, f64::min))
            .collect();
        nearest.sort_by(f64::total_cmp);
        let k = ((wanted * n as f64).round() as usize).clamp(1, n - 1);
        0.5 * (nearest[k - 1] + nearest[k])
    };
    let radius_at = |k: usize| scale * config.growth_rate.powf((k as f64 - (f - 1) as f64) / 2.0);
    let mut flight_masks = Vec::with_capacity(f);
    let mut severity = vec![vec![0.0; n]; f];
    for (k, sev) in severity.iter_mut().enumerate() {
        let mut mask = vec![0.0; n];
        for ((_, onset), d) in blobs.iter().zip(&dist) {
            if k < *onset {
                continue;
            }
            let s = (0.45 + 0.275 * (k - onset) as f64).min(1.0);
            let rk = radius_at(k);
            for i in 0..n {
                if d[i] < rk {
                    mask[i] = 1.0;
                    sev[i] = f64::max(sev[i], s);
                }
            }
        }
        flight_masks.push(Raster::new(side, side, 1, mask)?);
    }

    // Distractors: stress-like spectra in one flight, not part of any mask.
    let mut transient = vec![vec![0.0; n]; f];
    for tr in transient.iter_mut() {
        let count = rng.gen_range(config.transient_range.0..=config.transient_range.1);
        for _ in 0..count {
            let e = Ellipse::random(&mut rng, sf, 0.1, 0.9, (0.07 * sf, 0.16 * sf));
            let s = rng.gen_range(0.7..1.0);
            for i in 0..n {
                if e.distance((i / side) as f64, (i % side) as f64) * warp[i] < 1.0 {
                    tr[i] = f64::max(tr[i], s);
                }
            }
        }
    }

    let row_phase = rng.gen_range(0.0..config.row_period);
    let seam_col = if config.seamline {
        Some(rng.gen_range(0.2..0.8) * sf)
    } else {
        None
    };
    let mut flights = Vec::with_capacity(f);
    for k in 0..f {
        let season = k as f64 / (f - 1) as f64;
        let cover = 0.45 + 0.45 * season;
        let gain = rng.gen_range(0.92..1.08);
        let mut values = Vec::with_capacity(n * 4);
        for i in 0..n {
            let c = i % side;
            let rows = 0.85 + 0.15 * (2.0 * PI * (c as f64 + row_phase) / config.row_period).cos();
            let frac = (cover * rows).min(1.0);
            let s = severity[k][i].max(transient[k][i]);
            let seam = match seam_col {
                Some(sc) if (c as f64) >= sc => config.seamline_delta,
                _ => 0.0,
            };
            for band in [RED, GREEN, BLUE, NIR] {
                let base = SOIL[band] + frac * (CANOPY[band] - SOIL[band]) + s * STRESS[band];
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * config.noise_sigma;
                values.push((base * gain + seam + noise).clamp(0.0, 1.0));
            }
        }
        flights.push(Flight {
            index: k as i64 + 1,
            raster: Raster::new(side, side, 4, values)?,
        });
    }
    let sequence = FieldSequence::new(
        format!("field_{ordinal:04}"),
        flights,
        flight_masks[f - 1].clone(),
        f as i64,
        config.resolution_m_per_px,
    )?;
    Ok(SynthField {
        sequence,
        flight_masks,
    })
}

/// Writes `num_fields` generated fields plus `manifest.json` under `out_dir`
/// and returns the manifest path. Flights are stored as NDSR rasters and
/// masks as PNG.
pub fn generate_benchmark(config: &SynthConfig, num_fields: usize, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(num_fields);
    for ordinal in 0..num_fields {
        let field = generate_field_sequence(config, ordinal as u64)?;
        let seq = &field.sequence;
        let rel = PathBuf::from(&seq.field_id);
        let dir = out_dir.join(&rel);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut flights = Vec::with_capacity(seq.flights.len());
        for fl in &seq.flights {
            let name = format!("flight_{:02}.ndsr", fl.index);
            write_ndsr(&dir.join(&name), &fl.raster)?;
            flights.push(ManifestFlight {
                index: fl.index,
                image_path: rel.join(name),
            });
        }
        write_png(&dir.join("mask.png"), &seq.target_mask)?;
        entries.push(ManifestEntry {
            field_id: seq.field_id.clone(),
            flights,
            mask_path: rel.join("mask.png"),
            target_flight_index: seq.target_flight_index,
            resolution_m_per_px: seq.resolution_m_per_px,
        });
    }
    let manifest = out_dir.join("manifest.json");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_blobs_means_empty_mask() {
        let cfg = SynthConfig {
            blob_count_range: (0, 0),
            ..SynthConfig::default()
        };
        let f = generate_field_sequence(&cfg, 3).unwrap();
        assert_eq!(f.sequence.target_mask.count_positive(), 0);
    }

    #[test]
    fn deterministic_in_seed_and_ordinal() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_field_sequence(&cfg, 5).unwrap(), generate_field_sequence(&cfg, 5).unwrap());
        assert_ne!(generate_field_sequence(&cfg, 5).unwrap(), generate_field_sequence(&cfg, 6).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig { num_flights: 4, ..Default::default() },
            SynthConfig { growth_rate: 1.0, ..Default::default() },
            SynthConfig { target_prevalence: 0.6, ..Default::default() },
            SynthConfig { seamline_delta: 0.2, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
