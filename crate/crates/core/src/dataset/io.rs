//! Raster files and the dataset manifest.
//!
//! Two raster encodings are read: 8-bit PNG (values divided by 255) and the
//! "NDSR" binary layout: magic `NDSR`, `u16` version, `u32` height, `u32`
//! width, `u16` channels, then little-endian `f32` values in row-major
//! `(row, col, channel)` order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FieldSequence, Flight};
use crate::error::{Error, Result};
use crate::raster::Raster;

pub const NDSR_MAGIC: &[u8; 4] = b"NDSR";
pub const NDSR_VERSION: u16 = 1;

pub fn encode_ndsr(r: &Raster) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + r.values().len() * 4);
    buf.extend_from_slice(NDSR_MAGIC);
    buf.extend_from_slice(&NDSR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(r.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(r.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(r.channels() as u16).to_le_bytes());
    for &v in r.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_ndsr(bytes: &[u8], path: &Path) -> Result<Raster> {
    if bytes.len() < 16 || &bytes[..4] != NDSR_MAGIC {
        return Err(Error::format(path, "missing NDSR header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != NDSR_VERSION {
        return Err(Error::format(path, format!("unsupported NDSR version {version}")));
    }
    let h = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let c = u16::from_le_bytes([bytes[14], bytes[15]]) as usize;
    let body = &bytes[16..];
    if body.len() != h * w * c * 4 {
        return Err(Error::format(
            path,
            format!("{h}x{w}x{c} raster needs {} bytes, found {}", h * w * c * 4, body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Raster::new(h, w, c, values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_ndsr(path: &Path, r: &Raster) -> Result<()> {
    std::fs::write(path, encode_ndsr(r)).map_err(|e| Error::io(path, e))
}

pub fn read_ndsr(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ndsr(&bytes, path)
}

/// Reads an 8-bit PNG as `[0,1]` values. Gray, gray+alpha, RGB and RGBA
/// (read as RGBN) layouts map to 1–4 channels.
pub fn read_png(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, format!("expected 8-bit PNG, got {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let values = buf[..h * w * channels].iter().map(|&b| b as f64 / 255.0).collect();
    Raster::new(h, w, channels, values)
}

/// Writes a 1, 3 or 4 channel raster with values in `[0,1]` as 8-bit PNG.
pub fn write_png(path: &Path, r: &Raster) -> Result<()> {
    let color = match r.channels() {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::Representation(format!("cannot write {c} channels as PNG"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), r.width() as u32, r.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = r
        .values()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Dispatches on the leading magic bytes.
pub fn read_raster(path: &Path) -> Result<Raster> {
    let mut head = [0u8; 4];
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    if n == 4 && &head == NDSR_MAGIC {
        read_ndsr(path)
    } else {
        read_png(path)
    }
}

/// Reads a single-channel mask; stored values of at least one half become 1.
pub fn read_mask(path: &Path) -> Result<Raster> {
    let r = read_raster(path)?;
    if r.channels() != 1 {
        return Err(Error::Validation(format!(
            "mask {} has {} channels, expected 1",
            path.display(),
            r.channels()
        )));
    }
    Ok(r.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFlight {
    pub index: i64,
    pub image_path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub field_id: String,
    pub flights: Vec<ManifestFlight>,
    pub mask_path: PathBuf,
    pub target_flight_index: i64,
    pub resolution_m_per_px: f64,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads every field listed in a JSON manifest. Relative paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<FieldSequence>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .iter()
        .map(|e| {
            let flights = e
                .flights
                .iter()
                .map(|f| {
                    Ok(Flight {
                        index: f.index,
                        raster: read_raster(&resolve(base, &f.image_path))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mask = read_mask(&resolve(base, &e.mask_path))?;
            FieldSequence::new(
                e.field_id.clone(),
                flights,
                mask,
                e.target_flight_index,
                e.resolution_m_per_px,
            )
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, entries).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndsr_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ndsr");
        let r = Raster::from_fn(3, 5, 4, |r, c, ch| (r * 20 + c * 4 + ch) as f64 / 64.0).unwrap();
        write_ndsr(&p, &r).unwrap();
        assert_eq!(read_raster(&p).unwrap(), r);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        assert!(matches!(decode_ndsr(&bytes, &p), Err(Error::Format { .. })));
    }

    #[test]
    fn png_round_trip_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let r = Raster::from_fn(4, 3, 4, |r, c, ch| ((r * 12 + c * 4 + ch) * 5) as f64 / 255.0).unwrap();
        write_png(&p, &r).unwrap();
        let back = read_raster(&p).unwrap();
        for (a, b) in back.values().iter().zip(r.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_png_maps_255_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Raster::new(1, 3, 1, vec![0.0, 1.0, 1.0]).unwrap();
        write_png(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_raster(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
