use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// A rectangle of field pixels `[row, row + height) × [col, col + width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Window {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

fn axis_starts(n: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut starts = vec![0];
    while starts.last().copied().unwrap_or(0) + tile < n {
        let next = (starts.last().copied().unwrap_or(0) + stride).min(n - tile);
        starts.push(next);
    }
    starts
}

/// Overlapping square tiles with stride `tile - overlap`; the last row and
/// column of tiles are clamped to the field border.
pub fn tile_plan(height: usize, width: usize, tile: usize, overlap: usize) -> Result<Vec<Window>> {
    if tile == 0 || overlap >= tile {
        return Err(Error::Validation(format!(
            "overlap {overlap} must be smaller than tile {tile}"
        )));
    }
    if height < tile || width < tile {
        return Err(Error::Validation(format!(
            "field {height}x{width} is smaller than tile {tile}"
        )));
    }
    let stride = tile - overlap;
    let rows = axis_starts(height, tile, stride);
    let cols = axis_starts(width, tile, stride);
    Ok(rows
        .iter()
        .flat_map(|&row| {
            cols.iter().map(move |&col| Window {
                row,
                col,
                height: tile,
                width: tile,
            })
        })
        .collect())
}

fn cmp_tiles(a: &(Window, Raster), b: &(Window, Raster)) -> Ordering {
    a.0.cmp(&b.0).then_with(|| {
        a.1.values()
            .iter()
            .zip(b.1.values())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Averages single-channel tiles into a `field_h × field_w` raster. Tiles
/// are accumulated in a canonical order, so the result does not depend on
/// the order they are passed in.
pub fn stitch_tiles(tiles: &[(Window, Raster)], field_h: usize, field_w: usize) -> Result<Raster> {
    for (win, r) in tiles {
        if r.channels() != 1 || r.height() != win.height || r.width() != win.width {
            return Err(Error::Validation(format!(
                "tile at ({},{}) is {}x{}x{}, window is {}x{}",
                win.row,
                win.col,
                r.height(),
                r.width(),
                r.channels(),
                win.height,
                win.width
            )));
        }
        if win.row + win.height > field_h || win.col + win.width > field_w {
            return Err(Error::Validation(format!(
                "tile at ({},{}) extends past the {field_h}x{field_w} field",
                win.row, win.col
            )));
        }
    }
    let mut order: Vec<&(Window, Raster)> = tiles.iter().collect();
    order.sort_by(|a, b| cmp_tiles(a, b));
    let mut sum = vec![0.0; field_h * field_w];
    let mut count = vec![0u32; field_h * field_w];
    for (win, r) in order {
        for y in 0..win.height {
            let base = (win.row + y) * field_w + win.col;
            let src = &r.values()[y * win.width..(y + 1) * win.width];
            for (x, &v) in src.iter().enumerate() {
                sum[base + x] += v;
                count[base + x] += 1;
            }
        }
    }
    if let Some(i) = count.iter().position(|&n| n == 0) {
        return Err(Error::Coverage {
            row: i / field_w,
            col: i % field_w,
        });
    }
    let values = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    Raster::new(field_h, field_w, 1, values)
}
