//! Tissue detection on a low-magnification thumbnail and tile selection.
//!
//! Tissue is a pixel that is both coloured (HSV saturation above
//! [`MIN_SATURATION`]) and not blown out (value below [`MAX_VALUE`]). Pen marks
//! are strongly saturated pixels whose hue lies outside the pink/purple range
//! of H&E stain; they are dropped along with near-black pixels.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub const MIN_SATURATION: f64 = 0.08;
pub const MAX_VALUE: f64 = 0.98;
/// Saturation above which a non-stain hue is treated as pen ink.
pub const MARKER_SATURATION: f64 = 0.4;
/// Pixels darker than this are treated as black ink or debris.
pub const MIN_VALUE: f64 = 0.12;
/// Stain hues (degrees): purple through pink and into red-orange.
pub const STAIN_HUE_START: f64 = 250.0;
pub const STAIN_HUE_END: f64 = 20.0;

/// Side of a tile on the thumbnail grid, in pixels.
pub const TILE_PX: usize = 14;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    /// Row-major, `true` = tissue.
    pub mask: Vec<bool>,
}

impl TissueMask {
    pub fn new(width: usize, height: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != width * height {
            bail!(
                Dimension,
                "mask of {} pixels for {width}x{height}",
                mask.len()
            );
        }
        Ok(Self {
            width,
            height,
            mask,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            mask: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.mask[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `(hue in degrees, saturation, value)` of an 8-bit RGB pixel.
pub fn rgb_to_hsv(rgb: [u8; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let sat = if max > 0.0 { delta / max } else { 0.0 };
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (hue, sat, max)
}

fn is_stain_hue(hue: f64) -> bool {
    hue >= STAIN_HUE_START || hue <= STAIN_HUE_END
}

pub fn is_tissue_pixel(rgb: [u8; 3]) -> bool {
    let (hue, sat, val) = rgb_to_hsv(rgb);
    if sat <= MIN_SATURATION || val >= MAX_VALUE || val < MIN_VALUE {
        return false;
    }
    !(sat > MARKER_SATURATION && !is_stain_hue(hue))
}

pub fn tissue_mask(thumbnail: &RgbImage) -> Result<TissueMask> {
    let (w, h) = thumbnail.dimensions();
    if w == 0 || h == 0 {
        bail!(Input, "empty thumbnail");
    }
    let mask = thumbnail.pixels().map(|p| is_tissue_pixel(p.0)).collect();
    TissueMask::new(w as usize, h as usize, mask)
}

/// A retained tile on the thumbnail grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileCoord {
    pub row: u32,
    pub col: u32,
    pub tissue_fraction: f64,
}

impl TileCoord {
    pub fn new(row: u32, col: u32) -> Self {
        Self {
            row,
            col,
            tissue_fraction: 1.0,
        }
    }

    pub fn point(&self) -> [f64; 2] {
        [self.row as f64, self.col as f64]
    }
}

/// Non-overlapping `TILE_PX`-square windows holding at least half tissue.
pub fn select_tiles(mask: &TissueMask) -> Result<Vec<TileCoord>> {
    if mask.width < TILE_PX || mask.height < TILE_PX {
        bail!(
            Input,
            "mask {}x{} is smaller than one {TILE_PX}x{TILE_PX} tile",
            mask.width,
            mask.height
        );
    }
    let area = TILE_PX * TILE_PX;
    let mut tiles = Vec::new();
    for row in 0..mask.height / TILE_PX {
        for col in 0..mask.width / TILE_PX {
            let mut count = 0;
            for y in row * TILE_PX..(row + 1) * TILE_PX {
                let start = y * mask.width + col * TILE_PX;
                count += mask.mask[start..start + TILE_PX]
                    .iter()
                    .filter(|&&m| m)
                    .count();
            }
            if 2 * count >= area {
                tiles.push(TileCoord {
                    row: row as u32,
                    col: col as u32,
                    tissue_fraction: count as f64 / area as f64,
                });
            }
        }
    }
    Ok(tiles)
}
