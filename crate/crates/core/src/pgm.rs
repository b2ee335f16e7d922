//! Binary 8-bit PGM (P5) image writing.
//!
//! Similarity grids and contribution strips are rendered as grayscale
//! images. Values are mapped from [0, 1] to [0, 255]; out-of-range inputs
//! are clamped and counted so callers can surface how much clamping
//! happened.

use std::io::Write as _;
use std::path::Path;

use ndarray::ArrayView2;

/// An 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// How many values fell outside [0, 1] during rendering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClampStats {
    /// Values below zero, rendered as 0 (black).
    pub clamped_low: usize,
    /// Values above one, rendered as 255 (white).
    pub clamped_high: usize,
}

impl PgmImage {
    /// Builds an image from row-major pixel bytes.
    ///
    /// Panics if `pixels.len() != width * height`; callers in this crate
    /// always construct from shapes they control.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer shape mismatch");
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Pixel at (row, col).
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Serializes to the binary P5 wire format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() + 32);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height).expect("vec write");
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_to(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    /// Parses a binary P5 image as written by [`PgmImage::to_bytes`]
    /// (single-whitespace separators, maxval 255).
    pub fn parse(bytes: &[u8]) -> Result<Self, String> {
        let mut fields = Vec::new();
        let mut pos = 0usize;
        // Header is ASCII: magic, width, height, maxval, one whitespace after.
        while fields.len() < 4 && pos < bytes.len() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
        }
        if fields.len() != 4 {
            return Err("truncated header".into());
        }
        if fields[0] != "P5" {
            return Err(format!("expected P5 magic, found {:?}", fields[0]));
        }
        let width: usize = fields[1].parse().map_err(|_| "bad width".to_string())?;
        let height: usize = fields[2].parse().map_err(|_| "bad height".to_string())?;
        if fields[3] != "255" {
            return Err(format!("expected maxval 255, found {}", fields[3]));
        }
        pos += 1; // single whitespace byte after maxval
        let data = &bytes[pos..];
        if data.len() != width * height {
            return Err(format!(
                "expected {} pixel bytes, found {}",
                width * height,
                data.len()
            ));
        }
        Ok(Self::from_pixels(width, height, data.to_vec()))
    }
}

/// Maps a value in [0, 1] to a grayscale byte, clamping and counting
/// out-of-range inputs.
fn to_gray(value: f64, stats: &mut ClampStats) -> u8 {
    if value < 0.0 {
        stats.clamped_low += 1;
        0
    } else if value > 1.0 {
        stats.clamped_high += 1;
        255
    } else {
        (value * 255.0).round() as u8
    }
}

/// Renders a matrix of unit-interval values as a block heatmap, each cell
/// drawn as a `cell_px` x `cell_px` square.
pub fn render_heatmap(values: ArrayView2<f64>, cell_px: usize) -> (PgmImage, ClampStats) {
    let (rows, cols) = values.dim();
    let mut stats = ClampStats::default();
    let gray: Vec<u8> = values.iter().map(|&v| to_gray(v, &mut stats)).collect();
    let width = cols * cell_px;
    let height = rows * cell_px;
    let mut pixels = vec![0u8; width * height];
    for r in 0..rows {
        for c in 0..cols {
            let g = gray[r * cols + c];
            for dy in 0..cell_px {
                let row_base = (r * cell_px + dy) * width + c * cell_px;
                pixels[row_base..row_base + cell_px].fill(g);
            }
        }
    }
    (PgmImage::from_pixels(width, height, pixels), stats)
}

/// Renders a vector of unit-interval values as a horizontal bar strip:
/// one `cell_px`-wide column per value, `height_px` tall, filled from the
/// bottom in proportion to the value.
pub fn render_bar_strip(
    values: &[f64],
    cell_px: usize,
    height_px: usize,
) -> (PgmImage, ClampStats) {
    let mut stats = ClampStats::default();
    let width = values.len() * cell_px;
    let mut pixels = vec![0u8; width * height_px];
    for (i, &v) in values.iter().enumerate() {
        let clamped = if v < 0.0 {
            stats.clamped_low += 1;
            0.0
        } else if v > 1.0 {
            stats.clamped_high += 1;
            1.0
        } else {
            v
        };
        let filled = (clamped * height_px as f64).round() as usize;
        for dy in 0..filled {
            let row = height_px - 1 - dy;
            let row_base = row * width + i * cell_px;
            pixels[row_base..row_base + cell_px].fill(255);
        }
    }
    (PgmImage::from_pixels(width, height_px, pixels), stats)
}
