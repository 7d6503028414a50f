//! Orthographic camera, block rasterizer and red-blob detector.
//!
//! Images are 8-bit RGB in row-major HWC order. Pixel coordinates are
//! (x, y) = (column, row) with the origin at the top-left pixel center.

use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use std::path::Path;
use thiserror::Error;

use crate::physics::Vec3;

/// Fill color of the block: dull red on a black background.
pub const BLOCK_RGB: [u8; 3] = [204, 10, 10];

/// Side length of the block in world units.
pub const BLOCK_SIDE_WORLD: f64 = 0.1;

/// Minimum red value for a pixel to count as part of the block.
pub const RED_THRESHOLD: u8 = 20;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("no pixel reaches the red threshold")]
    NoObject,
}

/// Orthographic top-down camera: px = alpha * (q_x, q_y) - beta.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraModel {
    pub alpha: f64,
    pub beta: [f64; 2],
    pub width: u32,
    pub height: u32,
}

impl Default for CameraModel {
    fn default() -> Self {
        CameraModel { alpha: 50.0, beta: [-64.0, -64.0], width: 128, height: 128 }
    }
}

impl CameraModel {
    pub fn with_size(size: u32) -> Self {
        let half = size as f64 / 2.0;
        CameraModel { alpha: 50.0 * size as f64 / 128.0, beta: [-half, -half], width: size, height: size }
    }

    /// True when the rounded pixel falls on the image grid.
    pub fn in_view(&self, px: [f64; 2]) -> bool {
        self.in_view_with_margin(px, 0)
    }

    /// True when the rounded pixel keeps at least `margin` pixels to every
    /// image border (a centered square of side 2 margin + 1 stays unclipped).
    pub fn in_view_with_margin(&self, px: [f64; 2], margin: i64) -> bool {
        let c = px[0].round() as i64;
        let r = px[1].round() as i64;
        c >= margin
            && c <= self.width as i64 - 1 - margin
            && r >= margin
            && r <= self.height as i64 - 1 - margin
    }

    /// Side of the rendered block in pixels (odd, at least 1).
    pub fn block_side_px(&self) -> i64 {
        let s = (BLOCK_SIDE_WORLD * self.alpha).round() as i64;
        s.max(1) | 1
    }
}

/// Projects a world point to pixel coordinates.
pub fn project(cam: &CameraModel, q: Vec3) -> [f64; 2] {
    [cam.alpha * q.x - cam.beta[0], cam.alpha * q.y - cam.beta[1]]
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// RGB bytes, row-major.
    pub data: Vec<u8>,
}

impl Image {
    pub fn black(width: u32, height: u32) -> Self {
        Image { width, height, data: vec![0; (width * height * 3) as usize] }
    }

    pub fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = ((y as u32 * self.width + x as u32) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Draws the block as a filled square of side `cube_px` centered on the
/// rounded projection of `q`. Parts outside the image are clipped.
pub fn render_frame(cam: &CameraModel, q: Vec3, cube_px: u32) -> Image {
    let mut img = Image::black(cam.width, cam.height);
    let px = project(cam, q);
    let cx = px[0].round() as i64;
    let cy = px[1].round() as i64;
    let side = cube_px as i64;
    let lo = -(side - 1) / 2;
    for dy in lo..lo + side {
        for dx in lo..lo + side {
            img.put(cx + dx, cy + dy, BLOCK_RGB);
        }
    }
    img
}

/// Centroid of the pixels attaining the maximum red value, or `NoObject` if
/// that maximum is below the threshold.
pub fn argmax_red(img: &Image) -> Result<[f64; 2], RenderError> {
    let mut max_red = 0u8;
    for px in img.data.chunks_exact(3) {
        max_red = max_red.max(px[0]);
    }
    if max_red < RED_THRESHOLD {
        return Err(RenderError::NoObject);
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut n = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            if img.rgb(x, y)[0] == max_red {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
    }
    Ok([sx / n, sy / n])
}

/// Writes a binary PPM (P6).
pub fn write_ppm(img: &Image, path: &Path) -> io::Result<()> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.data)?;
    f.flush()
}

/// Writes a grayscale map as binary PGM (P5), scaled so its maximum maps to
/// 255. An all-zero map stays black.
pub fn write_pgm(values: &[f32], width: u32, height: u32, path: &Path) -> io::Result<()> {
    assert_eq!(values.len(), (width * height) as usize);
    let max = values.iter().cloned().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let bytes: Vec<u8> = values.iter().map(|v| (v.max(0.0) * scale).round().clamp(0.0, 255.0) as u8).collect();
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(&bytes)?;
    f.flush()
}
