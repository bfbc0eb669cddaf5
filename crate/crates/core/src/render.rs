//! Grayscale attention heatmaps.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::interface::check_simplex;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Sum `steps` (each an L-simplex), scale the maximum to 255 and upscale
/// every cell to an `upscale`×`upscale` block.
pub fn render_attention(steps: &[Vec<f64>], grid: usize, upscale: usize) -> Result<GrayImage> {
    if steps.is_empty() {
        return Err(Error::Domain("nothing to render".into()));
    }
    if upscale == 0 {
        return Err(Error::Domain("upscale must be positive".into()));
    }
    let l = grid * grid;
    let mut sum = vec![0.0; l];
    for (t, row) in steps.iter().enumerate() {
        if row.len() != l {
            return Err(Error::Dimension(format!("step {t} has {} weights, grid needs {l}", row.len())));
        }
        check_simplex(row)?;
        for (s, v) in sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    let max = sum.iter().cloned().fold(0.0, f64::max);
    let cells: Vec<u8> = sum.iter().map(|v| (255.0 * v / max).round() as u8).collect();
    let side = grid * upscale;
    let mut pixels = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            pixels[y * side + x] = cells[(y / upscale) * grid + x / upscale];
        }
    }
    Ok(GrayImage {
        width: side,
        height: side,
        pixels,
    })
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(to_io)?;
        writer.write_image_data(&self.pixels).map_err(to_io)?;
        writer.finish().map_err(to_io)?;
        Ok(())
    }
}

/// Write a heatmap as PGM, plus PNG when `png` is given.
pub fn write_heatmap(img: &GrayImage, pgm: &Path, png: Option<&Path>) -> Result<()> {
    img.write_pgm(pgm)?;
    if let Some(p) = png {
        img.write_png(p)?;
    }
    Ok(())
}
