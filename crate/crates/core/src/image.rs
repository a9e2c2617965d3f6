//! 8-bit grayscale line rasters. 255 is white background, 0 is ink.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LineImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl LineImage {
    pub fn blank(width: usize, height: usize) -> Self {
        LineImage { width, height, pixels: vec![BACKGROUND; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Ink intensity in `[0, 1]` (0 = background).
    pub fn ink(&self, x: usize, y: usize) -> f32 {
        1.0 - self.get(x, y) as f32 / 255.0
    }

    /// Width rounded up to a multiple of `multiple`.
    pub fn padded_width(&self, multiple: usize) -> usize {
        self.width.div_ceil(multiple) * multiple
    }

    /// Copy extended on the right with background up to `width`.
    pub fn pad_to(&self, width: usize) -> LineImage {
        if width <= self.width {
            return self.clone();
        }
        let mut out = LineImage::blank(width, self.height);
        for y in 0..self.height {
            out.pixels[y * width..y * width + self.width]
                .copy_from_slice(&self.pixels[y * self.width..(y + 1) * self.width]);
        }
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(Cursor::new(&mut buf), self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
            writer.write_image_data(&self.pixels).map_err(|e| Error::Image(e.to_string()))?;
        }
        Ok(buf)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let mut dec = png::Decoder::new(Cursor::new(bytes));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Image("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let bytes = &buf[..info.buffer_size()];
        let pixels: Vec<u8> = match info.color_type {
            png::ColorType::Grayscale => bytes.to_vec(),
            png::ColorType::GrayscaleAlpha => bytes.chunks(2).map(|p| p[0]).collect(),
            png::ColorType::Rgb | png::ColorType::Rgba => bytes
                .chunks(channels)
                .map(|p| ((p[0] as u32 * 299 + p[1] as u32 * 587 + p[2] as u32 * 114) / 1000) as u8)
                .collect(),
            png::ColorType::Indexed => return Err(Error::Image("unexpanded palette image".into())),
        };
        if pixels.len() != w * h {
            return Err(Error::Image(format!("decoded {} pixels for {w}x{h}", pixels.len())));
        }
        Ok(LineImage { width: w, height: h, pixels })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png(&bytes)
    }

    /// Nearest-neighbour rescale to `height`, preserving aspect ratio.
    pub fn resize_to_height(&self, height: usize) -> LineImage {
        if self.height == height {
            return self.clone();
        }
        let width = ((self.width * height) as f64 / self.height as f64).round().max(1.0) as usize;
        let mut out = LineImage::blank(width, height);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact() {
        let mut img = LineImage::blank(13, 5);
        img.set(3, 2, 0);
        img.set(12, 4, 77);
        let back = LineImage::from_png(&img.to_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn padding_extends_with_background() {
        let img = LineImage { width: 2, height: 1, pixels: vec![0, 10] };
        assert_eq!(img.padded_width(8), 8);
        assert_eq!(img.pad_to(4).pixels, vec![0, 10, 255, 255]);
    }
}
