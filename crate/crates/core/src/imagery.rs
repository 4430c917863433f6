//! RGB tiles in model space and their 8-bit PNG form.

use std::io::Cursor;

use crate::error::{contract, Error, Result};

/// Three-channel image, channel-major, values nominally in `[−1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTile {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl ImageTile {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != CHANNELS * height * width {
            return Err(contract!(
                "image tile {height}x{width} needs {} values (3 channels), got {}",
                CHANNELS * height * width,
                pixels.len()
            ));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(CHANNELS * height * width);
        for v in rgb {
            pixels.extend(std::iter::repeat_n(v, height * width));
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.pixels[c * plane..(c + 1) * plane]
    }

    /// RGB triple at a pixel.
    pub fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.pixels[i], self.pixels[plane + i], self.pixels[2 * plane + i]]
    }

    /// `k×k` box-filter downsampling.
    pub fn downsample(&self, k: usize) -> Result<ImageTile> {
        if k == 0 || self.height % k != 0 || self.width % k != 0 {
            return Err(contract!("cannot downsample {}x{} by {k}", self.height, self.width));
        }
        let pixels = crate::tensor::kernels::avg_pool(&self.pixels, CHANNELS, self.height, self.width, k);
        ImageTile::new(self.height / k, self.width / k, pixels)
    }

    pub fn upsample(&self, k: usize) -> Result<ImageTile> {
        if k == 0 {
            return Err(contract!("upsampling factor must be positive"));
        }
        let pixels = crate::tensor::kernels::upsample(&self.pixels, CHANNELS, self.height, self.width, k);
        ImageTile::new(self.height * k, self.width * k, pixels)
    }

    /// 8-bit RGB PNG, mapping `[−1, 1]` to `[0, 255]` with clamping.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let plane = self.height * self.width;
        let mut bytes = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..CHANNELS {
                bytes.push(to_u8(self.pixels[c * plane + i]));
            }
        }
        encode_png(self.width, self.height, png::ColorType::Rgb, &bytes)
    }

    /// Decode an 8-bit PNG (gray, RGB or with alpha) into model space.
    pub fn from_png(data: &[u8]) -> Result<Self> {
        let mut decoder = png::Decoder::new(Cursor::new(data));
        decoder.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("png: {e}")))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format("png: image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("png: {e}")))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let per_pixel = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(Error::Format("png: unexpanded palette".into())),
        };
        let plane = w * h;
        let mut pixels = vec![0.0; plane * CHANNELS];
        for y in 0..h {
            let row = &buf[y * info.line_size..];
            for x in 0..w {
                let px = &row[x * per_pixel..(x + 1) * per_pixel];
                for c in 0..CHANNELS {
                    let v = if per_pixel < 3 { px[0] } else { px[c] };
                    pixels[c * plane + y * w + x] = from_u8(v);
                }
            }
        }
        ImageTile::new(h, w, pixels)
    }
}

pub fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

pub(crate) fn encode_png(width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(format!("png: {e}")))?;
        writer
            .write_image_data(bytes)
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        writer.finish().map_err(|e| Error::Format(format!("png: {e}")))?;
    }
    Ok(out)
}

/// Grayscale PNG of non-negative values scaled so the maximum is white;
/// an all-zero map renders black.
pub fn heatmap_png(height: usize, width: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(contract!("heatmap needs {} values, got {}", height * width, values.len()));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| if max > 0.0 { ((v.max(0.0) / max) * 255.0).round() as u8 } else { 0 })
        .collect();
    encode_png(width, height, png::ColorType::Grayscale, &bytes)
}
