//! Float RGB images and PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// `height x width x 3` image, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width * 3) {
            for px in row.chunks(3).rev() {
                data.extend_from_slice(px);
            }
        }
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }
}

/// Writes 8-bit RGB PNG data.
pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer(
        path,
        rgb,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}

/// Reads a PNG as 8-bit RGB, returning `(width, height, bytes)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

pub fn save_image(image: &Image, path: &Path) -> Result<()> {
    write_png(path, image.width, image.height, &image.to_rgb8())
}
