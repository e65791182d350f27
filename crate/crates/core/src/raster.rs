//! 8-bit RGB rasters and the pluggable slide reader.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB image with a physical resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
    /// Microns per pixel.
    pub mpp: f64,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>, mpp: f64) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Invalid(format!(
                "buffer of {} bytes does not hold {width}x{height} RGB pixels",
                data.len()
            )));
        }
        if !(mpp > 0.0 && mpp.is_finite()) {
            return Err(Error::Invalid("mpp must be positive".into()));
        }
        Ok(RasterImage {
            width,
            height,
            data,
            mpp,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3], mpp: f64) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RasterImage {
            width,
            height,
            data,
            mpp,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Copies `other` into this image with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, other: &RasterImage, x: usize, y: usize) -> Result<()> {
        if x + other.width > self.width || y + other.height > self.height {
            return Err(Error::Invalid("pasted image exceeds canvas".into()));
        }
        let row = other.width * 3;
        for r in 0..other.height {
            let dst = ((y + r) * self.width + x) * 3;
            self.data[dst..dst + row].copy_from_slice(&other.data[r * row..(r + 1) * row]);
        }
        Ok(())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let buf: RgbImage =
            ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length checked at construction");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load_png(path: &Path, mpp: f64) -> Result<Self> {
        PngReader.read(path, mpp)
    }
}

/// Source of slide rasters. The baseline implementation decodes
/// single-resolution PNG/TIFF-style files; pyramid formats plug in here.
pub trait SlideReader: Send + Sync {
    fn read(&self, path: &Path, mpp: f64) -> Result<RasterImage>;
}

/// Decodes any single-resolution format supported by the `image` crate
/// build (PNG in the default build).
#[derive(Debug, Clone, Copy, Default)]
pub struct PngReader;

impl SlideReader for PngReader {
    fn read(&self, path: &Path, mpp: f64) -> Result<RasterImage> {
        if !path.exists() {
            return Err(Error::MissingInput(path.display().to_string()));
        }
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        RasterImage::new(w as usize, h as usize, rgb.into_raw(), mpp)
    }
}
