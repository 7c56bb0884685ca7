//! Image buffers and frame file I/O.
//!
//! Frames are read as PGM/PPM (PNG also accepted) and converted to
//! floating-point luma with ITU-R BT.601 weights for detection. The color
//! buffer is kept alongside so reconstructed points can be colored.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("failed to read image {path}: {source}")]
    Read {
        path: PathBuf,
        source: ::image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Write {
        path: PathBuf,
        source: ::image::ImageError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no frames found in {0}")]
    NoFrames(PathBuf),
}

pub const FRAME_EXTENSIONS: &[&str] = &["pgm", "ppm", "pnm", "png"];

/// Single-channel image with intensities nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Clamped-to-edge access with signed coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Rotate by 90° counter-clockwise as displayed (pixel `(x, y)` moves
    /// to `(y, w - 1 - x)`).
    pub fn rotate90(&self) -> GrayImage {
        let mut out = GrayImage::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, self.width - 1 - x, self.get(x, y));
            }
        }
        out
    }

    /// Shift content by an integer offset; uncovered pixels are zero.
    pub fn translate(&self, dx: isize, dy: isize) -> GrayImage {
        let mut out = GrayImage::new(self.width, self.height);
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                let (sx, sy) = (x - dx, y - dy);
                if sx >= 0 && sy >= 0 && (sx as usize) < self.width && (sy as usize) < self.height {
                    out.set(x as usize, y as usize, self.get(sx as usize, sy as usize));
                }
            }
        }
        out
    }

    pub fn to_u8(&self) -> ::image::GrayImage {
        ::image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize);
            ::image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }
}

/// 8-bit RGB image.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0; 3]; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [u8; 3]) {
        self.data[y * self.width + x] = v;
    }

    /// Nearest-pixel color lookup at a subpixel location, clamped to the image.
    pub fn sample(&self, u: f64, v: f64) -> [u8; 3] {
        let x = (u.round().max(0.0) as usize).min(self.width - 1);
        let y = (v.round().max(0.0) as usize).min(self.height - 1);
        self.get(x, y)
    }

    /// ITU-R BT.601 luma.
    pub fn to_gray(&self) -> GrayImage {
        let data = self
            .data
            .iter()
            .map(|&[r, g, b]| (0.299 * r as f32 + 0.587 * g as f32 + 0.114 * b as f32) / 255.0)
            .collect();
        GrayImage::from_vec(self.width, self.height, data)
    }

    fn from_dynamic(img: ::image::DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.pixels().map(|p| p.0).collect();
        Self {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    pub fn to_image(&self) -> ::image::RgbImage {
        ::image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            ::image::Rgb(self.get(x as usize, y as usize))
        })
    }
}

/// A decoded frame: color for point colors, luma for detection.
#[derive(Debug, Clone)]
pub struct Frame {
    pub color: RgbImage,
    pub gray: GrayImage,
}

impl Frame {
    pub fn from_rgb(color: RgbImage) -> Self {
        let gray = color.to_gray();
        Self { color, gray }
    }

    pub fn from_gray(gray: GrayImage) -> Self {
        let mut color = RgbImage::new(gray.width(), gray.height());
        for y in 0..gray.height() {
            for x in 0..gray.width() {
                let v = (gray.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
                color.set(x, y, [v, v, v]);
            }
        }
        Self { color, gray }
    }

    pub fn width(&self) -> usize {
        self.gray.width()
    }

    pub fn height(&self) -> usize {
        self.gray.height()
    }

    pub fn load(path: &Path) -> Result<Frame, ImageError> {
        let img = ::image::open(path).map_err(|source| ImageError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let gray_only = matches!(
            img.color(),
            ::image::ColorType::L8 | ::image::ColorType::L16
        );
        if gray_only {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
            return Ok(Frame::from_gray(GrayImage::from_vec(w as usize, h as usize, data)));
        }
        Ok(Frame::from_rgb(RgbImage::from_dynamic(img)))
    }
}

/// Write an RGB image; the format follows the extension (`.ppm` for frames).
pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<(), ImageError> {
    img.to_image().save(path).map_err(|source| ImageError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<(), ImageError> {
    img.to_u8().save(path).map_err(|source| ImageError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Frame files in a directory, sorted lexicographically by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, ImageError> {
    let entries = std::fs::read_dir(dir).map_err(|source| ImageError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
        })
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(ImageError::NoFrames(dir.to_path_buf()));
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_weights() {
        let mut img = RgbImage::new(1, 1);
        img.set(0, 0, [255, 0, 0]);
        assert!((img.to_gray().get(0, 0) - 0.299).abs() < 1e-6);
        img.set(0, 0, [255, 255, 255]);
        assert!((img.to_gray().get(0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let data = (0..12).map(|v| v as f32).collect();
        let img = GrayImage::from_vec(4, 3, data);
        let r = img.rotate90();
        assert_eq!((r.width(), r.height()), (3, 4));
        assert_eq!(r.rotate90().rotate90().rotate90(), img);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(5, 4);
        img.set(2, 3, [10, 200, 30]);
        let p = dir.path().join("a.ppm");
        save_rgb(&img, &p).unwrap();
        let f = Frame::load(&p).unwrap();
        assert_eq!(f.color, img);
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        save_rgb(&img, &dir.path().join("0.ppm")).unwrap();
        let names: Vec<_> = list_frames(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["0.ppm", "a.ppm"]);
    }
}
