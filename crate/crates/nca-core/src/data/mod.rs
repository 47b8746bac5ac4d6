//! Image I/O, edge extraction, dataset manifests and OOD synthesis.

mod canny;
pub mod manifest;
mod perturb;

pub use canny::canny;
pub use manifest::{
    build_manifest, DatasetManifest, ManifestEntry, ManifestOptions, Split, MANIFEST_VERSION,
};
pub use perturb::perturb_edges;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGBA image with float channels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RgbaImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `[h, w, 4]`.
    pub pixels: Vec<f32>,
}

impl RgbaImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbaImage {
            width,
            height,
            pixels: vec![0.0; width * height * 4],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 4], self.pixels.clone())
            .expect("image buffers are consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = t.hwc()?;
        if c != 4 {
            return Err(Error::config(format!("expected 4 channels, got {c}")));
        }
        Ok(RgbaImage {
            width: w,
            height: h,
            pixels: t.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    /// RGB composited over a white background, alpha kept in place.
    pub fn composite_over_white(&self) -> RgbaImage {
        let mut out = self.clone();
        for p in 0..self.width * self.height {
            let a = self.pixels[p * 4 + 3];
            for k in 0..3 {
                out.pixels[p * 4 + k] = a * self.pixels[p * 4 + k] + (1.0 - a);
            }
        }
        out
    }

    /// Box-filter downscale to `side x side`, averaging premultiplied
    /// color so transparent source pixels do not bleed black.
    pub fn resize_box(&self, side: usize) -> RgbaImage {
        if self.width == side && self.height == side {
            return self.clone();
        }
        let mut out = RgbaImage::new(side, side);
        let sx = self.width as f64 / side as f64;
        let sy = self.height as f64 / side as f64;
        for oy in 0..side {
            for ox in 0..side {
                let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
                let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
                let mut acc = [0.0f64; 4];
                let mut area = 0.0f64;
                let mut y = y0;
                while y < y1 - 1e-9 {
                    let yn = (y.floor() + 1.0).min(y1);
                    let x_start = x0;
                    let mut x = x_start;
                    while x < x1 - 1e-9 {
                        let xn = (x.floor() + 1.0).min(x1);
                        let wgt = (yn - y) * (xn - x);
                        let py = (y.floor() as usize).min(self.height - 1);
                        let px = (x.floor() as usize).min(self.width - 1);
                        let at = (py * self.width + px) * 4;
                        let a = self.pixels[at + 3] as f64;
                        for k in 0..3 {
                            acc[k] += wgt * a * self.pixels[at + k] as f64;
                        }
                        acc[3] += wgt * a;
                        area += wgt;
                        x = xn;
                    }
                    y = yn;
                }
                let at = (oy * side + ox) * 4;
                let a = acc[3] / area;
                for k in 0..3 {
                    out.pixels[at + k] = if a > 1e-9 {
                        (acc[k] / area / a) as f32
                    } else {
                        0.0
                    };
                }
                out.pixels[at + 3] = a as f32;
            }
        }
        out
    }
}

/// A binary edge map; pixels are exactly 0.0 or 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `[h, w]`.
    pub pixels: Vec<f32>,
}

impl EdgeImage {
    pub fn new(width: usize, height: usize) -> Self {
        EdgeImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 1], self.pixels.clone())
            .expect("image buffers are consistent")
    }

    pub fn edge_pixel_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn is_binary(&self) -> bool {
        self.pixels.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Luminance times alpha, so fully transparent regions read as black.
pub fn grayscale(image: &RgbaImage) -> Vec<f32> {
    let mut out = vec![0.0f32; image.width * image.height];
    for (p, g) in out.iter_mut().enumerate() {
        let px = &image.pixels[p * 4..p * 4 + 4];
        *g = (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]) * px[3];
    }
    out
}

/// Loads an 8-bit RGBA PNG (other color types are converted).
pub fn load_png(path: &Path) -> Result<RgbaImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    Ok(RgbaImage {
        width: w,
        height: h,
        pixels: rgba.into_raw().iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

/// Saves as 8-bit RGBA PNG; save-load-save is byte stable.
pub fn save_png(image: &RgbaImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf =
        image::RgbaImage::from_raw(image.width as u32, image.height as u32, bytes)
            .expect("image buffers are consistent");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Loads a PNG as a binary edge image: any pixel brighter than half
/// (after alpha) counts as an edge.
pub fn load_edge_png(path: &Path) -> Result<EdgeImage> {
    let rgba = load_png(path)?;
    let gray = grayscale(&rgba);
    Ok(EdgeImage {
        width: rgba.width,
        height: rgba.height,
        pixels: gray.iter().map(|&v| f32::from(v > 0.5)).collect(),
    })
}

/// Saves an edge image as an opaque grayscale PNG.
pub fn save_edge_png(edge: &EdgeImage, path: &Path) -> Result<()> {
    let mut img = RgbaImage::new(edge.width, edge.height);
    for (p, &v) in edge.pixels.iter().enumerate() {
        for k in 0..3 {
            img.pixels[p * 4 + k] = v;
        }
        img.pixels[p * 4 + 3] = 1.0;
    }
    save_png(&img, path)
}
