//! Grayscale images with intensities in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Branch, FeatureMap};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::shape(format!(
                "image {width}x{height} with {} pixels",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn to_feature_map(&self, branch: Branch) -> FeatureMap {
        FeatureMap::from_parts(1, self.height, self.width, self.data.clone(), branch, 0)
    }

    /// Replicates the last row/column so both dims become multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let (w, h) = (self.width.div_ceil(m) * m, self.height.div_ceil(m) * m);
        let mut out = Self::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x.min(self.width - 1), y.min(self.height - 1)));
            }
        }
        out
    }

    pub fn crop(&self, width: usize, height: usize) -> Self {
        let mut out = Self::filled(width, height, 0.0);
        for y in 0..height {
            out.data[y * width..(y + 1) * width]
                .copy_from_slice(&self.data[y * self.width..y * self.width + width]);
        }
        out
    }

    /// Linear rescale to `[0, 1]`; constant images map to 0.
    pub fn min_max_normalized(&self) -> Self {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data = self
            .data
            .iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Self::filled(width, height, 0.0);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
                let bot = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
                out.set(x, y, top * (1.0 - ty) + bot * ty);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_and_crop_round_trip() {
        let img = GrayImage::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let p = img.pad_to_multiple(4);
        assert_eq!((p.width, p.height), (4, 4));
        assert_eq!(p.get(3, 3), 0.6);
        assert_eq!(p.crop(3, 2), img);
    }

    #[test]
    fn normalize_and_resize() {
        let img = GrayImage::new(2, 1, vec![2.0, 4.0]).unwrap();
        assert_eq!(img.min_max_normalized().data, vec![0.0, 1.0]);
        assert_eq!(GrayImage::filled(2, 2, 3.0).min_max_normalized().data, vec![0.0; 4]);
        let up = GrayImage::filled(2, 2, 0.5).resize_bilinear(4, 4);
        assert!(up.data.iter().all(|v| (*v - 0.5).abs() < 1e-15));
    }
}
