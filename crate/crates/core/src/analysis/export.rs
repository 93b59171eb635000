//! File exports: CSV tables, PNG frame strips and JSON sidecars.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(header).map_err(|e| Error::format(path, e.to_string()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lays `frames` (each `C x H x W`, values in [0, 1]) side by side in one PNG.
/// One channel gives grayscale, three give RGB.
pub fn write_png_strip(path: &Path, frames: &[Vec<f64>], shape: (usize, usize, usize)) -> Result<()> {
    let (c, h, w) = shape;
    if frames.is_empty() || frames.iter().any(|f| f.len() != c * h * w) {
        return Err(Error::invalid("frames must be non-empty and match the image shape"));
    }
    let width = (w * frames.len()) as u32;
    let result = match c {
        1 => {
            let img = GrayImage::from_fn(width, h as u32, |x, y| {
                let (f, col) = (x as usize / w, x as usize % w);
                Luma([to_byte(frames[f][y as usize * w + col])])
            });
            img.save(path)
        }
        3 => {
            let img = RgbImage::from_fn(width, h as u32, |x, y| {
                let (f, col) = (x as usize / w, x as usize % w);
                let px = |ch: usize| to_byte(frames[f][ch * h * w + y as usize * w + col]);
                Rgb([px(0), px(1), px(2)])
            });
            img.save(path)
        }
        _ => return Err(Error::invalid(format!("cannot write {c}-channel images"))),
    };
    result.map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_strip_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("strip.png");
        let frames = vec![vec![0.0; 16], vec![1.0; 16], vec![0.5; 16]];
        write_png_strip(&path, &frames, (1, 4, 4)).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (12, 4));
        assert_eq!(img.get_pixel(5, 0).0[0], 255);
        assert!(write_png_strip(&path, &frames, (2, 2, 4)).is_err());
    }
}
