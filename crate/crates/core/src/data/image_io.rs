//! PNG raster loading and saving with [0,1] normalization.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn image_error(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// 8-bit 3-channel image to a `[3,H,W]` tensor in [0,1].
pub fn load_rgb<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let img = image::open(path).map_err(|e| image_error(path, e.to_string()))?;
    let rgb: RgbImage = match img {
        DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(image_error(
                path,
                format!("expected 8-bit RGB, got {}", variant_name(&other)),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut values = vec![S::zero(); 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            values[c * h * w + y * w + x] = S::of_f64(px.0[c] as f64 / 255.0);
        }
    }
    Ok(Tensor::from_vec(vec![3, h, w], values)?)
}

/// 8- or 16-bit single-channel image to a `[1,H,W]` tensor, normalized by
/// the bit-depth maximum.
pub fn load_depth<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let img = image::open(path).map_err(|e| image_error(path, e.to_string()))?;
    let (values, h, w) = match img {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut values = vec![S::zero(); h * w];
            for (x, y, px) in img.enumerate_pixels() {
                values[y as usize * w + x as usize] = S::of_f64(px.0[0] as f64 / 255.0);
            }
            (values, h, w)
        }
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut values = vec![S::zero(); h * w];
            for (x, y, px) in img.enumerate_pixels() {
                values[y as usize * w + x as usize] = S::of_f64(px.0[0] as f64 / 65535.0);
            }
            (values, h, w)
        }
        other => {
            return Err(image_error(
                path,
                format!("expected single-channel grayscale, got {}", variant_name(&other)),
            ))
        }
    };
    Ok(Tensor::from_vec(vec![1, h, w], values)?)
}

fn variant_name(img: &DynamicImage) -> &'static str {
    match img {
        DynamicImage::ImageLuma8(_) => "Luma8",
        DynamicImage::ImageLumaA8(_) => "LumaA8",
        DynamicImage::ImageRgb8(_) => "Rgb8",
        DynamicImage::ImageRgba8(_) => "Rgba8",
        DynamicImage::ImageLuma16(_) => "Luma16",
        DynamicImage::ImageLumaA16(_) => "LumaA16",
        DynamicImage::ImageRgb16(_) => "Rgb16",
        DynamicImage::ImageRgba16(_) => "Rgba16",
        _ => "other",
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[3,H,W]` values in [0,1] as an 8-bit RGB PNG.
pub fn save_rgb8(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    assert_eq!(values.len(), 3 * h * w);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = Rgb([
                to_byte(values[y * w + x]),
                to_byte(values[h * w + y * w + x]),
                to_byte(values[2 * h * w + y * w + x]),
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img.save(path).map_err(|e| image_error(path, e.to_string()))
}

/// Writes `[H,W]` values in [0,1] as an 8-bit grayscale PNG.
pub fn save_gray8(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    assert_eq!(values.len(), h * w);
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, Luma([to_byte(values[y * w + x])]));
        }
    }
    img.save(path).map_err(|e| image_error(path, e.to_string()))
}

/// Writes `[H,W]` values in [0,1] as a 16-bit grayscale PNG.
pub fn save_gray16(path: &Path, values: &[f64], h: usize, w: usize) -> Result<()> {
    assert_eq!(values.len(), h * w);
    let mut img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (values[y * w + x].clamp(0.0, 1.0) * 65535.0).round() as u16;
            img.put_pixel(x as u32, y as u32, Luma([v]));
        }
    }
    img.save(path).map_err(|e| image_error(path, e.to_string()))
}
