//! Image file I/O. Pixels map to `[0, 1]` floats in `channels x height x width`
//! tensors; grayscale files load as one channel, everything else as RGB.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

fn img_err(e: image::ImageError) -> Error {
    Error::Image(e.to_string())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    from_dynamic(&img)
}

pub fn from_dynamic(img: &DynamicImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            let g = img.to_luma8();
            Tensor::new(vec![1, h, w], g.pixels().map(|p| p.0[0] as f32 / 255.0).collect())
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            let g = img.to_luma16();
            Tensor::new(vec![1, h, w], g.pixels().map(|p| p.0[0] as f32 / 65535.0).collect())
        }
        _ => {
            let rgb = img.to_rgb8();
            let mut data = vec![0.0; 3 * h * w];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = p.0[c] as f32 / 255.0;
                }
            }
            Tensor::new(vec![3, h, w], data)
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_dynamic(t: &Tensor) -> Result<DynamicImage> {
    let (c, h, w) = t.dims_3d()?;
    let (wu, hu) = (w as u32, h as u32);
    match c {
        1 => {
            let buf = t.data().iter().map(|&v| quantize(v)).collect();
            Ok(DynamicImage::ImageLuma8(GrayImage::from_raw(wu, hu, buf).expect("sized")))
        }
        3 => {
            let plane = h * w;
            let d = t.data();
            let buf = (0..plane).flat_map(|i| (0..3).map(move |ch| quantize(d[ch * plane + i]))).collect();
            Ok(DynamicImage::ImageRgb8(RgbImage::from_raw(wu, hu, buf).expect("sized")))
        }
        _ => Err(invalid(format!("cannot encode a {c}-channel image"))),
    }
}

/// Writes an 8-bit PNG, or PGM/PPM when the extension is `.pgm`/`.ppm`/`.pnm`.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") | Some("ppm") | Some("pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    to_dynamic(t)?.save_with_format(path, format).map_err(img_err)
}

/// Converts between grayscale and RGB when a model expects the other.
pub fn to_channels(t: Tensor, channels: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims_3d()?;
    if c == channels {
        return Ok(t);
    }
    let plane = h * w;
    match (c, channels) {
        (3, 1) => {
            let d = t.data();
            let gray = (0..plane).map(|i| (d[i] + d[plane + i] + d[2 * plane + i]) / 3.0).collect();
            Tensor::new(vec![1, h, w], gray)
        }
        (1, 3) => Tensor::new(vec![3, h, w], t.data().repeat(3)),
        _ => Err(invalid(format!("cannot convert {c}-channel image to {channels} channels"))),
    }
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "pgm" | "ppm" | "pnm")
    )
}
