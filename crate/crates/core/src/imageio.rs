//! 8-bit RGB PNG/PPM reading and writing as `[3,H,W]` tensors in `[0,1]`.

use std::path::Path;

use image::{ColorType, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn format_of(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::Data(format!("{}: only .png and .ppm images are supported", path.display()))),
    }
}

/// Whether the extension names a supported image format.
pub fn is_image_path(path: &Path) -> bool {
    format_of(path).is_ok()
}

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let inv = 1.0 / 255.0;
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::cst(raw[p * 3 + c] as f64 * inv)
    })
}

/// Rounds to 8 bits after clamping to `[0,1]`.
pub fn tensor_to_rgb<T: Scalar>(x: &Tensor<T>) -> Result<RgbImage> {
    let d = x.dims4()?;
    if d.c != 3 || d.b != 1 {
        return Err(Error::InvalidShape(format!("expected [3,H,W], got {:?}", x.shape())));
    }
    let plane = d.h * d.w;
    let mut raw = vec![0u8; 3 * plane];
    for (i, px) in raw.iter_mut().enumerate() {
        let (p, c) = (i / 3, i % 3);
        let v = x.data()[c * plane + p].f64().clamp(0.0, 1.0);
        *px = (v * 255.0).round() as u8;
    }
    RgbImage::from_raw(d.w as u32, d.h as u32, raw).ok_or_else(|| Error::Data("image buffer size".into()))
}

/// Loads an 8-bit RGB image; images with alpha or other layouts are rejected.
pub fn load_rgb<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let fmt = format_of(path)?;
    let bytes = std::fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, fmt)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    match img.color() {
        ColorType::Rgb8 => Ok(rgb_to_tensor(&img.into_rgb8())),
        c if c.has_alpha() => Err(Error::Data(format!(
            "{}: images with an alpha channel are not supported",
            path.display()
        ))),
        c => Err(Error::Data(format!(
            "{}: expected 8-bit RGB, found {c:?}",
            path.display()
        ))),
    }
}

pub fn save_rgb<T: Scalar>(path: &Path, x: &Tensor<T>) -> Result<()> {
    let fmt = format_of(path)?;
    tensor_to_rgb(x)?.save_with_format(path, fmt)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let x = Tensor::<f32>::from_fn(&[3, 5, 7], |i| (i % 256) as f32 / 255.0);
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_rgb(&p, &x).unwrap();
            let y: Tensor<f32> = load_rgb(&p).unwrap();
            assert_eq!(y.shape(), &[3, 5, 7]);
            for (a, b) in x.data().iter().zip(y.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn alpha_and_unknown_formats_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        image::RgbaImage::new(4, 4).save(&p).unwrap();
        let err = load_rgb::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        assert!(load_rgb::<f32>(&dir.path().join("x.jpg")).is_err());
    }
}
