//! Grayscale image I/O.
//!
//! Luminescence captures are stored as 16-bit single-channel images. Writing
//! always produces 16-bit PNG; reading accepts PNG and PGM, widening 8-bit
//! sources to the 16-bit range.

use crate::error::{Error, Result};
use image::{ImageBuffer, Luma};
use std::path::Path;

/// Saves `data` (row-major, `h * w` values) as a 16-bit grayscale PNG.
pub fn save_png16(path: &Path, h: usize, w: usize, data: &[u16]) -> Result<()> {
    if data.len() != h * w || h == 0 || w == 0 {
        return Err(Error::invalid(
            "save_png16",
            format!("{} values for {h}x{w} image", data.len()),
        ));
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_vec(w as u32, h as u32, data.to_vec())
            .expect("length checked above");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.into(), source })
}

/// Loads a grayscale image, returning `(h, w, data)` row-major.
pub fn load_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
    let gray = img.into_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Data(format!("{}: empty image", path.display())));
    }
    Ok((h, w, gray.into_raw()))
}
