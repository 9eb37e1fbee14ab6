//! Raster file I/O: RGB images as `(H, W, 3)` byte arrays.
//!
//! PNG and TIFF are supported on both read and write; the format is chosen
//! by file extension.

use std::path::Path;

use image::RgbImage;
use ndarray::Array3;

use crate::error::{Error, Result};

/// Loads any supported raster and converts it to 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    Ok(Array3::from_shape_vec((h, w, 3), raw).expect("decoder size contract"))
}

/// Saves an `(H, W, 3)` array as PNG or TIFF depending on the extension.
pub fn save_rgb(path: &Path, data: &Array3<u8>) -> Result<()> {
    let (h, w, c) = data.dim();
    if c != 3 {
        return Err(Error::Shape(format!(
            "expected 3 channels to save {}, got {c}",
            path.display()
        )));
    }
    let raw: Vec<u8> = if let Some(slice) = data.as_slice() {
        slice.to_vec()
    } else {
        data.iter().copied().collect()
    };
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("raw buffer length");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
