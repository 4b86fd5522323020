//! PNG/JPEG decoding into raw RGB bitmaps.

use std::path::Path;

use imp_core::vision::RgbImage;
use imp_core::{Error, Result};

/// Decodes PNG or JPEG bytes, detected from their signature.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let format = image::guess_format(bytes).map_err(|e| Error::Format(format!("unrecognised image data: {e}")))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(Error::Format(format!(
            "unsupported image format {format:?}; expected PNG or JPEG"
        )));
    }
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Format(format!("cannot decode {format:?} image: {e}")))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(w as usize, h as usize, img.into_raw())
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    decode_image(&bytes)
}

/// PNG encoding of `img`, mainly for fixtures.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::Argument("pixel buffer does not match image size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}
