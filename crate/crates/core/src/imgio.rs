//! PNG input and output for image tensors.
//!
//! Images map to rank-3 tensors `[c, h, w]` with values in [0, 1]: one
//! channel saves as 8-bit grayscale, three as RGB, four as RGBA. The u8 to
//! f64 mapping is `v / 255`, the inverse rounds to nearest, so a save then
//! load of 8-bit data is lossless.

use std::path::Path;

use crate::error::{Result, SfimError};
use crate::tensor::Tensor;

/// Loads an 8-bit PNG into `[c, h, w]` in [0, 1]. Images with an alpha
/// channel load as 4 channels, otherwise 3.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let dynimg = image::ImageReader::open(path)?.decode()?;
    let (c, w, h, bytes) = if dynimg.color().has_alpha() {
        let img = dynimg.to_rgba8();
        let (w, h) = img.dimensions();
        (4usize, w as usize, h as usize, img.into_raw())
    } else {
        let img = dynimg.to_rgb8();
        let (w, h) = img.dimensions();
        (3usize, w as usize, h as usize, img.into_raw())
    };
    // PNG bytes are interleaved per pixel; tensors are planar per channel.
    let mut data = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = bytes[(y * w + x) * c + ch] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Saves `[c, h, w]` with c in {1, 3, 4} as an 8-bit PNG. Values are
/// clamped to [0, 1] then rounded to the nearest of 255 steps.
pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.dims3()?;
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        other => {
            return Err(SfimError::shape(format!(
                "PNG export needs 1, 3, or 4 channels, got {other}"
            )))
        }
    };
    let data = t.data();
    let mut bytes = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = data[(ch * h + y) * w + x].clamp(0.0, 1.0);
                bytes[(y * w + x) * c + ch] = (v * 255.0).round() as u8;
            }
        }
    }
    image::save_buffer(path, &bytes, w as u32, h as u32, color)?;
    Ok(())
}
