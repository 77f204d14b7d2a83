//! Full-image inference: pads arbitrary extents up to the model's alignment,
//! runs the forward pass, and crops back. Images larger than the configured
//! tile size are processed in overlapping tiles whose seams are feathered
//! with linear ramps, keeping memory bounded on large frames.

use std::path::Path;

use crate::analyze::{quality, QualityReport};
use crate::error::{Result, SfimError};
use crate::imgio;
use crate::model::Model;
use crate::params::ParamStore;
use crate::runtime::checkpoint::load_checkpoint;
use crate::tensor::kernels::reflect_index;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestoreOptions {
    /// Tile edge; images with a larger extent are processed in tiles.
    /// `None` disables tiling regardless of size.
    pub tile: Option<usize>,
    /// Tile overlap in pixels, feathered on interior seams.
    pub overlap: usize,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        RestoreOptions { tile: Some(256), overlap: 16 }
    }
}

impl RestoreOptions {
    fn validate(&self) -> Result<()> {
        if let Some(t) = self.tile {
            if t <= self.overlap {
                return Err(SfimError::config(format!(
                    "tile {t} must exceed the {}-pixel overlap",
                    self.overlap
                )));
            }
        }
        Ok(())
    }
}

/// Restores one `[c, h, w]` image with the given model, any extents.
pub fn restore_image(
    model: &Model,
    store: &ParamStore,
    img: &Tensor,
    opts: &RestoreOptions,
) -> Result<Tensor> {
    opts.validate()?;
    let (c, h, w) = img.dims3()?;
    if c != model.cfg.in_channels {
        return Err(SfimError::shape(format!(
            "image has {c} channels, model expects {}",
            model.cfg.in_channels
        )));
    }
    match opts.tile {
        Some(t) if h.max(w) > t => restore_tiled(model, store, img, t, opts.overlap),
        _ => forward_padded(model, store, img),
    }
}

/// Pads reflectively to the model's alignment, runs the network, crops back.
fn forward_padded(model: &Model, store: &ParamStore, img: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    // Full patches at every pyramid level: align to 2^(L-1) * P.
    let align = model.cfg.extent_divisor() * model.cfg.patch;
    let ph = h.div_ceil(align) * align;
    let pw = w.div_ceil(align) * align;
    let padded = pad_reflect_bottom_right(img, ph, pw)?;

    let mut tape = Tape::new(store);
    let input = tape.leaf(padded);
    let out = model.forward(&mut tape, input)?;
    let full = tape.value(out.restored[0]);

    if (ph, pw) == (h, w) {
        return Ok(full.clone());
    }
    let src = full.data();
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * ph + y) * pw;
            data.extend_from_slice(&src[row..row + w]);
        }
    }
    Tensor::new(vec![c, h, w], data)
}

fn restore_tiled(
    model: &Model,
    store: &ParamStore,
    img: &Tensor,
    tile: usize,
    overlap: usize,
) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let mut acc = vec![0.0; c * h * w];
    let mut wsum = vec![0.0; h * w];
    for y0 in tile_starts(h, tile, overlap) {
        let th = tile.min(h - y0);
        let wy = axis_feather(y0, th, h, overlap);
        for x0 in tile_starts(w, tile, overlap) {
            let tw = tile.min(w - x0);
            let wx = axis_feather(x0, tw, w, overlap);
            let patch = crop(img, c, h, w, y0, x0, th, tw)?;
            let restored = forward_padded(model, store, &patch)?;
            let rdata = restored.data();
            for ch in 0..c {
                for dy in 0..th {
                    let fy = wy[dy];
                    let out_row = (ch * h + y0 + dy) * w + x0;
                    let in_row = (ch * th + dy) * tw;
                    for dx in 0..tw {
                        acc[out_row + dx] += fy * wx[dx] * rdata[in_row + dx];
                        if ch == 0 {
                            wsum[(y0 + dy) * w + x0 + dx] += fy * wx[dx];
                        }
                    }
                }
            }
        }
    }
    for ch in 0..c {
        for i in 0..h * w {
            acc[ch * h * w + i] /= wsum[i];
        }
    }
    Tensor::new(vec![c, h, w], acc)
}

/// Tile origins covering `[0, n)`: stride `tile - overlap`, last tile flush
/// with the far edge so every pixel is covered by a full tile when n >= tile.
fn tile_starts(n: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if n <= tile {
        return vec![0];
    }
    let step = tile - overlap;
    let mut starts = Vec::new();
    let mut y = 0;
    loop {
        if y + tile >= n {
            starts.push(n - tile);
            return starts;
        }
        starts.push(y);
        y += step;
    }
}

/// Per-pixel blend weight along one axis: 1 in the interior, a linear ramp
/// over `overlap` pixels on any edge that has a neighboring tile.
fn axis_feather(start: usize, len: usize, full: usize, overlap: usize) -> Vec<f64> {
    let ramp = overlap.max(1) as f64;
    (0..len)
        .map(|i| {
            let mut v: f64 = 1.0;
            if start > 0 {
                v = v.min((i + 1) as f64 / ramp);
            }
            if start + len < full {
                v = v.min((len - i) as f64 / ramp);
            }
            v.min(1.0)
        })
        .collect()
}

fn crop(
    t: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    y0: usize,
    x0: usize,
    th: usize,
    tw: usize,
) -> Result<Tensor> {
    let src = t.data();
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        for dy in 0..th {
            let row = (ch * h + y0 + dy) * w + x0;
            out.extend_from_slice(&src[row..row + tw]);
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

fn pad_reflect_bottom_right(t: &Tensor, ph: usize, pw: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let src = t.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect_index(y as isize, h);
            for x in 0..pw {
                let sx = reflect_index(x as isize, w);
                out.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, ph, pw], out)
}

/// File-level restore: loads a checkpoint, reads a PNG or raw tensor by
/// extension, restores, writes the result in the input's format, and scores
/// against ground truth when given.
pub fn restore_file(
    ckpt: &Path,
    input: &Path,
    gt: Option<&Path>,
    output: &Path,
    opts: &RestoreOptions,
) -> Result<Option<QualityReport>> {
    let checkpoint = load_checkpoint(ckpt)?;
    let (store, model) = checkpoint.build_model()?;
    let img = read_image(input)?;
    let restored = restore_image(&model, &store, &img, opts)?;
    write_image(output, &restored)?;
    match gt {
        Some(gt_path) => {
            let reference = read_image(gt_path)?;
            Ok(Some(quality(&restored, &reference)?))
        }
        None => Ok(None),
    }
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("sftn") => Tensor::load(path),
        Some("png") => imgio::load_png(path),
        other => Err(SfimError::config(format!(
            "unsupported image extension {other:?}, use .png or .sftn"
        ))),
    }
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("sftn") => t.save(path),
        Some("png") => imgio::save_png(path, t),
        other => Err(SfimError::config(format!(
            "unsupported image extension {other:?}, use .png or .sftn"
        ))),
    }
}
