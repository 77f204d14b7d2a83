//! Synthetic under-display degradation and paired-dataset generation.
//!
//! Light passing the display's pixel openings diffracts; in the far-field
//! (Fraunhofer) approximation the point spread function is the squared
//! magnitude of the aperture's 2-D Fourier transform. Slit-like openings
//! therefore smear bright sources into long streaks orthogonal to the slit.
//! The degradation pipeline applies, in order: highlight boost (stand-in
//! for HDR sources on 8-bit-range inputs), PSF convolution, transmittance
//! scaling, Gaussian blur, Gaussian noise, and a clip to [0, 1]. Every step
//! is deterministic given the seed.
//!
//! [`make_dataset`] renders procedural scenes (point lights on dark ground,
//! flare-dominant; smooth textures, blur/noise-dominant) or reads a PNG
//! directory, degrades each clean image with sampled parameters, and writes
//! raw tensor pairs plus a text manifest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, SfimError};
use crate::imgio;
use crate::rng::{derive_seed, Rng};
use crate::tensor::fft::fft2_raw;
use crate::tensor::kernels::{self, PadMode};
use crate::tensor::Tensor;

/// Display-opening transmission map, `[h, w]` in [0, 1].
#[derive(Debug, Clone)]
pub struct ApertureMask(pub Tensor);

impl ApertureMask {
    pub fn new(t: Tensor) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 2 {
            return Err(SfimError::shape(format!("aperture mask must be rank 2, got {shape:?}")));
        }
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(SfimError::config("aperture values must lie in [0, 1]"));
        }
        if t.data().iter().all(|&v| v == 0.0) {
            return Err(SfimError::config("aperture mask is fully opaque"));
        }
        Ok(ApertureMask(t))
    }

    /// Fully open square aperture.
    pub fn open(edge: usize) -> Self {
        ApertureMask(Tensor::full(&[edge, edge], 1.0))
    }

    /// Vertical slit of the given width centered horizontally.
    pub fn vertical_slit(edge: usize, slit_width: usize) -> Self {
        let mut data = vec![0.0; edge * edge];
        let start = (edge - slit_width.min(edge)) / 2;
        for y in 0..edge {
            for x in start..(start + slit_width.min(edge)) {
                data[y * edge + x] = 1.0;
            }
        }
        ApertureMask(Tensor::new(vec![edge, edge], data).unwrap())
    }

    /// Horizontal slit of the given height centered vertically.
    pub fn horizontal_slit(edge: usize, slit_height: usize) -> Self {
        let mut data = vec![0.0; edge * edge];
        let start = (edge - slit_height.min(edge)) / 2;
        for y in start..(start + slit_height.min(edge)) {
            for x in 0..edge {
                data[y * edge + x] = 1.0;
            }
        }
        ApertureMask(Tensor::new(vec![edge, edge], data).unwrap())
    }

    /// Open rows and columns every `period` pixels (a pixel-grid lattice).
    pub fn grid(edge: usize, period: usize) -> Self {
        let mut data = vec![0.0; edge * edge];
        for y in 0..edge {
            for x in 0..edge {
                if y % period == 0 || x % period == 0 {
                    data[y * edge + x] = 1.0;
                }
            }
        }
        ApertureMask(Tensor::new(vec![edge, edge], data).unwrap())
    }
}

/// Far-field PSF of an aperture: `|FFT2(mask)|^2`, DC shifted to the center,
/// cropped to `k x k`, normalized to unit sum. `k` must be odd and no larger
/// than either mask extent so the crop is centered.
pub fn aperture_to_psf(mask: &ApertureMask, k: usize) -> Result<Tensor> {
    let (h, w) = {
        let s = mask.0.shape();
        (s[0], s[1])
    };
    if k == 0 || k % 2 == 0 {
        return Err(SfimError::config(format!("psf size must be odd and positive, got {k}")));
    }
    if k > h || k > w {
        return Err(SfimError::config(format!("psf size {k} exceeds mask extent {h}x{w}")));
    }
    let mut re = mask.0.data().to_vec();
    let mut im = vec![0.0; h * w];
    fft2_raw(&mut re, &mut im, h, w, false);
    // Power spectrum, then fftshift so DC sits at (h/2, w/2).
    let mut power = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = (y + h / 2) % h;
            let sx = (x + w / 2) % w;
            let idx = y * w + x;
            power[sy * w + sx] = re[idx] * re[idx] + im[idx] * im[idx];
        }
    }
    let (cy, cx) = (h / 2, w / 2);
    let mut out = vec![0.0; k * k];
    for y in 0..k {
        for x in 0..k {
            let sy = cy + y - k / 2;
            let sx = cx + x - k / 2;
            out[y * k + x] = power[sy * w + sx];
        }
    }
    let sum: f64 = out.iter().sum();
    if sum <= 0.0 {
        return Err(SfimError::Numeric("psf crop captured no energy".into()));
    }
    out.iter_mut().for_each(|v| *v /= sum);
    Tensor::new(vec![k, k], out)
}

/// Full degradation recipe. The PSF is shared across channels.
#[derive(Debug, Clone)]
pub struct DegradationSpec {
    /// `[k, k]`, k odd, sums to 1.
    pub psf: Tensor,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub transmittance: f64,
    /// Intensity above which a pixel counts as a highlight.
    pub saturation: f64,
    /// Multiplier applied to highlight pixels before convolution.
    pub highlight_boost: f64,
}

impl DegradationSpec {
    /// The spec that leaves images untouched.
    pub fn identity() -> Self {
        DegradationSpec {
            psf: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            transmittance: 1.0,
            saturation: 0.9,
            highlight_boost: 1.0,
        }
    }

    /// Default flare-producing recipe: vertical-slit aperture PSF with mild
    /// blur, noise, and light loss.
    pub fn default_flare() -> Self {
        let mask = ApertureMask::vertical_slit(64, 3);
        DegradationSpec {
            psf: aperture_to_psf(&mask, 31).expect("static mask is valid"),
            noise_sigma: 0.01,
            blur_sigma: 1.0,
            transmittance: 0.7,
            saturation: 0.9,
            highlight_boost: 8.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.psf.shape();
        let [k, k2] = shape[..] else {
            return Err(SfimError::shape(format!("psf must be rank 2, got {shape:?}")));
        };
        if k != k2 || k % 2 == 0 {
            return Err(SfimError::config(format!("psf must be square with odd edge, got {shape:?}")));
        }
        let sum: f64 = self.psf.data().iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.psf.data().iter().any(|&v| v < 0.0) {
            return Err(SfimError::config("psf must be nonnegative and sum to 1"));
        }
        if self.noise_sigma < 0.0 || self.blur_sigma < 0.0 {
            return Err(SfimError::config("noise and blur sigmas must be nonnegative"));
        }
        if !(self.transmittance > 0.0 && self.transmittance <= 1.0) {
            return Err(SfimError::config("transmittance must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.saturation) || self.highlight_boost < 1.0 {
            return Err(SfimError::config(
                "saturation must lie in [0, 1] and highlight boost be at least 1",
            ));
        }
        Ok(())
    }
}

/// Applies the degradation pipeline to a clean `[c, h, w]` image in [0, 1].
pub fn degrade_image(clean: &Tensor, spec: &DegradationSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = clean.dims3()?;
    clean.assert_finite("degrade input")?;

    let mut data = clean.data().to_vec();
    if spec.highlight_boost > 1.0 {
        for v in &mut data {
            if *v > spec.saturation {
                *v *= spec.highlight_boost;
            }
        }
    }

    let k = spec.psf.shape()[0];
    if k > 1 {
        // Shared kernel per channel; the power-spectrum PSF is
        // centrosymmetric, so convolution equals correlation.
        let mut weight = Vec::with_capacity(c * k * k);
        for _ in 0..c {
            weight.extend_from_slice(spec.psf.data());
        }
        data = kernels::depthwise_conv2d(
            &data,
            c,
            h,
            w,
            &weight,
            &vec![0.0; c],
            1,
            k,
            k / 2,
            PadMode::Reflect,
        );
    }

    if spec.transmittance < 1.0 {
        for v in &mut data {
            *v *= spec.transmittance;
        }
    }
    if spec.blur_sigma > 0.0 {
        data = kernels::gaussian_blur(&data, c, h, w, spec.blur_sigma);
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = Rng::new(seed);
        for v in &mut data {
            *v += spec.noise_sigma * rng.gaussian();
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![c, h, w], data)
}

/// Procedural clean-scene families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// A few saturated disks on a dark background; flares dominate.
    PointLights,
    /// Smooth multi-frequency texture; blur and noise dominate.
    Textured,
}

/// Renders one clean scene in [0, 1].
pub fn procedural_scene(kind: SceneKind, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let mut data = vec![0.0; c * h * w];
    match kind {
        SceneKind::PointLights => {
            let base = rng.uniform(0.01, 0.05);
            data.fill(base);
            let lights = 3 + rng.below(5);
            for _ in 0..lights {
                let cy = rng.uniform(0.1, 0.9) * h as f64;
                let cx = rng.uniform(0.1, 0.9) * w as f64;
                let radius = rng.uniform(1.0, 3.0);
                let brightness = rng.uniform(0.95, 1.0);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            if d2 <= radius * radius {
                                data[(ch * h + y) * w + x] = brightness;
                            }
                        }
                    }
                }
            }
        }
        SceneKind::Textured => {
            // Sum of random low-frequency sinusoids per channel, squashed
            // into a mid-intensity band so no pixel counts as a highlight.
            for ch in 0..c {
                let waves: Vec<(f64, f64, f64, f64)> = (0..4)
                    .map(|_| {
                        (
                            rng.uniform(0.5, 4.0),
                            rng.uniform(0.5, 4.0),
                            rng.uniform(0.0, std::f64::consts::TAU),
                            rng.uniform(0.2, 1.0),
                        )
                    })
                    .collect();
                for y in 0..h {
                    for x in 0..w {
                        let mut v = 0.0;
                        for &(fy, fx, phase, amp) in &waves {
                            v += amp
                                * (std::f64::consts::TAU
                                    * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                                    + phase)
                                    .sin();
                        }
                        data[(ch * h + y) * w + x] = 0.45 + 0.35 * (v / 4.0);
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], data).expect("procedural extents are consistent")
}

/// Where clean images come from.
#[derive(Debug, Clone)]
pub enum CleanSource {
    /// PNGs in a directory (sorted by name, cycled, center-cropped).
    Directory(PathBuf),
    /// Procedural scenes; `flare_fraction` of items use point lights.
    Procedural { flare_fraction: f64 },
}

/// Dataset recipe: scene source, extents, and per-item degradation ranges
/// sampled uniformly.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub source: CleanSource,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub psf: Tensor,
    pub noise_sigma: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub transmittance: (f64, f64),
    pub saturation: f64,
    pub highlight_boost: f64,
}

impl DatasetSpec {
    /// 64x64 RGB procedural pairs with the default flare PSF.
    pub fn desk_default() -> Self {
        DatasetSpec {
            source: CleanSource::Procedural { flare_fraction: 0.5 },
            channels: 3,
            height: 64,
            width: 64,
            psf: DegradationSpec::default_flare().psf,
            noise_sigma: (0.005, 0.02),
            blur_sigma: (0.5, 1.5),
            transmittance: (0.6, 0.85),
            saturation: 0.9,
            highlight_boost: 8.0,
        }
    }
}

/// One generated pair.
#[derive(Debug, Clone)]
pub struct PairRecord {
    pub id: usize,
    pub clean_path: PathBuf,
    pub degraded_path: PathBuf,
    pub kind: String,
    pub spec_line: String,
}

/// Generates `n` pairs under `dir`, returning the records also written to
/// `manifest.txt`. Identical inputs and seed produce identical bytes.
pub fn make_dataset(dir: &Path, ds: &DatasetSpec, n: usize, seed: u64) -> Result<Vec<PairRecord>> {
    fs::create_dir_all(dir)?;
    let source_files = match &ds.source {
        CleanSource::Directory(src) => {
            let mut files: Vec<PathBuf> = fs::read_dir(src)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(SfimError::config(format!(
                    "no .png files in source directory {}",
                    src.display()
                )));
            }
            Some(files)
        }
        CleanSource::Procedural { flare_fraction } => {
            if !(0.0..=1.0).contains(flare_fraction) {
                return Err(SfimError::config("flare_fraction must lie in [0, 1]"));
            }
            None
        }
    };

    let mut records = Vec::with_capacity(n);
    let mut manifest = String::new();
    manifest.push_str(&format!("dataset n={n} seed={seed}\n"));
    for i in 0..n {
        let item_seed = derive_seed(seed, i as u64);
        let mut rng = Rng::new(item_seed);
        let (clean, kind) = match (&ds.source, &source_files) {
            (CleanSource::Directory(_), Some(files)) => {
                let img = imgio::load_png(&files[i % files.len()])?;
                (center_crop(&img, ds.channels, ds.height, ds.width)?, "file".to_string())
            }
            (CleanSource::Procedural { flare_fraction }, _) => {
                let kind = if rng.next_f64() < *flare_fraction {
                    SceneKind::PointLights
                } else {
                    SceneKind::Textured
                };
                let scene = procedural_scene(
                    kind,
                    ds.channels,
                    ds.height,
                    ds.width,
                    derive_seed(item_seed, 1),
                );
                let name = match kind {
                    SceneKind::PointLights => "point_lights",
                    SceneKind::Textured => "textured",
                };
                (scene, name.to_string())
            }
            _ => unreachable!("source_files is Some iff source is Directory"),
        };
        let spec = DegradationSpec {
            psf: ds.psf.clone(),
            noise_sigma: rng.uniform(ds.noise_sigma.0, ds.noise_sigma.1),
            blur_sigma: rng.uniform(ds.blur_sigma.0, ds.blur_sigma.1),
            transmittance: rng.uniform(ds.transmittance.0, ds.transmittance.1),
            saturation: ds.saturation,
            highlight_boost: ds.highlight_boost,
        };
        let degraded = degrade_image(&clean, &spec, derive_seed(item_seed, 2))?;

        let clean_path = dir.join(format!("{i:05}_clean.sftn"));
        let degraded_path = dir.join(format!("{i:05}_degraded.sftn"));
        clean.save(&clean_path)?;
        degraded.save(&degraded_path)?;
        let spec_line = format!(
            "pair id={i:05} kind={kind} clean={} degraded={} noise_sigma={:.6} blur_sigma={:.6} transmittance={:.6}",
            clean_path.file_name().unwrap().to_string_lossy(),
            degraded_path.file_name().unwrap().to_string_lossy(),
            spec.noise_sigma,
            spec.blur_sigma,
            spec.transmittance
        );
        manifest.push_str(&spec_line);
        manifest.push('\n');
        records.push(PairRecord { id: i, clean_path, degraded_path, kind, spec_line });
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(records)
}

fn center_crop(img: &Tensor, channels: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c, ih, iw) = img.dims3()?;
    if c < channels || ih < h || iw < w {
        return Err(SfimError::shape(format!(
            "source image {c}x{ih}x{iw} smaller than requested {channels}x{h}x{w}"
        )));
    }
    let (oy, ox) = ((ih - h) / 2, (iw - w) / 2);
    let mut data = vec![0.0; channels * h * w];
    for ch in 0..channels {
        for y in 0..h {
            for x in 0..w {
                data[(ch * h + y) * w + x] = img.data()[(ch * ih + oy + y) * iw + ox + x];
            }
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marginal_energy(psf: &Tensor) -> (f64, f64) {
        let k = psf.shape()[0];
        let c = k / 2;
        let mut horizontal = 0.0;
        let mut vertical = 0.0;
        for i in 0..k {
            horizontal += psf.data()[c * k + i];
            vertical += psf.data()[i * k + c];
        }
        (horizontal, vertical)
    }

    #[test]
    fn open_aperture_collapses_to_a_centered_delta() {
        let psf = aperture_to_psf(&ApertureMask::open(32), 9).unwrap();
        let c = 4 * 9 + 4;
        assert!((psf.data()[c] - 1.0).abs() < 1e-12);
        let off_center: f64 = psf.data().iter().enumerate().filter(|&(i, _)| i != c).map(|(_, &v)| v).sum();
        assert!(off_center < 1e-12);
    }

    #[test]
    fn vertical_slit_smears_horizontally() {
        let psf = aperture_to_psf(&ApertureMask::vertical_slit(64, 3), 31).unwrap();
        let (h, v) = marginal_energy(&psf);
        assert!(h > 2.0 * v, "horizontal {h} vs vertical {v}");
    }

    #[test]
    fn horizontal_slit_smears_vertically() {
        let psf = aperture_to_psf(&ApertureMask::horizontal_slit(64, 3), 31).unwrap();
        let (h, v) = marginal_energy(&psf);
        assert!(v > 2.0 * h, "horizontal {h} vs vertical {v}");
    }

    #[test]
    fn grid_aperture_produces_harmonic_sidelobes() {
        // Period-8 lattice on a 32-edge mask puts spectral energy only on
        // multiples of 32/8 = 4 in each axis.
        let psf = aperture_to_psf(&ApertureMask::grid(32, 8), 31).unwrap();
        let k = 31;
        let c = k / 2;
        let max = psf.data().iter().cloned().fold(0.0, f64::max);
        let mut sidelobes = 0;
        for y in 0..k {
            for x in 0..k {
                let v = psf.data()[y * k + x];
                if v > 1e-9 * max {
                    let (dy, dx) = (y as i64 - c as i64, x as i64 - c as i64);
                    assert_eq!((dy % 4, dx % 4), (0, 0), "energy off-lattice at ({dy},{dx})");
                    if (dy, dx) != (0, 0) {
                        sidelobes += 1;
                    }
                }
            }
        }
        assert!(sidelobes >= 2, "expected sidelobes, found {sidelobes}");
    }

    #[test]
    fn psf_is_normalized_and_rejects_opaque_masks() {
        let psf = aperture_to_psf(&ApertureMask::vertical_slit(32, 2), 15).unwrap();
        let sum: f64 = psf.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(psf.data().iter().all(|&v| v >= 0.0));
        assert!(ApertureMask::new(Tensor::zeros(&[8, 8])).is_err());
        assert!(aperture_to_psf(&ApertureMask::open(8), 4).is_err());
    }

    #[test]
    fn identity_spec_leaves_the_image_untouched() {
        let clean = procedural_scene(SceneKind::Textured, 3, 24, 24, 3);
        let out = degrade_image(&clean, &DegradationSpec::identity(), 9).unwrap();
        assert_eq!(out.data(), clean.data());
    }

    #[test]
    fn transmittance_alone_scales_the_image() {
        let clean = procedural_scene(SceneKind::Textured, 3, 16, 16, 5);
        let spec = DegradationSpec { transmittance: 0.5, ..DegradationSpec::identity() };
        let out = degrade_image(&clean, &spec, 9).unwrap();
        for (got, want) in out.data().iter().zip(clean.data()) {
            assert!((got - 0.5 * want).abs() < 1e-15);
        }
    }

    #[test]
    fn degradation_is_deterministic_per_seed() {
        let clean = procedural_scene(SceneKind::PointLights, 3, 32, 32, 7);
        let spec = DegradationSpec::default_flare();
        let a = degrade_image(&clean, &spec, 11).unwrap();
        let b = degrade_image(&clean, &spec, 11).unwrap();
        let c = degrade_image(&clean, &spec, 12).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn default_flare_spec_degrades_a_bright_scene_below_25_db() {
        let clean = procedural_scene(SceneKind::PointLights, 3, 64, 64, 13);
        let degraded = degrade_image(&clean, &DegradationSpec::default_flare(), 15).unwrap();
        let mse: f64 = clean
            .data()
            .iter()
            .zip(degraded.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / clean.numel() as f64;
        let psnr = 10.0 * (1.0 / mse).log10();
        assert!(psnr < 25.0, "flare degradation too mild: {psnr:.2} dB");
    }

    #[test]
    fn out_of_range_specs_are_rejected() {
        let mut spec = DegradationSpec::identity();
        spec.transmittance = 0.0;
        assert!(spec.validate().is_err());
        let mut spec = DegradationSpec::identity();
        spec.noise_sigma = -0.1;
        assert!(spec.validate().is_err());
        let mut spec = DegradationSpec::identity();
        spec.psf = Tensor::new(vec![3, 3], vec![0.5; 9]).unwrap();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn dataset_generation_is_reproducible_and_paired() {
        let dir = tempfile::tempdir().unwrap();
        let ds = DatasetSpec { height: 16, width: 16, ..DatasetSpec::desk_default() };
        let a = make_dataset(&dir.path().join("a"), &ds, 4, 42).unwrap();
        let b = make_dataset(&dir.path().join("b"), &ds, 4, 42).unwrap();
        assert_eq!(a.len(), 4);
        for (ra, rb) in a.iter().zip(&b) {
            let ca = fs::read(&ra.clean_path).unwrap();
            let cb = fs::read(&rb.clean_path).unwrap();
            assert_eq!(ca, cb);
            let da = fs::read(&ra.degraded_path).unwrap();
            let db = fs::read(&rb.degraded_path).unwrap();
            assert_eq!(da, db);
            let clean = Tensor::load(&ra.clean_path).unwrap();
            let degraded = Tensor::load(&ra.degraded_path).unwrap();
            assert_eq!(clean.shape(), degraded.shape());
        }
        let manifest = fs::read_to_string(dir.path().join("a/manifest.txt")).unwrap();
        assert_eq!(manifest.lines().count(), 5);
        let empty = make_dataset(&dir.path().join("c"), &ds, 0, 42).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn directory_source_reads_and_crops_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        fs::create_dir_all(&src).unwrap();
        let img = procedural_scene(SceneKind::Textured, 3, 24, 20, 17);
        imgio::save_png(&src.join("scene.png"), &img).unwrap();
        let ds = DatasetSpec {
            source: CleanSource::Directory(src.clone()),
            height: 16,
            width: 16,
            ..DatasetSpec::desk_default()
        };
        let recs = make_dataset(&dir.path().join("out"), &ds, 2, 7).unwrap();
        assert_eq!(recs.len(), 2);
        let clean = Tensor::load(&recs[0].clean_path).unwrap();
        assert_eq!(clean.shape(), &[3, 16, 16]);
        let empty_src = dir.path().join("empty");
        fs::create_dir_all(&empty_src).unwrap();
        let ds_empty = DatasetSpec { source: CleanSource::Directory(empty_src), ..ds };
        assert!(make_dataset(&dir.path().join("out2"), &ds_empty, 1, 7).is_err());
    }
}
