//! Training objectives over the restored pyramid.
//!
//! Each level contributes a Charbonnier term, a structural term, and a
//! choice of spectral terms: separate amplitude and phase L1 distances, a
//! single complex L1 distance, or nothing. The level losses sum into one
//! scalar; weights scale the non-Charbonnier terms. Ground-truth images are
//! downsampled with the same bilinear kernel as the model's input pyramid,
//! so a perfect restoration at every level scores exactly `levels * 1e-3`
//! (the Charbonnier floor).
//!
//! Spectral terms operate on whole images, not patches, and are not
//! normalized by pixel count; weights may need rescaling across
//! resolutions.

use crate::error::{Result, SfimError};
use crate::model::image_pyramid;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Charbonnier floor constant.
pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Which spectral distance the per-level loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FftVariant {
    /// Separate amplitude and phase L1 terms.
    AmpPhase,
    /// One L1 distance on real and imaginary parts.
    ComplexL1,
    /// No spectral term.
    None,
}

/// Term weights. `lambda_amp` scales the amplitude term or, under
/// [`FftVariant::ComplexL1`], the complex term; `lambda_phase` only applies
/// under [`FftVariant::AmpPhase`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_amp: f64,
    pub lambda_phase: f64,
    pub fft_variant: FftVariant,
    /// Mean per-pixel Charbonnier instead of the global-norm form.
    pub per_pixel_charbonnier: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ssim: 1.0,
            lambda_amp: 1.0,
            lambda_phase: 1.0,
            fft_variant: FftVariant::AmpPhase,
            per_pixel_charbonnier: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ssim < 0.0 || self.lambda_amp < 0.0 || self.lambda_phase < 0.0 {
            return Err(SfimError::config("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// The configuration with every spectral term disabled.
    pub fn without_fft(mut self) -> Self {
        self.fft_variant = FftVariant::None;
        self
    }
}

/// Unweighted term values for one level plus its weighted total.
/// `amplitude` holds whichever spectral distance the variant computes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LevelTerms {
    pub charbonnier: f64,
    pub ssim: f64,
    pub amplitude: f64,
    pub phase: f64,
    pub total: f64,
}

/// Per-level terms and the grand total (the sum of level totals).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub levels: Vec<LevelTerms>,
    pub total: f64,
}

impl LossReport {
    /// One line per level plus a total line, `key=value` separated by
    /// spaces, for training logs.
    pub fn log_lines(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.levels.len() + 1);
        for (i, t) in self.levels.iter().enumerate() {
            out.push(format!(
                "loss level={} charbonnier={:.6e} ssim={:.6e} amplitude={:.6e} phase={:.6e} total={:.6e}",
                i + 1,
                t.charbonnier,
                t.ssim,
                t.amplitude,
                t.phase,
                t.total
            ));
        }
        out.push(format!("loss total={:.6e}", self.total));
        out
    }
}

/// Builds the full multi-level loss on the tape. `restored[i]` is the
/// level-`i+1` output; `gt` is the full-resolution ground truth, downsampled
/// internally to match each level. Returns the scalar loss var and the
/// numeric report.
pub fn total_loss(
    tape: &mut Tape<'_>,
    restored: &[Var],
    gt: &Tensor,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    if restored.is_empty() {
        return Err(SfimError::config("loss needs at least one restored level"));
    }
    let pyramid = image_pyramid(gt, restored.len())?;
    let mut level_reports = Vec::with_capacity(restored.len());
    let mut grand: Option<Var> = None;
    for (i, (&r, g)) in restored.iter().zip(&pyramid).enumerate() {
        if tape.value(r).shape() != g.shape() {
            return Err(SfimError::shape(format!(
                "level {} restored shape {:?} != ground truth {:?}",
                i + 1,
                tape.value(r).shape(),
                g.shape()
            )));
        }
        let charb = tape.charbonnier(r, g, CHARBONNIER_EPS, weights.per_pixel_charbonnier)?;
        let mut terms = LevelTerms {
            charbonnier: tape.value(charb).item()?,
            ssim: 0.0,
            amplitude: 0.0,
            phase: 0.0,
            total: 0.0,
        };
        let mut level_total = charb;
        if weights.lambda_ssim != 0.0 {
            let ssim = tape.ssim_loss(r, g)?;
            terms.ssim = tape.value(ssim).item()?;
            let weighted = tape.scale_shift(ssim, weights.lambda_ssim, 0.0)?;
            level_total = tape.add(level_total, weighted)?;
        }
        match weights.fft_variant {
            FftVariant::AmpPhase => {
                if weights.lambda_amp != 0.0 {
                    let amp = tape.fft_amp_loss(r, g)?;
                    terms.amplitude = tape.value(amp).item()?;
                    let weighted = tape.scale_shift(amp, weights.lambda_amp, 0.0)?;
                    level_total = tape.add(level_total, weighted)?;
                }
                if weights.lambda_phase != 0.0 {
                    let ph = tape.fft_phase_loss(r, g)?;
                    terms.phase = tape.value(ph).item()?;
                    let weighted = tape.scale_shift(ph, weights.lambda_phase, 0.0)?;
                    level_total = tape.add(level_total, weighted)?;
                }
            }
            FftVariant::ComplexL1 => {
                if weights.lambda_amp != 0.0 {
                    let cl = tape.fft_complex_l1_loss(r, g)?;
                    terms.amplitude = tape.value(cl).item()?;
                    let weighted = tape.scale_shift(cl, weights.lambda_amp, 0.0)?;
                    level_total = tape.add(level_total, weighted)?;
                }
            }
            FftVariant::None => {}
        }
        terms.total = tape.value(level_total).item()?;
        level_reports.push(terms);
        grand = Some(match grand {
            None => level_total,
            Some(acc) => tape.add(acc, level_total)?,
        });
    }
    let total_var = grand.expect("at least one level");
    let report = LossReport {
        levels: level_reports,
        total: tape.value(total_var).item()?,
    };
    Ok((total_var, report))
}
