//! C ABI for the restoration toolkit.
//!
//! The surface is a handful of `extern "C"` functions over flat
//! double-precision image buffers in planar `[channel][row][column]` order,
//! an opaque model handle loaded from a checkpoint file, and integer status
//! codes that mirror the CLI's exit-code classes. Every function catches
//! panics at the boundary; nothing unwinds into the caller. Failure details
//! are kept per thread and readable via [`sfim_last_error_message`].
//!
//! Handles are not synchronized. A [`SfimModel`] may be shared across
//! threads for concurrent restores (the model is read-only after load), but
//! load and free must not race with any other call on the same handle.
//!
//! The build script generates `include/sfim.h` from this file.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use sfim_core::analyze::{flare_prior_score, quality, spectral_diff};
use sfim_core::check;
use sfim_core::cli::DatasetSpecFile;
use sfim_core::degrade::degrade_image;
use sfim_core::error::{Result, SfimError};
use sfim_core::model::Model;
use sfim_core::params::ParamStore;
use sfim_core::rng::{derive_seed, Rng};
use sfim_core::runtime::checkpoint::load_checkpoint;
use sfim_core::runtime::restore::{restore_file, restore_image, RestoreOptions};
use sfim_core::tensor::kernels::configure_threads;
use sfim_core::Tensor;

/// Call outcome. Matches the `sfim` binary's exit-code classes so embedders
/// and shell users read the same numbers.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SfimStatus {
    /// Success.
    Ok = 0,
    /// Invalid argument, malformed configuration, or shape mismatch.
    Config = 2,
    /// Numeric failure (non-finite values, failed internal check).
    Numeric = 3,
    /// File or image I/O failure.
    Io = 4,
    /// Internal panic caught at the boundary; state may be stale but the
    /// process is intact.
    Panic = 5,
}

/// A restoration model rebuilt from a checkpoint file: network weights plus
/// the architecture description stored alongside them. Opaque; create with
/// [`sfim_model_load`], release with [`sfim_model_free`].
pub struct SfimModel {
    store: ParamStore,
    model: Model,
}

/// Architecture summary filled in by [`sfim_model_info`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SfimModelInfo {
    /// Pyramid depth.
    pub levels: usize,
    /// Feature width at the finest level.
    pub width: usize,
    /// Image channels the model expects.
    pub in_channels: usize,
    /// Attention patch edge.
    pub patch: usize,
    /// Total scalar parameter count.
    pub param_count: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("unrepresentable error message").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::default());
}

fn status_of(err: &SfimError) -> SfimStatus {
    match err.exit_code() {
        2 => SfimStatus::Config,
        3 => SfimStatus::Numeric,
        _ => SfimStatus::Io,
    }
}

fn panic_text(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_string()
    }
}

/// Runs `f` with a panic guard, records the error text, maps to a status.
fn guarded(f: impl FnOnce() -> Result<()>) -> SfimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_last_error();
            SfimStatus::Ok
        }
        Ok(Err(e)) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            set_last_error(&format!("internal panic: {}", panic_text(payload)));
            SfimStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated C string.
unsafe fn path_arg(ptr: *const c_char, what: &str) -> Result<PathBuf> {
    if ptr.is_null() {
        return Err(SfimError::config(format!("{what} pointer is null")));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| SfimError::config(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `ptr` must be null or point to `channels * height * width` doubles.
unsafe fn image_arg(
    ptr: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    what: &str,
) -> Result<Tensor> {
    if ptr.is_null() {
        return Err(SfimError::config(format!("{what} pointer is null")));
    }
    let len = channels
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| SfimError::config("image extent product overflows"))?;
    if len == 0 {
        return Err(SfimError::config(format!("{what} has a zero extent")));
    }
    let data = std::slice::from_raw_parts(ptr, len).to_vec();
    Tensor::new(vec![channels, height, width], data)
}

fn write_image_out(out: *mut f64, t: &Tensor) -> Result<()> {
    if out.is_null() {
        return Err(SfimError::config("output pointer is null"));
    }
    let src = t.data();
    unsafe { std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len()) };
    Ok(())
}

fn tile_option(tile: usize) -> RestoreOptions {
    RestoreOptions { tile: if tile == 0 { None } else { Some(tile) }, ..RestoreOptions::default() }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sfim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Text for the calling thread's most recent failure, empty after a success.
/// The pointer stays valid until the same thread's next call into the
/// library.
#[no_mangle]
pub extern "C" fn sfim_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Caps the worker thread pool. Zero keeps the default (the `SFIM_THREADS`
/// environment variable if set, otherwise one thread per core). The first
/// call that takes effect wins for the life of the process.
#[no_mangle]
pub extern "C" fn sfim_set_threads(threads: usize) -> SfimStatus {
    guarded(|| {
        configure_threads(if threads == 0 { None } else { Some(threads) });
        Ok(())
    })
}

/// Loads a checkpoint file and rebuilds its model. Returns null on failure;
/// [`sfim_last_error_message`] has the reason. Free with [`sfim_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated C string.
#[no_mangle]
pub unsafe extern "C" fn sfim_model_load(path: *const c_char) -> *mut SfimModel {
    let mut handle: *mut SfimModel = std::ptr::null_mut();
    let status = guarded(|| {
        let path = path_arg(path, "checkpoint path")?;
        let checkpoint = load_checkpoint(&path)?;
        let (store, model) = checkpoint.build_model()?;
        handle = Box::into_raw(Box::new(SfimModel { store, model }));
        Ok(())
    });
    debug_assert!((status == SfimStatus::Ok) == !handle.is_null());
    handle
}

/// Releases a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer from [`sfim_model_load`] that has not
/// been freed, with no other call using it concurrently.
#[no_mangle]
pub unsafe extern "C" fn sfim_model_free(model: *mut SfimModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fills `info` with the handle's architecture summary.
///
/// # Safety
/// `model` must be a live handle from [`sfim_model_load`]; `info` must point
/// to writable memory for one `SfimModelInfo`.
#[no_mangle]
pub unsafe extern "C" fn sfim_model_info(
    model: *const SfimModel,
    info: *mut SfimModelInfo,
) -> SfimStatus {
    guarded(|| {
        if model.is_null() {
            return Err(SfimError::config("model pointer is null"));
        }
        if info.is_null() {
            return Err(SfimError::config("info pointer is null"));
        }
        let m = &*model;
        let cfg = &m.model.cfg;
        info.write(SfimModelInfo {
            levels: cfg.levels,
            width: cfg.channels.first().copied().unwrap_or(0),
            in_channels: cfg.in_channels,
            patch: cfg.patch,
            param_count: m.store.param_count(),
        });
        Ok(())
    })
}

/// Restores one planar `[channels][height][width]` image of doubles into
/// `output` (same extents, caller-allocated). Any extents work; inputs are
/// padded internally. `tile` of zero processes the frame whole; a positive
/// value restores overlapping tiles of that edge to bound memory.
///
/// # Safety
/// `model` must be a live handle. `input` must hold and `output` must have
/// room for `channels * height * width` doubles; they may not overlap.
#[no_mangle]
pub unsafe extern "C" fn sfim_model_restore(
    model: *const SfimModel,
    input: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    tile: usize,
    output: *mut f64,
) -> SfimStatus {
    guarded(|| {
        if model.is_null() {
            return Err(SfimError::config("model pointer is null"));
        }
        let m = &*model;
        let img = image_arg(input, channels, height, width, "input image")?;
        let restored = restore_image(&m.model, &m.store, &img, &tile_option(tile))?;
        write_image_out(output, &restored)
    })
}

/// One-shot file restore: loads `ckpt`, reads `input`, writes the restored
/// image to `output`. Formats follow the extensions (`.png` or the native
/// tensor format). `tile` as in [`sfim_model_restore`].
///
/// # Safety
/// All three paths must be NUL-terminated C strings.
#[no_mangle]
pub unsafe extern "C" fn sfim_restore_file(
    ckpt: *const c_char,
    input: *const c_char,
    output: *const c_char,
    tile: usize,
) -> SfimStatus {
    guarded(|| {
        let ckpt = path_arg(ckpt, "checkpoint path")?;
        let input = path_arg(input, "input path")?;
        let output = path_arg(output, "output path")?;
        restore_file(&ckpt, &input, None, &output, &tile_option(tile))?;
        Ok(())
    })
}

/// Applies a synthetic under-display degradation to a clean planar image and
/// writes the result to `output` (same extents, caller-allocated, clamped to
/// `[0, 1]`). `recipe_toml` is the same TOML recipe the CLI accepts, or null
/// for the default recipe; sampled ranges draw deterministically from
/// `seed`, matching the CLI's single-image path.
///
/// # Safety
/// `input` must hold and `output` must have room for
/// `channels * height * width` doubles; they may not overlap. `recipe_toml`
/// must be null or a NUL-terminated C string.
#[no_mangle]
pub unsafe extern "C" fn sfim_degrade(
    input: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    recipe_toml: *const c_char,
    seed: u64,
    output: *mut f64,
) -> SfimStatus {
    guarded(|| {
        let clean = image_arg(input, channels, height, width, "input image")?;
        let recipe = if recipe_toml.is_null() {
            DatasetSpecFile::default()
        } else {
            let text = CStr::from_ptr(recipe_toml)
                .to_str()
                .map_err(|_| SfimError::config("recipe is not valid UTF-8"))?;
            DatasetSpecFile::parse(text)?
        };
        let item_seed = derive_seed(seed, 0);
        let mut rng = Rng::new(item_seed);
        let spec = recipe.sample_degradation(&mut rng)?;
        let degraded = degrade_image(&clean, &spec, derive_seed(item_seed, 2))?;
        write_image_out(output, &degraded)
    })
}

/// Peak signal-to-noise ratio (dB) and mean structural similarity of a
/// restored/reference pair of planar images with identical extents.
///
/// # Safety
/// `restored` and `reference` must each hold `channels * height * width`
/// doubles; `out_psnr` and `out_ssim` must be writable or null (null skips
/// that metric).
#[no_mangle]
pub unsafe extern "C" fn sfim_quality(
    restored: *const f64,
    reference: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out_psnr: *mut f64,
    out_ssim: *mut f64,
) -> SfimStatus {
    guarded(|| {
        let r = image_arg(restored, channels, height, width, "restored image")?;
        let g = image_arg(reference, channels, height, width, "reference image")?;
        let q = quality(&r, &g)?;
        if !out_psnr.is_null() {
            out_psnr.write(q.psnr);
        }
        if !out_ssim.is_null() {
            out_ssim.write(q.ssim);
        }
        Ok(())
    })
}

/// Scores how strongly a degraded/clean pair's amplitude-spectrum difference
/// concentrates along the frequency axes relative to an isotropic floor.
/// Values well above one indicate slit-like diffraction streaks.
///
/// # Safety
/// `degraded` and `clean` must each hold `channels * height * width`
/// doubles; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfim_flare_prior_score(
    degraded: *const f64,
    clean: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out_score: *mut f64,
) -> SfimStatus {
    guarded(|| {
        if out_score.is_null() {
            return Err(SfimError::config("out_score pointer is null"));
        }
        let d = image_arg(degraded, channels, height, width, "degraded image")?;
        let c = image_arg(clean, channels, height, width, "clean image")?;
        let map = spectral_diff(&d, &c)?;
        out_score.write(flare_prior_score(&map));
        Ok(())
    })
}

/// Runs the library's built-in verification suite (kernel oracles, analytic
/// loss values, finite-difference gradient checks). Returns `Ok` when every
/// check passes; on failure the error text lists the failing checks.
#[no_mangle]
pub extern "C" fn sfim_selftest(seed: u64) -> SfimStatus {
    guarded(|| {
        let outcomes = check::selftest(seed)?;
        let failed: Vec<&str> =
            outcomes.iter().filter(|o| !o.pass).map(|o| o.name.as_str()).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(SfimError::Numeric(format!("failed checks: {}", failed.join(", "))))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_values_match_cli_exit_codes() {
        assert_eq!(SfimStatus::Ok as i32, 0);
        assert_eq!(SfimStatus::Config as i32, 2);
        assert_eq!(SfimStatus::Numeric as i32, 3);
        assert_eq!(SfimStatus::Io as i32, 4);
        assert_eq!(SfimStatus::Panic as i32, 5);
    }

    #[test]
    fn version_is_nul_terminated_package_version() {
        let v = unsafe { CStr::from_ptr(sfim_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn null_arguments_set_config_status_and_message() {
        let status = unsafe {
            sfim_model_restore(std::ptr::null(), std::ptr::null(), 1, 4, 4, 0, std::ptr::null_mut())
        };
        assert_eq!(status, SfimStatus::Config);
        let msg = unsafe { CStr::from_ptr(sfim_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("null"));
    }

    #[test]
    fn last_error_clears_after_success() {
        let bad = unsafe { sfim_model_load(std::ptr::null()) };
        assert!(bad.is_null());
        let msg = unsafe { CStr::from_ptr(sfim_last_error_message()) };
        assert!(!msg.to_bytes().is_empty());

        assert_eq!(sfim_set_threads(1), SfimStatus::Ok);
        let msg = unsafe { CStr::from_ptr(sfim_last_error_message()) };
        assert!(msg.to_bytes().is_empty());
    }
}
