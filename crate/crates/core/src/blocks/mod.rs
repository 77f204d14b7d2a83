//! Building blocks of the restoration network.
//!
//! Every block is a plain struct of parameter ids plus a `forward` that
//! records ops on a [`Tape`](crate::tensor::tape::Tape). Blocks never own
//! tensor data; all state lives in the [`ParamStore`](crate::params::ParamStore)
//! so the optimizer and checkpoints see one flat parameter list.
//!
//! Layout:
//! - [`spatial`]: residual dense blocks and their shallow stack.
//! - [`frequency`]: spectral attention, gated spectral feed-forward, and
//!   the pair that forms one frequency stage.
//! - [`attention`]: channel and spatial reweighting plus the multi-level
//!   input fusion with its gating path.
//! - [`fusion`]: supervised attention between decoder levels and the
//!   feature adaptation that merges encoder scales.
//!
//! Convention: parameters are named `{prefix}.{part}.{w|b}` so a block can
//! be located in a checkpoint by its prefix alone.

pub mod attention;
pub mod frequency;
pub mod fusion;
pub mod spatial;

pub use attention::{Amib, AmibSwitches, ChannelAttention, SpatialAttention};
pub use frequency::{Dffn, Fdb, Fsas};
pub use fusion::{Fam, Sam};
pub use spatial::{Rdb, Sdb};

use crate::params::{Init, PId, ParamStore};

/// Allocates a conv weight `[c_out, c_in, k, k]` with He fan-in init and a
/// zero bias of length `c_out`.
pub(crate) fn conv_pair(
    store: &mut ParamStore,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> (PId, PId) {
    let w = store.alloc(
        format!("{prefix}.w"),
        &[c_out, c_in, k, k],
        Init::HeUniform { fan_in: c_in * k * k },
    );
    let b = store.alloc(format!("{prefix}.b"), &[c_out], Init::Zeros);
    (w, b)
}

/// Allocates a zero conv weight `[c_out, c_in, k, k]` and zero bias. Used
/// for the last conv of residual branches so every block starts as an exact
/// identity: stacking any depth keeps activations at input scale, while the
/// branch input is nonzero, so gradients reach the zero weights immediately.
pub(crate) fn zero_conv_pair(
    store: &mut ParamStore,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> (PId, PId) {
    let w = store.alloc(format!("{prefix}.w"), &[c_out, c_in, k, k], Init::Zeros);
    let b = store.alloc(format!("{prefix}.b"), &[c_out], Init::Zeros);
    (w, b)
}

/// Allocates a bias-free conv weight `[c_out, c_in, k, k]`.
pub(crate) fn conv_weight(
    store: &mut ParamStore,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> PId {
    store.alloc(
        format!("{prefix}.w"),
        &[c_out, c_in, k, k],
        Init::HeUniform { fan_in: c_in * k * k },
    )
}

/// Allocates a depthwise conv weight `[c, mult, k, k]` and its bias of
/// length `c * mult`.
pub(crate) fn depthwise_pair(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    mult: usize,
    k: usize,
) -> (PId, PId) {
    let w = store.alloc(
        format!("{prefix}.w"),
        &[c, mult, k, k],
        Init::HeUniform { fan_in: k * k },
    );
    let b = store.alloc(format!("{prefix}.b"), &[c * mult], Init::Zeros);
    (w, b)
}

/// Allocates layer-norm gain (ones) and shift (zeros) of length `c`.
pub(crate) fn norm_pair(store: &mut ParamStore, prefix: &str, c: usize) -> (PId, PId) {
    let g = store.alloc(format!("{prefix}.g"), &[c], Init::Ones);
    let b = store.alloc(format!("{prefix}.b"), &[c], Init::Zeros);
    (g, b)
}
