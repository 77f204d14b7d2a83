//! Frequency-domain blocks built on patchwise 2-D FFTs.
//!
//! [`Fsas`] replaces dot-product attention with an element-wise spectral
//! product: q and k are unfolded into patches, multiplied in the frequency
//! domain (a patchwise cross-correlation), folded back, normalized, and used
//! to gate v. Cost per patch is O(p^2 log p) instead of O(p^4).
//!
//! [`Dffn`] is a gated feed-forward whose expanded features pass through a
//! learnable spectral filter before the gate: unfold, scale the patch
//! spectrum by a real weight, fold, then `gelu(half1) * half2`. With the
//! filter at its all-ones init the spectral step is a no-op, so training
//! starts from a plain gated feed-forward.
//!
//! [`Fdb`] chains the two; it is the workhorse block at every level except
//! the finest.

use crate::error::Result;
use crate::params::{Init, PId, ParamStore};
use crate::tensor::kernels::PadMode;
use crate::tensor::tape::{Tape, Var};

use super::{conv_pair, depthwise_pair, norm_pair, zero_conv_pair};

/// Default patch edge for the spectral ops.
pub const DEFAULT_PATCH: usize = 8;

/// Frequency-domain self-attention stage.
#[derive(Debug, Clone)]
pub struct Fsas {
    pub ln: (PId, PId),
    pub qkv: (PId, PId),
    pub dw: (PId, PId),
    pub corr_ln: (PId, PId),
    pub proj: (PId, PId),
    pub c: usize,
    pub patch: usize,
}

impl Fsas {
    pub fn alloc(store: &mut ParamStore, prefix: &str, c: usize, patch: usize) -> Self {
        Fsas {
            ln: norm_pair(store, &format!("{prefix}.ln"), c),
            qkv: conv_pair(store, &format!("{prefix}.qkv"), 3 * c, c, 1),
            dw: depthwise_pair(store, &format!("{prefix}.dw"), 3 * c, 1, 3),
            corr_ln: norm_pair(store, &format!("{prefix}.corr_ln"), c),
            // Zero-initialized projection: the stage starts as an identity.
            proj: zero_conv_pair(store, &format!("{prefix}.proj"), c, c, 1),
            c,
            patch,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (c, h, w) = {
            let v = tape.value(x);
            v.dims3()?
        };
        let (g, b) = (tape.param(self.ln.0), tape.param(self.ln.1));
        let n = tape.layer_norm(x, g, b)?;
        let (qw, qb) = (tape.param(self.qkv.0), tape.param(self.qkv.1));
        let t = tape.conv2d(n, qw, Some(qb), 1, 0, PadMode::Zero)?;
        let (dw, db) = (tape.param(self.dw.0), tape.param(self.dw.1));
        let t = tape.depthwise_conv2d(t, dw, Some(db), 1, PadMode::Reflect)?;
        let q = tape.channel_slice(t, 0, c)?;
        let k = tape.channel_slice(t, c, 2 * c)?;
        let v = tape.channel_slice(t, 2 * c, 3 * c)?;
        let qu = tape.patch_unfold(q, self.patch)?;
        let ku = tape.patch_unfold(k, self.patch)?;
        let corr = tape.spectral_corr(qu, ku)?;
        let a = tape.patch_fold(corr, c, h, w)?;
        let (cg, cb) = (tape.param(self.corr_ln.0), tape.param(self.corr_ln.1));
        let an = tape.layer_norm(a, cg, cb)?;
        let gated = tape.mul(an, v)?;
        let (pw, pb) = (tape.param(self.proj.0), tape.param(self.proj.1));
        let out = tape.conv2d(gated, pw, Some(pb), 1, 0, PadMode::Zero)?;
        tape.add(x, out)
    }
}

/// Discriminative (spectrally filtered) gated feed-forward stage.
#[derive(Debug, Clone)]
pub struct Dffn {
    pub ln: (PId, PId),
    pub expand: (PId, PId),
    /// Real spectral filter, `[patch, patch]` shared or `[2c, patch, patch]`
    /// per expanded channel.
    pub filter: PId,
    pub proj: (PId, PId),
    pub c: usize,
    pub patch: usize,
}

impl Dffn {
    pub fn alloc(store: &mut ParamStore, prefix: &str, c: usize, patch: usize) -> Self {
        Self::alloc_with_filter(store, prefix, c, patch, false)
    }

    /// `per_channel` allocates one `patch x patch` filter per expanded
    /// channel instead of a single shared one.
    pub fn alloc_with_filter(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        patch: usize,
        per_channel: bool,
    ) -> Self {
        let filter_shape: &[usize] =
            if per_channel { &[2 * c, patch, patch] } else { &[patch, patch] };
        Dffn {
            ln: norm_pair(store, &format!("{prefix}.ln"), c),
            expand: conv_pair(store, &format!("{prefix}.expand"), 2 * c, c, 1),
            filter: store.alloc(format!("{prefix}.filter.w"), filter_shape, Init::Ones),
            // Zero-initialized projection: the stage starts as an identity.
            proj: zero_conv_pair(store, &format!("{prefix}.proj"), c, c, 1),
            c,
            patch,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (c, h, w) = {
            let v = tape.value(x);
            v.dims3()?
        };
        let (g, b) = (tape.param(self.ln.0), tape.param(self.ln.1));
        let n = tape.layer_norm(x, g, b)?;
        let (ew, eb) = (tape.param(self.expand.0), tape.param(self.expand.1));
        let t = tape.conv2d(n, ew, Some(eb), 1, 0, PadMode::Zero)?;
        let u = tape.patch_unfold(t, self.patch)?;
        let fw = tape.param(self.filter);
        let filtered = tape.spectral_weight(u, fw)?;
        let f = tape.patch_fold(filtered, 2 * c, h, w)?;
        let a = tape.channel_slice(f, 0, c)?;
        let bgate = tape.channel_slice(f, c, 2 * c)?;
        let ga = tape.gelu(a)?;
        let gated = tape.mul(ga, bgate)?;
        let (pw, pb) = (tape.param(self.proj.0), tape.param(self.proj.1));
        let out = tape.conv2d(gated, pw, Some(pb), 1, 0, PadMode::Zero)?;
        tape.add(x, out)
    }
}

/// One frequency stage: spectral attention followed by the gated
/// feed-forward, each with its own residual path.
#[derive(Debug, Clone)]
pub struct Fdb {
    pub fsas: Fsas,
    pub dffn: Dffn,
}

impl Fdb {
    pub fn alloc(store: &mut ParamStore, prefix: &str, c: usize, patch: usize) -> Self {
        Self::alloc_with_filter(store, prefix, c, patch, false)
    }

    pub fn alloc_with_filter(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        patch: usize,
        per_channel: bool,
    ) -> Self {
        Fdb {
            fsas: Fsas::alloc(store, &format!("{prefix}.fsas"), c, patch),
            dffn: Dffn::alloc_with_filter(store, &format!("{prefix}.dffn"), c, patch, per_channel),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mid = self.fsas.forward(tape, x)?;
        self.dffn.forward(tape, mid)
    }
}
