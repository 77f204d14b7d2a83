//! Feature reweighting and multi-level input fusion.
//!
//! [`ChannelAttention`] squeezes each channel with average and max pooling,
//! pushes both summaries through one shared bottleneck MLP, and scales the
//! input by the sigmoid of their sum. [`SpatialAttention`] does the dual:
//! per-pixel mean and max over channels, a 7x7 conv, and a sigmoid gate.
//!
//! [`Amib`] fuses every encoder level into one target level: resize all
//! level outputs to the target extent, concatenate, project to the target
//! width, then pass through a cross gate where each half of a depthwise
//! expansion modulates the other. Channel and spatial reweighting follow.
//! Each of the three parts can be disabled; with all three off the block
//! allocates nothing and returns its input unchanged.

use crate::error::Result;
use crate::params::{PId, ParamStore};
use crate::tensor::kernels::PadMode;
use crate::tensor::tape::{Tape, Var};

use super::{conv_pair, depthwise_pair};

/// Default bottleneck reduction for channel attention.
pub const DEFAULT_CA_REDUCTION: usize = 8;
/// Kernel edge of the spatial-attention conv.
pub const SA_KERNEL: usize = 7;

/// Channel reweighting with a shared bottleneck MLP.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub squeeze: (PId, PId),
    pub excite: (PId, PId),
    pub c: usize,
}

impl ChannelAttention {
    pub fn alloc(store: &mut ParamStore, prefix: &str, c: usize, reduction: usize) -> Self {
        let hidden = (c / reduction).max(1);
        ChannelAttention {
            squeeze: conv_pair(store, &format!("{prefix}.squeeze"), hidden, c, 1),
            excite: conv_pair(store, &format!("{prefix}.excite"), c, hidden, 1),
            c,
        }
    }

    fn mlp(&self, tape: &mut Tape<'_>, pooled: Var) -> Result<Var> {
        let (sw, sb) = (tape.param(self.squeeze.0), tape.param(self.squeeze.1));
        let h = tape.conv2d(pooled, sw, Some(sb), 1, 0, PadMode::Zero)?;
        let h = tape.relu(h)?;
        let (ew, eb) = (tape.param(self.excite.0), tape.param(self.excite.1));
        tape.conv2d(h, ew, Some(eb), 1, 0, PadMode::Zero)
    }

    /// Per-channel scores in (0, 1), shape `[c, 1, 1]`.
    pub fn scores(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let avg = tape.global_avg_pool(x)?;
        let mx = tape.global_max_pool(x)?;
        let a = self.mlp(tape, avg)?;
        let m = self.mlp(tape, mx)?;
        let sum = tape.add(a, m)?;
        tape.sigmoid(sum)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let s = self.scores(tape, x)?;
        tape.mul(x, s)
    }
}

/// Per-pixel reweighting from pooled channel statistics.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: (PId, PId),
}

impl SpatialAttention {
    pub fn alloc(store: &mut ParamStore, prefix: &str) -> Self {
        SpatialAttention { conv: conv_pair(store, &format!("{prefix}.conv"), 1, 2, SA_KERNEL) }
    }

    /// Per-pixel map in (0, 1), shape `[1, h, w]`.
    pub fn map(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mean = tape.spatial_mean_pool(x)?;
        let mx = tape.spatial_max_pool(x)?;
        let cat = tape.concat_channels(&[mean, mx])?;
        let (w, b) = (tape.param(self.conv.0), tape.param(self.conv.1));
        let m = tape.conv2d(cat, w, Some(b), 1, SA_KERNEL / 2, PadMode::Reflect)?;
        tape.sigmoid(m)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let m = self.map(tape, x)?;
        tape.mul(x, m)
    }
}

/// Which parts of [`Amib`] are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AmibSwitches {
    /// Multi-level fuse conv plus the cross gate.
    pub mib: bool,
    pub ca: bool,
    pub sa: bool,
}

impl Default for AmibSwitches {
    fn default() -> Self {
        AmibSwitches { mib: true, ca: true, sa: true }
    }
}

impl AmibSwitches {
    pub const OFF: AmibSwitches = AmibSwitches { mib: false, ca: false, sa: false };

    pub fn any(&self) -> bool {
        self.mib || self.ca || self.sa
    }
}

/// Attention-guided multi-level input fusion for one target level.
#[derive(Debug, Clone)]
pub struct Amib {
    pub fuse: Option<(PId, PId)>,
    pub gate_dw: Option<(PId, PId)>,
    pub gate_proj: Option<(PId, PId)>,
    pub ca: Option<ChannelAttention>,
    pub sa: Option<SpatialAttention>,
    /// Target level, 0-based index into the level outputs.
    pub level: usize,
    pub c: usize,
}

impl Amib {
    /// `dims[j]` is the channel width of level `j`; the fuse conv reads the
    /// concatenation of all levels resized to level `level`.
    pub fn alloc(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        level: usize,
        switches: AmibSwitches,
        ca_reduction: usize,
    ) -> Self {
        let c = dims[level];
        let total: usize = dims.iter().sum();
        let (fuse, gate_dw, gate_proj) = if switches.mib {
            (
                Some(conv_pair(store, &format!("{prefix}.fuse"), c, total, 1)),
                Some(depthwise_pair(store, &format!("{prefix}.gate_dw"), c, 2, 3)),
                Some(conv_pair(store, &format!("{prefix}.gate_proj"), c, 2 * c, 1)),
            )
        } else {
            (None, None, None)
        };
        let ca = switches
            .ca
            .then(|| ChannelAttention::alloc(store, &format!("{prefix}.ca"), c, ca_reduction));
        let sa = switches.sa.then(|| SpatialAttention::alloc(store, &format!("{prefix}.sa")));
        Amib { fuse, gate_dw, gate_proj, ca, sa, level, c }
    }

    /// `ys[j]` is level `j`'s encoder output. With every part disabled the
    /// input var is returned as-is, so downstream consumers share the node.
    pub fn forward(&self, tape: &mut Tape<'_>, ys: &[Var]) -> Result<Var> {
        let mut z = ys[self.level];
        if let (Some(fuse), Some(gdw), Some(gproj)) = (self.fuse, self.gate_dw, self.gate_proj) {
            let (_, h, w) = tape.value(z).dims3()?;
            let mut parts = Vec::with_capacity(ys.len());
            for &y in ys {
                let (_, yh, yw) = tape.value(y).dims3()?;
                parts.push(if (yh, yw) == (h, w) { y } else { tape.bilinear_resize(y, h, w)? });
            }
            let cat = tape.concat_channels(&parts)?;
            let (fw, fb) = (tape.param(fuse.0), tape.param(fuse.1));
            let m = tape.conv2d(cat, fw, Some(fb), 1, 0, PadMode::Zero)?;
            let (dw, db) = (tape.param(gdw.0), tape.param(gdw.1));
            let t = tape.depthwise_conv2d(m, dw, Some(db), 1, PadMode::Reflect)?;
            let z1 = tape.channel_slice(t, 0, self.c)?;
            let z2 = tape.channel_slice(t, self.c, 2 * self.c)?;
            let s1 = tape.sigmoid(z1)?;
            let s2 = tape.sigmoid(z2)?;
            let g1 = tape.mul(s1, z2)?;
            let g2 = tape.mul(s2, z1)?;
            let cat2 = tape.concat_channels(&[g1, g2])?;
            let (pw, pb) = (tape.param(gproj.0), tape.param(gproj.1));
            z = tape.conv2d(cat2, pw, Some(pb), 1, 0, PadMode::Zero)?;
        }
        if let Some(ca) = &self.ca {
            z = ca.forward(tape, z)?;
        }
        if let Some(sa) = &self.sa {
            z = sa.forward(tape, z)?;
        }
        Ok(z)
    }
}
