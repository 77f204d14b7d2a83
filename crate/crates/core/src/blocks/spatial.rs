//! Spatial-domain blocks: densely connected residual convolutions.
//!
//! [`Rdb`] runs three 3x3 conv+GELU layers where each layer sees the
//! concatenation of the block input and every earlier layer's output, then
//! fuses all features back to the input width with a 1x1 conv and adds the
//! block input. [`Sdb`] chains a fixed number of RDBs; it is the shallow
//! stack used at the finest level where detail matters more than receptive
//! field.

use crate::error::Result;
use crate::params::{PId, ParamStore};
use crate::tensor::kernels::PadMode;
use crate::tensor::tape::{Tape, Var};

use super::{conv_pair, zero_conv_pair};

/// Number of dense conv+GELU layers inside one RDB.
pub const RDB_LAYERS: usize = 3;
/// Number of RDBs chained by the default shallow stack.
pub const SDB_DEPTH: usize = 8;

/// Residual dense block. Layer `c` (1-based) maps `g0 + (c-1)*g` channels to
/// `g` growth channels; the fusion conv maps `g0 + 3*g` back to `g0`.
#[derive(Debug, Clone)]
pub struct Rdb {
    pub layers: Vec<(PId, PId)>,
    pub fusion_w: PId,
    pub fusion_b: PId,
    pub g0: usize,
    pub g: usize,
}

impl Rdb {
    pub fn alloc(store: &mut ParamStore, prefix: &str, g0: usize, g: usize) -> Self {
        let mut layers = Vec::with_capacity(RDB_LAYERS);
        for c in 0..RDB_LAYERS {
            let c_in = g0 + c * g;
            layers.push(conv_pair(store, &format!("{prefix}.conv{}", c + 1), g, c_in, 3));
        }
        // Zero-initialized fusion: the block starts as an identity, so a deep
        // stack cannot inflate activation scale before training shapes it.
        let (fusion_w, fusion_b) =
            zero_conv_pair(store, &format!("{prefix}.fusion"), g0, g0 + RDB_LAYERS * g, 1);
        Rdb { layers, fusion_w, fusion_b, g0, g }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut feats = vec![x];
        for &(w, b) in &self.layers {
            let cat = if feats.len() == 1 { feats[0] } else { tape.concat_channels(&feats)? };
            let wv = tape.param(w);
            let bv = tape.param(b);
            let conv = tape.conv2d(cat, wv, Some(bv), 1, 1, PadMode::Reflect)?;
            let act = tape.gelu(conv)?;
            feats.push(act);
        }
        let cat = tape.concat_channels(&feats)?;
        let fw = tape.param(self.fusion_w);
        let fb = tape.param(self.fusion_b);
        let fused = tape.conv2d(cat, fw, Some(fb), 1, 0, PadMode::Zero)?;
        tape.add(x, fused)
    }
}

/// Shallow dense stack: `depth` RDBs applied in sequence at one resolution.
#[derive(Debug, Clone)]
pub struct Sdb {
    pub blocks: Vec<Rdb>,
}

impl Sdb {
    pub fn alloc(store: &mut ParamStore, prefix: &str, g0: usize, g: usize, depth: usize) -> Self {
        let blocks = (0..depth)
            .map(|i| Rdb::alloc(store, &format!("{prefix}.rdb{i}"), g0, g))
            .collect();
        Sdb { blocks }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut cur = x;
        for rdb in &self.blocks {
            cur = rdb.forward(tape, cur)?;
        }
        Ok(cur)
    }
}
