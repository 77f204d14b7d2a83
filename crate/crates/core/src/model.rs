//! The multi-level restoration network.
//!
//! The network processes an image pyramid: level 1 sees the full-resolution
//! input, each deeper level a 2x bilinear downsample of the previous. Every
//! level embeds its pyramid image, encodes it with a stack of spatial or
//! frequency blocks (finer levels feed their encoding into the next coarser
//! one), fuses all level encodings per level, and decodes coarse to fine.
//! Each decoder level except the finest emits a restored image and an
//! attention-reweighted feature map that supports the next finer level; the
//! finest level emits its restored image through a zero-initialized head so
//! the whole network starts as the identity on the degraded input.
//!
//! Channel widths default to (48, 96, 192, 192) with a spatial stack at
//! level 1 and frequency stacks below, matching the reference budget of
//! about 25 M parameters.

use crate::blocks::{Amib, AmibSwitches, Fam, Fdb, Sam, Sdb};
use crate::error::{Result, SfimError};
use crate::params::{Init, PId, ParamStore};
use crate::tensor::kernels::{self, PadMode};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default channel widths per level.
pub const DEFAULT_CHANNELS: [usize; 4] = [48, 96, 192, 192];
/// Default frequency-block count per encoder (and decoder) level below the
/// first; chosen so the default config lands on the reference budget.
pub const DEFAULT_FDB_COUNT: usize = 19;

/// Which block family a level uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BlockKind {
    Spatial,
    Frequency,
}

/// Architecture description. `channels`, `kinds`, `enc_counts`, and
/// `dec_counts` all have one entry per level, finest first.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub kinds: Vec<BlockKind>,
    pub enc_counts: Vec<usize>,
    pub dec_counts: Vec<usize>,
    pub in_channels: usize,
    pub patch: usize,
    pub sdb_depth: usize,
    pub amib_mib: bool,
    pub amib_ca: bool,
    pub amib_sa: bool,
    pub ca_reduction: usize,
    pub per_channel_filter: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_embed_dim(DEFAULT_CHANNELS[0])
    }
}

impl ModelConfig {
    /// Full 4-level network with the given finest width; deeper levels use
    /// (2x, 4x, 4x) that width.
    pub fn with_embed_dim(c1: usize) -> Self {
        ModelConfig {
            levels: 4,
            channels: vec![c1, 2 * c1, 4 * c1, 4 * c1],
            kinds: vec![
                BlockKind::Spatial,
                BlockKind::Frequency,
                BlockKind::Frequency,
                BlockKind::Frequency,
            ],
            enc_counts: vec![1, DEFAULT_FDB_COUNT, DEFAULT_FDB_COUNT, DEFAULT_FDB_COUNT],
            dec_counts: vec![1, DEFAULT_FDB_COUNT, DEFAULT_FDB_COUNT, DEFAULT_FDB_COUNT],
            in_channels: 3,
            patch: 8,
            sdb_depth: 8,
            amib_mib: true,
            amib_ca: true,
            amib_sa: true,
            ca_reduction: 8,
            per_channel_filter: false,
        }
    }

    /// Small instance for desk-scale training and gradient checks: spatial
    /// stack at level 1, two frequency blocks per deeper level.
    pub fn compact(levels: usize, width: usize) -> Self {
        let channels = (0..levels).map(|i| width << i.min(2)).collect();
        let mut kinds = vec![BlockKind::Frequency; levels];
        kinds[0] = BlockKind::Spatial;
        let mut counts = vec![2; levels];
        counts[0] = 1;
        ModelConfig {
            levels,
            channels,
            kinds,
            enc_counts: counts.clone(),
            dec_counts: counts,
            in_channels: 3,
            patch: 8,
            sdb_depth: 8,
            amib_mib: true,
            amib_ca: true,
            amib_sa: true,
            ca_reduction: 8,
            per_channel_filter: false,
        }
    }

    pub fn amib_switches(&self) -> AmibSwitches {
        AmibSwitches { mib: self.amib_mib, ca: self.amib_ca, sa: self.amib_sa }
    }

    /// Input extents must be divisible by this for the pyramid to halve
    /// exactly.
    pub fn extent_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.levels) {
            return Err(SfimError::config(format!("levels must be 1..=4, got {}", self.levels)));
        }
        for (name, len) in [
            ("channels", self.channels.len()),
            ("kinds", self.kinds.len()),
            ("enc_counts", self.enc_counts.len()),
            ("dec_counts", self.dec_counts.len()),
        ] {
            if len != self.levels {
                return Err(SfimError::config(format!(
                    "{name} must have one entry per level ({}), got {len}",
                    self.levels
                )));
            }
        }
        if self.channels.iter().any(|&c| c < 2) {
            return Err(SfimError::config("channel widths must be at least 2"));
        }
        if self.enc_counts.iter().chain(&self.dec_counts).any(|&n| n == 0) {
            return Err(SfimError::config("block counts must be positive"));
        }
        if !(self.in_channels == 3 || self.in_channels == 4) {
            return Err(SfimError::config(format!(
                "in_channels must be 3 or 4, got {}",
                self.in_channels
            )));
        }
        if self.patch < 2 {
            return Err(SfimError::config("patch edge must be at least 2"));
        }
        if self.sdb_depth == 0 || self.ca_reduction == 0 {
            return Err(SfimError::config("sdb_depth and ca_reduction must be positive"));
        }
        Ok(())
    }
}

/// One level's encoder or decoder stack.
#[derive(Debug, Clone)]
pub enum LevelStack {
    Spatial(Vec<Sdb>),
    Frequency(Vec<Fdb>),
}

impl LevelStack {
    fn alloc(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, level: usize, count: usize) -> Self {
        let c = cfg.channels[level];
        match cfg.kinds[level] {
            BlockKind::Spatial => LevelStack::Spatial(
                (0..count)
                    .map(|j| Sdb::alloc(store, &format!("{prefix}.sdb{j}"), c, (c / 2).max(1), cfg.sdb_depth))
                    .collect(),
            ),
            BlockKind::Frequency => LevelStack::Frequency(
                (0..count)
                    .map(|j| {
                        Fdb::alloc_with_filter(
                            store,
                            &format!("{prefix}.fdb{j}"),
                            c,
                            cfg.patch,
                            cfg.per_channel_filter,
                        )
                    })
                    .collect(),
            ),
        }
    }

    fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut cur = x;
        match self {
            LevelStack::Spatial(blocks) => {
                for b in blocks {
                    cur = b.forward(tape, cur)?;
                }
            }
            LevelStack::Frequency(blocks) => {
                for b in blocks {
                    cur = b.forward(tape, cur)?;
                }
            }
        }
        Ok(cur)
    }
}

/// Restored pyramid plus the attention maps of every level below the first.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// One restored image per level, finest first.
    pub restored: Vec<Var>,
    /// Attention maps for levels 2.., finest first; empty for one level.
    pub attention: Vec<Var>,
}

/// The assembled network: parameter handles only, data lives in the store.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embeds: Vec<(PId, PId)>,
    pub fams: Vec<Fam>,
    pub enc: Vec<LevelStack>,
    pub amibs: Vec<Amib>,
    pub dec: Vec<LevelStack>,
    pub sams: Vec<Sam>,
    pub head: (PId, PId),
}

impl Model {
    /// Allocates all parameters in a fixed order so the same store seed
    /// always produces bitwise identical weights.
    pub fn build(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let l = cfg.levels;
        let mut embeds = Vec::with_capacity(l);
        for i in 0..l {
            let c = cfg.channels[i];
            let w = store.alloc(
                format!("embed{}.w", i + 1),
                &[c, cfg.in_channels, 3, 3],
                Init::HeUniform { fan_in: cfg.in_channels * 9 },
            );
            let b = store.alloc(format!("embed{}.b", i + 1), &[c], Init::Zeros);
            embeds.push((w, b));
        }
        let mut fams = Vec::with_capacity(l.saturating_sub(1));
        for i in 1..l {
            fams.push(Fam::alloc(
                store,
                &format!("fam{}", i + 1),
                cfg.channels[i - 1],
                cfg.channels[i],
            ));
        }
        let mut enc = Vec::with_capacity(l);
        for i in 0..l {
            enc.push(LevelStack::alloc(store, &format!("enc{}", i + 1), cfg, i, cfg.enc_counts[i]));
        }
        let mut amibs = Vec::with_capacity(l);
        for i in 0..l {
            amibs.push(Amib::alloc(
                store,
                &format!("amib{}", i + 1),
                &cfg.channels,
                i,
                cfg.amib_switches(),
                cfg.ca_reduction,
            ));
        }
        let mut dec = Vec::with_capacity(l);
        for i in 0..l {
            dec.push(LevelStack::alloc(store, &format!("dec{}", i + 1), cfg, i, cfg.dec_counts[i]));
        }
        let mut sams = Vec::with_capacity(l.saturating_sub(1));
        for i in 1..l {
            sams.push(Sam::alloc(
                store,
                &format!("sam{}", i + 1),
                cfg.channels[i],
                cfg.in_channels,
                cfg.channels[i - 1],
            ));
        }
        let head_w = store.alloc("head.w", &[cfg.in_channels, cfg.channels[0], 3, 3], Init::Zeros);
        let head_b = store.alloc("head.b", &[cfg.in_channels], Init::Zeros);
        Ok(Model {
            cfg: cfg.clone(),
            embeds,
            fams,
            enc,
            amibs,
            dec,
            sams,
            head: (head_w, head_b),
        })
    }

    /// Full pyramid forward. `input` must be `[in_channels, h, w]` with both
    /// extents divisible by `2^(levels-1)`.
    pub fn forward(&self, tape: &mut Tape<'_>, input: Var) -> Result<ModelOutput> {
        let l = self.cfg.levels;
        let (c, h, w) = tape.value(input).dims3()?;
        if c != self.cfg.in_channels {
            return Err(SfimError::shape(format!(
                "input has {c} channels, model expects {}",
                self.cfg.in_channels
            )));
        }
        let div = self.cfg.extent_divisor();
        if h % div != 0 || w % div != 0 {
            return Err(SfimError::shape(format!(
                "input extent {h}x{w} not divisible by {div} for {l} levels"
            )));
        }

        let mut pyramid = vec![input];
        for i in 1..l {
            pyramid.push(tape.bilinear_resize(input, h >> i, w >> i)?);
        }

        let mut ys: Vec<Var> = Vec::with_capacity(l);
        for i in 0..l {
            let (ew, eb) = self.embeds[i];
            let (ew, eb) = (tape.param(ew), tape.param(eb));
            let e = tape.conv2d(pyramid[i], ew, Some(eb), 1, 1, PadMode::Reflect)?;
            let x = tape.gelu(e)?;
            let x = if i == 0 { x } else { self.fams[i - 1].forward(tape, x, ys[i - 1])? };
            ys.push(self.enc[i].forward(tape, x)?);
        }

        let mut fused = Vec::with_capacity(l);
        for amib in &self.amibs {
            fused.push(amib.forward(tape, &ys)?);
        }

        let mut restored = vec![None; l];
        let mut attention = vec![None; l];
        let mut feat_above: Option<Var> = None;
        for i in (0..l).rev() {
            let d_in = match feat_above {
                None => fused[i],
                Some(ft) => {
                    let (_, hi, wi) = tape.value(fused[i]).dims3()?;
                    let up = tape.bilinear_resize(ft, hi, wi)?;
                    tape.add(fused[i], up)?
                }
            };
            let d = self.dec[i].forward(tape, d_in)?;
            if i == 0 {
                let (hw, hb) = self.head;
                let (hw, hb) = (tape.param(hw), tape.param(hb));
                let r = tape.conv2d(d, hw, Some(hb), 1, 1, PadMode::Reflect)?;
                restored[0] = Some(tape.add(r, pyramid[0])?);
            } else {
                let sam = &self.sams[i - 1];
                let (feat, s, ir) = sam.forward(tape, d, pyramid[i])?;
                restored[i] = Some(ir);
                attention[i] = Some(s);
                feat_above = Some(sam.transfer(tape, feat)?);
            }
        }
        Ok(ModelOutput {
            restored: restored.into_iter().map(Option::unwrap).collect(),
            attention: attention.into_iter().flatten().collect(),
        })
    }
}

/// Bilinear pyramid of an image tensor: entry 0 is the input, entry `i` a
/// downsample by `2^i`.
pub fn image_pyramid(img: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let (c, h, w) = img.dims3()?;
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for i in 1..levels {
        let (oh, ow) = (h >> i, w >> i);
        if oh == 0 || ow == 0 {
            return Err(SfimError::shape(format!(
                "image {h}x{w} too small for {levels} pyramid levels"
            )));
        }
        let data = kernels::bilinear_resize(img.data(), c, h, w, oh, ow);
        out.push(Tensor::new(vec![c, oh, ow], data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gradcheck::gradient_check;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let data = (0..c * h * w).map(|_| rng.next_f64()).collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    #[test]
    fn default_parameter_count_is_near_the_reference_budget() {
        let mut store = ParamStore::new(1);
        let cfg = ModelConfig::default();
        Model::build(&mut store, &cfg).unwrap();
        let count = store.param_count();
        let target = 24.89e6;
        assert!(
            (count as f64) > 0.85 * target && (count as f64) < 1.15 * target,
            "default config has {count} parameters"
        );
    }

    #[test]
    fn width_24_parameter_count_is_near_the_reference_budget() {
        let mut store = ParamStore::new(2);
        let cfg = ModelConfig::with_embed_dim(24);
        Model::build(&mut store, &cfg).unwrap();
        let count = store.param_count();
        let target = 6.72e6;
        assert!(
            (count as f64) > 0.85 * target && (count as f64) < 1.15 * target,
            "width-24 config has {count} parameters"
        );
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = ModelConfig::compact(2, 8);
        let mut a = ParamStore::new(7);
        Model::build(&mut a, &cfg).unwrap();
        let mut b = ParamStore::new(7);
        Model::build(&mut b, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (ia, ib) in a.ids().zip(b.ids()) {
            assert_eq!(a.name(ia), b.name(ib));
            assert_eq!(a.value(ia).data(), b.value(ib).data());
        }
    }

    #[test]
    fn fresh_model_restores_the_input_at_every_level() {
        let cfg = ModelConfig::compact(2, 8);
        let mut store = ParamStore::new(3);
        let model = Model::build(&mut store, &cfg).unwrap();
        let img = random_image(3, 32, 32, 5);
        let mut tape = Tape::new(&store);
        let iv = tape.leaf(img.clone());
        let out = model.forward(&mut tape, iv).unwrap();
        let pyr = image_pyramid(&img, 2).unwrap();
        for (r, want) in out.restored.iter().zip(&pyr) {
            assert_eq!(tape.value(*r).data(), want.data());
        }
    }

    #[test]
    fn output_shapes_follow_the_dyadic_law() {
        let cfg = ModelConfig::compact(3, 4);
        let mut store = ParamStore::new(4);
        let model = Model::build(&mut store, &cfg).unwrap();
        let img = random_image(3, 48, 40, 7);
        let mut tape = Tape::new(&store);
        let iv = tape.leaf(img);
        let out = model.forward(&mut tape, iv).unwrap();
        assert_eq!(out.restored.len(), 3);
        assert_eq!(tape.value(out.restored[0]).shape(), &[3, 48, 40]);
        assert_eq!(tape.value(out.restored[1]).shape(), &[3, 24, 20]);
        assert_eq!(tape.value(out.restored[2]).shape(), &[3, 12, 10]);
        assert_eq!(out.attention.len(), 2);
        assert_eq!(tape.value(out.attention[0]).shape(), &[cfg.channels[1], 24, 20]);
        assert_eq!(tape.value(out.attention[1]).shape(), &[cfg.channels[2], 12, 10]);
    }

    #[test]
    fn single_level_model_runs_without_attention_maps() {
        let cfg = ModelConfig::compact(1, 6);
        let mut store = ParamStore::new(5);
        let model = Model::build(&mut store, &cfg).unwrap();
        let img = random_image(3, 16, 24, 9);
        let mut tape = Tape::new(&store);
        let iv = tape.leaf(img);
        let out = model.forward(&mut tape, iv).unwrap();
        assert_eq!(out.restored.len(), 1);
        assert!(out.attention.is_empty());
        assert_eq!(tape.value(out.restored[0]).shape(), &[3, 16, 24]);
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        let cfg = ModelConfig::compact(3, 4);
        let mut store = ParamStore::new(6);
        let model = Model::build(&mut store, &cfg).unwrap();
        let img = random_image(3, 30, 32, 11);
        let mut tape = Tape::new(&store);
        let iv = tape.leaf(img);
        assert!(model.forward(&mut tape, iv).is_err());
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let cfg = ModelConfig::compact(2, 4);
        let mut store = ParamStore::new(7);
        let model = Model::build(&mut store, &cfg).unwrap();
        let img = random_image(5, 16, 16, 13);
        let mut tape = Tape::new(&store);
        let iv = tape.leaf(img);
        assert!(model.forward(&mut tape, iv).is_err());
    }

    #[test]
    fn pyramid_of_constant_image_is_constant_at_all_levels() {
        let img = Tensor::full(&[3, 16, 16], 0.42);
        let pyr = image_pyramid(&img, 3).unwrap();
        assert_eq!(pyr.len(), 3);
        for level in &pyr {
            for &v in level.data() {
                assert!((v - 0.42).abs() < 1e-12);
            }
        }
        let single = image_pyramid(&img, 1).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let cfg = ModelConfig::compact(2, 8);
        let mut store = ParamStore::new(8);
        let model = Model::build(&mut store, &cfg).unwrap();
        // Move off the identity initialization so every branch, including the
        // zero-initialized projections and heads, carries gradient.
        store.perturb_all(0.05, 83);
        let img = random_image(3, 32, 32, 15);
        let target = random_image(3, 32, 32, 17);
        let report = gradient_check(
            &mut store,
            |tape| {
                let iv = tape.leaf(img.clone());
                let out = model.forward(tape, iv)?;
                // Charbonnier on the finest output ties every level into
                // the loss through the coarse-to-fine feature path.
                tape.charbonnier(out.restored[0], &target, 1e-3, false)
            },
            30,
            1e-5,
            115,
        )
        .unwrap();
        assert!(report.max_rel < 1e-4, "worst {:?}", report.worst_param());
    }
}
