//! Cross-level feature exchange.
//!
//! [`Sam`] turns a decoder feature map into a restored image at its level,
//! derives a per-pixel attention map from that image, and uses the map to
//! reweight the features handed to the next finer level. The image head is
//! zero-initialized so restoration starts at the degraded input.
//!
//! [`Fam`] injects the previous (finer) encoder level into the current one:
//! the finer features are downsampled, projected to the current width
//! without bias, and refined by a 3x3 conv of their product with the
//! current features.

use crate::error::Result;
use crate::params::{Init, PId, ParamStore};
use crate::tensor::kernels::PadMode;
use crate::tensor::tape::{Tape, Var};

use super::{conv_pair, conv_weight};

/// Supervised attention head between decoder levels.
#[derive(Debug, Clone)]
pub struct Sam {
    /// 3x3 conv, features to image channels, zero-initialized.
    pub img: (PId, PId),
    /// 3x3 conv, image channels back to feature width.
    pub att: (PId, PId),
    /// 1x1 conv adapting the feature output to the next finer level's width.
    pub feat: (PId, PId),
    pub c: usize,
    pub c_img: usize,
}

impl Sam {
    pub fn alloc(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        c_img: usize,
        c_next: usize,
    ) -> Self {
        let img_w = store.alloc(format!("{prefix}.img.w"), &[c_img, c, 3, 3], Init::Zeros);
        let img_b = store.alloc(format!("{prefix}.img.b"), &[c_img], Init::Zeros);
        Sam {
            img: (img_w, img_b),
            att: conv_pair(store, &format!("{prefix}.att"), c, c_img, 3),
            feat: conv_pair(store, &format!("{prefix}.feat"), c_next, c, 1),
            c,
            c_img,
        }
    }

    /// Returns `(features, attention map, restored image)`. `img` must share
    /// the spatial extent of `f` and have `c_img` channels.
    pub fn forward(&self, tape: &mut Tape<'_>, f: Var, img: Var) -> Result<(Var, Var, Var)> {
        let (iw, ib) = (tape.param(self.img.0), tape.param(self.img.1));
        let head = tape.conv2d(f, iw, Some(ib), 1, 1, PadMode::Reflect)?;
        let restored = tape.add(head, img)?;
        let (aw, ab) = (tape.param(self.att.0), tape.param(self.att.1));
        let pre = tape.conv2d(restored, aw, Some(ab), 1, 1, PadMode::Reflect)?;
        let s = tape.sigmoid(pre)?;
        let gated = tape.mul(f, s)?;
        let feat = tape.add(gated, f)?;
        Ok((feat, s, restored))
    }

    /// Projects the feature output to the next finer level's width.
    pub fn transfer(&self, tape: &mut Tape<'_>, feat: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.feat.0), tape.param(self.feat.1));
        tape.conv2d(feat, w, Some(b), 1, 0, PadMode::Zero)
    }
}

/// Feature adaptation merging the previous finer encoder level into the
/// current one.
#[derive(Debug, Clone)]
pub struct Fam {
    /// Bias-free 1x1 conv, previous width to current width.
    pub adapt_w: PId,
    /// 3x3 conv refining the elementwise product.
    pub matcher: (PId, PId),
    pub c_cur: usize,
}

impl Fam {
    pub fn alloc(store: &mut ParamStore, prefix: &str, c_prev: usize, c_cur: usize) -> Self {
        Fam {
            adapt_w: conv_weight(store, &format!("{prefix}.adapt"), c_cur, c_prev, 1),
            matcher: conv_pair(store, &format!("{prefix}.match"), c_cur, c_cur, 3),
            c_cur,
        }
    }

    /// `x_cur` is the current level's embedded input, `y_prev` the previous
    /// finer level's encoder output at twice the extent.
    pub fn forward(&self, tape: &mut Tape<'_>, x_cur: Var, y_prev: Var) -> Result<Var> {
        let (_, h, w) = tape.value(x_cur).dims3()?;
        let down = tape.bilinear_resize(y_prev, h, w)?;
        let aw = tape.param(self.adapt_w);
        let yc = tape.conv2d(down, aw, None, 1, 0, PadMode::Zero)?;
        let prod = tape.mul(x_cur, yc)?;
        let (mw, mb) = (tape.param(self.matcher.0), tape.param(self.matcher.1));
        let m = tape.conv2d(prod, mw, Some(mb), 1, 1, PadMode::Reflect)?;
        tape.add(yc, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::Rng;
    use crate::tensor::gradcheck::gradient_check;
    use crate::tensor::Tensor;

    fn random_input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let data = (0..c * h * w).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        Tensor::new(vec![c, h, w], data).unwrap()
    }

    fn zero_param(store: &mut ParamStore, id: crate::params::PId) {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(&shape)).unwrap();
    }

    #[test]
    fn sam_with_zero_convs_passes_image_and_boosts_features() {
        let mut store = ParamStore::new(1);
        let sam = Sam::alloc(&mut store, "sam", 4, 3, 2);
        // The image head starts at zero; silence the attention conv too.
        zero_param(&mut store, sam.att.0);
        let f = random_input(4, 6, 5, 3);
        let img = random_input(3, 6, 5, 5);
        let mut tape = Tape::new(&store);
        let fv = tape.leaf(f.clone());
        let iv = tape.leaf(img.clone());
        let (feat, s, restored) = sam.forward(&mut tape, fv, iv).unwrap();
        assert_eq!(tape.value(restored).data(), img.data());
        for &v in tape.value(s).data() {
            assert_eq!(v, 0.5);
        }
        for (got, want) in tape.value(feat).data().iter().zip(f.data()) {
            assert_eq!(*got, 1.5 * want);
        }
    }

    #[test]
    fn sam_restored_image_matches_input_image_shape() {
        let mut store = ParamStore::new(2);
        let sam = Sam::alloc(&mut store, "sam", 6, 4, 3);
        let f = random_input(6, 7, 9, 7);
        let img = random_input(4, 7, 9, 9);
        let mut tape = Tape::new(&store);
        let fv = tape.leaf(f);
        let iv = tape.leaf(img);
        let (feat, s, restored) = sam.forward(&mut tape, fv, iv).unwrap();
        assert_eq!(tape.value(restored).shape(), &[4, 7, 9]);
        assert_eq!(tape.value(s).shape(), &[6, 7, 9]);
        let tr = sam.transfer(&mut tape, feat).unwrap();
        assert_eq!(tape.value(tr).shape(), &[3, 7, 9]);
    }

    #[test]
    fn fam_with_zero_matcher_returns_adapted_features() {
        let mut store = ParamStore::new(3);
        let fam = Fam::alloc(&mut store, "fam", 2, 3);
        zero_param(&mut store, fam.matcher.0);
        let x = random_input(3, 4, 4, 11);
        let y = random_input(2, 8, 8, 13);

        let mut tape = Tape::new(&store);
        let xv = tape.leaf(x);
        let yv = tape.leaf(y.clone());
        let out = fam.forward(&mut tape, xv, yv).unwrap();
        let got = tape.value(out).data().to_vec();

        let mut t = Tape::new(&store);
        let yv2 = t.leaf(y);
        let down = t.bilinear_resize(yv2, 4, 4).unwrap();
        let aw = t.param(fam.adapt_w);
        let want = t.conv2d(down, aw, None, 1, 0, PadMode::Zero).unwrap();
        assert_eq!(got, t.value(want).data());
    }

    #[test]
    fn fam_with_zero_previous_level_yields_matcher_bias() {
        let mut store = ParamStore::new(4);
        let fam = Fam::alloc(&mut store, "fam", 2, 3);
        store
            .set_value(fam.matcher.1, Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap())
            .unwrap();
        let x = random_input(3, 4, 4, 15);
        let y = Tensor::zeros(&[2, 8, 8]);
        let mut tape = Tape::new(&store);
        let xv = tape.leaf(x);
        let yv = tape.leaf(y);
        let out = fam.forward(&mut tape, xv, yv).unwrap();
        // The adapter has no bias, so a zero input reaches the matcher as
        // zero and only its bias survives.
        let data = tape.value(out).data();
        for (c, want) in [0.3, -0.7, 1.1].into_iter().enumerate() {
            for &v in &data[c * 16..(c + 1) * 16] {
                assert_eq!(v, want);
            }
        }
    }

    #[test]
    fn sam_gradients_match_finite_differences() {
        let mut store = ParamStore::new(5);
        let sam = Sam::alloc(&mut store, "sam", 3, 3, 2);
        // Zero-init heads have zero gradients only at exactly zero; move off
        // the init point so the check exercises every path.
        let mut rng = Rng::new(77);
        let img_w_shape = store.value(sam.img.0).shape().to_vec();
        let n = store.value(sam.img.0).numel();
        let data = (0..n).map(|_| rng.next_f64() * 0.2 - 0.1).collect();
        store.set_value(sam.img.0, Tensor::new(img_w_shape, data).unwrap()).unwrap();
        let f = random_input(3, 6, 6, 17);
        let img = random_input(3, 6, 6, 19);
        let report = gradient_check(
            &mut store,
            |tape| {
                let fv = tape.leaf(f.clone());
                let iv = tape.leaf(img.clone());
                let (feat, s, restored) = sam.forward(tape, fv, iv)?;
                let tr = sam.transfer(tape, feat)?;
                let a = tape.mul(tr, tr)?;
                let b = tape.mul(s, s)?;
                let c = tape.mul(restored, restored)?;
                let sa = tape.sum_all(a)?;
                let sb = tape.sum_all(b)?;
                let sc = tape.sum_all(c)?;
                let ab = tape.add(sa, sb)?;
                tape.add(ab, sc)
            },
            40,
            1e-5,
            109,
        )
        .unwrap();
        assert!(report.max_rel < 1e-4, "worst {:?}", report.worst_param());
    }

    #[test]
    fn fam_gradients_match_finite_differences() {
        let mut store = ParamStore::new(6);
        let fam = Fam::alloc(&mut store, "fam", 2, 3);
        let x = random_input(3, 5, 5, 21);
        let y = random_input(2, 10, 10, 23);
        let report = gradient_check(
            &mut store,
            |tape| {
                let xv = tape.leaf(x.clone());
                let yv = tape.leaf(y.clone());
                let out = fam.forward(tape, xv, yv)?;
                let sq = tape.mul(out, out)?;
                tape.sum_all(sq)
            },
            40,
            1e-5,
            113,
        )
        .unwrap();
        assert!(report.max_rel < 1e-4, "worst {:?}", report.worst_param());
    }
}
