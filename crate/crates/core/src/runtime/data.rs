//! Dataset access for training: loads the degraded/clean pairs listed in a
//! generated corpus directory's `manifest.txt` into memory.
//!
//! Desk-scale corpora are small (a few hundred 64x64 frames), so the whole
//! set is held resident; training then samples crops without further I/O.

use std::path::Path;

use crate::error::{Result, SfimError};
use crate::tensor::Tensor;

/// A loaded corpus: `pairs[i] = (degraded, clean)`.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub pairs: Vec<(Tensor, Tensor)>,
}

impl PairSet {
    /// Reads every pair named by `dir/manifest.txt`, in manifest order.
    pub fn load(dir: &Path) -> Result<PairSet> {
        let manifest_path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            SfimError::config(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let mut pairs = Vec::new();
        for line in text.lines().filter(|l| l.starts_with("pair ")) {
            let field = |key: &str| -> Result<&str> {
                line.split_whitespace()
                    .find_map(|tok| tok.strip_prefix(key).and_then(|t| t.strip_prefix('=')))
                    .ok_or_else(|| {
                        SfimError::format(
                            manifest_path.display().to_string(),
                            format!("manifest line lacks {key}=: {line}"),
                        )
                    })
            };
            let clean = Tensor::load(dir.join(field("clean")?))?;
            let degraded = Tensor::load(dir.join(field("degraded")?))?;
            if clean.shape() != degraded.shape() {
                return Err(SfimError::shape(format!(
                    "pair shape mismatch in {}: {:?} vs {:?}",
                    dir.display(),
                    degraded.shape(),
                    clean.shape()
                )));
            }
            pairs.push((degraded, clean));
        }
        if pairs.is_empty() {
            return Err(SfimError::config(format!(
                "no pairs listed in {}",
                manifest_path.display()
            )));
        }
        Ok(PairSet { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Front `n` pairs as the fixed holdout, remainder for training.
    pub fn split_holdout(self, n: usize) -> Result<(Vec<(Tensor, Tensor)>, Vec<(Tensor, Tensor)>)> {
        if n >= self.pairs.len() {
            return Err(SfimError::config(format!(
                "holdout of {n} pairs leaves nothing to train on ({} total)",
                self.pairs.len()
            )));
        }
        let mut val = self.pairs;
        let train = val.split_off(n);
        Ok((val, train))
    }
}

/// Square crop at `(y, x)` with optional horizontal flip, the only two
/// augmentations applied during training.
pub fn crop_flip(t: &Tensor, y: usize, x: usize, size: usize, flip: bool) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    if y + size > h || x + size > w {
        return Err(SfimError::shape(format!(
            "crop {size} at ({y}, {x}) exceeds {h}x{w}"
        )));
    }
    let src = t.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for dy in 0..size {
            let row = (ch * h + y + dy) * w + x;
            if flip {
                out.extend((0..size).rev().map(|dx| src[row + dx]));
            } else {
                out.extend_from_slice(&src[row..row + size]);
            }
        }
    }
    Tensor::new(vec![c, size, size], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{make_dataset, DatasetSpec};

    #[test]
    fn loads_a_generated_corpus_in_manifest_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = DatasetSpec::desk_default();
        ds.height = 16;
        ds.width = 16;
        make_dataset(dir.path(), &ds, 4, 99).unwrap();

        let set = PairSet::load(dir.path()).unwrap();
        assert_eq!(set.len(), 4);
        let direct = Tensor::load(dir.path().join("00002_degraded.sftn")).unwrap();
        assert_eq!(set.pairs[2].0.data(), direct.data());

        let (val, train) = set.split_holdout(1).unwrap();
        assert_eq!((val.len(), train.len()), (1, 3));
    }

    #[test]
    fn holdout_must_leave_training_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = DatasetSpec::desk_default();
        ds.height = 16;
        ds.width = 16;
        make_dataset(dir.path(), &ds, 2, 1).unwrap();
        let set = PairSet::load(dir.path()).unwrap();
        assert!(set.split_holdout(2).is_err());
    }

    #[test]
    fn missing_manifest_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = PairSet::load(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn crop_flip_extracts_and_mirrors() {
        let t = Tensor::new(vec![1, 3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        let plain = crop_flip(&t, 1, 1, 2, false).unwrap();
        assert_eq!(plain.data(), &[5.0, 6.0, 9.0, 10.0]);
        let flipped = crop_flip(&t, 1, 1, 2, true).unwrap();
        assert_eq!(flipped.data(), &[6.0, 5.0, 10.0, 9.0]);
        assert!(crop_flip(&t, 2, 0, 2, false).is_err());
    }
}
