//! The training loop: progressive patch phases, cosine-annealed AdamW,
//! random-crop/flip sampling, periodic holdout validation, and resumable
//! checkpoints.
//!
//! Everything stochastic flows from the run seed: the parameter store and
//! the sampling generator get independent derived streams, and the sampler's
//! state rides along in every checkpoint, so rerunning a seed reproduces the
//! loss trajectory bit for bit and resuming equals never having stopped.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::analyze::quality;
use crate::error::{Result, SfimError};
use crate::losses::total_loss;
use crate::model::Model;
use crate::params::{PId, ParamStore};
use crate::rng::{derive_seed, Rng};
use crate::runtime::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use crate::runtime::config::{RunConfig, DEFAULT_GRAD_CLIP};
use crate::runtime::data::{crop_flip, PairSet};
use crate::runtime::restore::{restore_image, RestoreOptions};
use crate::tensor::adamw::{cosine_lr, AdamW};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Derived-stream tags under the run seed.
const STREAM_PARAMS: u64 = 0;
const STREAM_SAMPLER: u64 = 1;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of initializing fresh.
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in this call, checkpointing the
    /// exact state so a resumed run completes the schedule.
    pub max_steps: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// Optimizer steps executed by this call.
    pub steps_run: u64,
    /// Optimizer steps accumulated across the whole run.
    pub global_step: u64,
    /// Batch-mean total loss at the last executed step.
    pub final_loss: f64,
    pub best_val_psnr: f64,
    pub final_val_psnr: f64,
    pub final_val_ssim: f64,
    /// Checkpoint holding the state at return time.
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// Batch-mean loss per executed step, in order.
    pub loss_trace: Vec<f64>,
}

fn snapshot(
    global_step: u64,
    phase: usize,
    step_in_phase: u64,
    opt: &AdamW,
    rng: &Rng,
    best_val_psnr: f64,
) -> TrainState {
    let (opt_step, opt_m, opt_v) = opt.export_state();
    TrainState {
        global_step,
        phase: phase as u32,
        step_in_phase,
        opt_step,
        opt_m,
        opt_v,
        rng_state: rng.state(),
        best_val_psnr,
    }
}

fn validate_holdout(
    model: &Model,
    store: &ParamStore,
    holdout: &[(Tensor, Tensor)],
) -> Result<(f64, f64)> {
    let opts = RestoreOptions { tile: None, overlap: 0 };
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (degraded, clean) in holdout {
        let restored = restore_image(model, store, degraded, &opts)?;
        let q = quality(&restored, clean)?;
        psnr_sum += q.psnr;
        ssim_sum += q.ssim;
    }
    let n = holdout.len() as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

/// Runs the configured schedule. See [`TrainOptions`] for resume and early
/// stop; outputs land in `config.paths.out`.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    cfg.check_memory()?;
    let out: &Path = &cfg.paths.out;
    std::fs::create_dir_all(out)?;
    let log_path = out.join("train.log");

    let data = PairSet::load(&cfg.paths.data)?;
    let (holdout, train_pairs) = data.split_holdout(cfg.val_pairs)?;
    let min_extent = train_pairs
        .iter()
        .map(|(d, _)| d.shape()[1].min(d.shape()[2]))
        .min()
        .expect("split_holdout leaves training pairs");
    for (i, p) in cfg.phases.iter().enumerate() {
        if p.patch > min_extent {
            return Err(SfimError::config(format!(
                "phase {i}: patch {} exceeds smallest training image extent {min_extent}",
                p.patch
            )));
        }
    }

    let mut store = ParamStore::new(derive_seed(cfg.seed, STREAM_PARAMS));
    let model = Model::build(&mut store, &cfg.model)?;
    let param_ids: Vec<PId> = store.ids().collect();
    let mut opt = AdamW::new(&store, cfg.phases[0].lr);
    let mut rng = Rng::new(derive_seed(cfg.seed, STREAM_SAMPLER));

    let mut phase_idx = 0usize;
    let mut step_in_phase = 0u64;
    let mut global_step = 0u64;
    let mut best_val = f64::NEG_INFINITY;

    let mut log = match &opts.resume {
        Some(resume_path) => {
            let ck = load_checkpoint(resume_path)?;
            if ck.config != *cfg {
                return Err(SfimError::config(
                    "checkpoint/config mismatch: resume checkpoint was written by a different run configuration",
                ));
            }
            ck.load_into(&mut store)?;
            let ts = ck.train.as_ref().ok_or_else(|| {
                SfimError::config("checkpoint holds no training state, cannot resume")
            })?;
            if !opt.import_state(ts.opt_step, &ts.opt_m, &ts.opt_v) {
                return Err(SfimError::config(
                    "checkpoint/config mismatch: optimizer state size differs",
                ));
            }
            rng = Rng::from_state(ts.rng_state);
            global_step = ts.global_step;
            phase_idx = ts.phase as usize;
            step_in_phase = ts.step_in_phase;
            best_val = ts.best_val_psnr;
            std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?
        }
        None => {
            let state = snapshot(0, 0, 0, &opt, &rng, best_val);
            save_checkpoint(&out.join("init.sfck"), cfg, &store, Some(&state))?;
            std::fs::File::create(&log_path)?
        }
    };

    let mut steps_this_call = 0u64;
    let mut loss_trace: Vec<f64> = Vec::new();
    let mut final_loss = f64::NAN;
    let mut last_val: Option<(f64, f64)> = None;
    let mut stopped_early = false;

    'phases: while phase_idx < cfg.phases.len() {
        let phase = cfg.phases[phase_idx];
        while step_in_phase < phase.steps {
            if opts.max_steps.is_some_and(|m| steps_this_call >= m) {
                stopped_early = true;
                break 'phases;
            }
            opt.lr = cosine_lr(step_in_phase, phase.steps, phase.lr, cfg.lr_min);
            store.zero_grads();

            let mut step_loss = 0.0;
            let mut term_sums = [0.0f64; 4];
            let inv_batch = 1.0 / phase.batch as f64;
            for _ in 0..phase.batch {
                let idx = rng.below(train_pairs.len());
                let (degraded, clean) = &train_pairs[idx];
                let (_, h, w) = degraded.dims3()?;
                let y = rng.below(h - phase.patch + 1);
                let x = rng.below(w - phase.patch + 1);
                let flip = rng.bool();
                let dcrop = crop_flip(degraded, y, x, phase.patch, flip)?;
                let gcrop = crop_flip(clean, y, x, phase.patch, flip)?;

                let mut tape = Tape::new(&store);
                let input = tape.leaf(dcrop);
                let output = model.forward(&mut tape, input)?;
                let (loss, report) = total_loss(&mut tape, &output.restored, &gcrop, &cfg.loss)?;
                let scaled = tape.scale_shift(loss, inv_batch, 0.0)?;
                let value = tape.value(scaled).item()?;
                if !value.is_finite() {
                    return Err(SfimError::non_finite(format!(
                        "training loss at step {}",
                        global_step + 1
                    )));
                }
                step_loss += value;
                for level in &report.levels {
                    term_sums[0] += level.charbonnier * inv_batch;
                    term_sums[1] += level.ssim * inv_batch;
                    term_sums[2] += level.amplitude * inv_batch;
                    term_sums[3] += level.phase * inv_batch;
                }

                let grads = tape.backward(scaled)?;
                for &id in &param_ids {
                    if let Some(g) = grads.wrt_param(id) {
                        store.accumulate_grad(id, g);
                    }
                }
            }

            if cfg.grad_clip {
                store.clip_grad_norm(DEFAULT_GRAD_CLIP);
            }
            opt.step(&mut store);
            global_step += 1;
            step_in_phase += 1;
            steps_this_call += 1;
            final_loss = step_loss;
            loss_trace.push(step_loss);
            writeln!(
                log,
                "step={global_step} phase={phase_idx} lr={:.9e} loss={step_loss:.9e} \
                 charbonnier={:.9e} ssim_term={:.9e} amplitude={:.9e} phase_term={:.9e}",
                opt.lr, term_sums[0], term_sums[1], term_sums[2], term_sums[3]
            )?;

            if global_step % cfg.val_every == 0 {
                let (p, s) = validate_holdout(&model, &store, &holdout)?;
                last_val = Some((p, s));
                writeln!(log, "step={global_step} val_psnr={p:.6} val_ssim={s:.6}")?;
                if p > best_val {
                    best_val = p;
                    let state =
                        snapshot(global_step, phase_idx, step_in_phase, &opt, &rng, best_val);
                    save_checkpoint(&out.join("best.sfck"), cfg, &store, Some(&state))?;
                }
            }
        }
        phase_idx += 1;
        step_in_phase = 0;
        let state = snapshot(global_step, phase_idx, 0, &opt, &rng, best_val);
        save_checkpoint(&out.join(format!("phase{phase_idx}.sfck")), cfg, &store, Some(&state))?;
    }

    let (final_psnr, final_ssim) = match last_val {
        Some(v) if stopped_early => v,
        _ => {
            let v = validate_holdout(&model, &store, &holdout)?;
            writeln!(log, "step={global_step} val_psnr={:.6} val_ssim={:.6}", v.0, v.1)?;
            if v.0 > best_val {
                best_val = v.0;
            }
            v
        }
    };
    log.flush()?;

    let state = snapshot(global_step, phase_idx, step_in_phase, &opt, &rng, best_val);
    let final_name = if stopped_early { "last.sfck" } else { "final.sfck" };
    let final_checkpoint = out.join(final_name);
    save_checkpoint(&final_checkpoint, cfg, &store, Some(&state))?;

    Ok(TrainSummary {
        steps_run: steps_this_call,
        global_step,
        final_loss,
        best_val_psnr: best_val,
        final_val_psnr: final_psnr,
        final_val_ssim: final_ssim,
        final_checkpoint,
        log_path,
        loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{make_dataset, DatasetSpec};
    use crate::model::ModelConfig;
    use crate::runtime::config::TrainPhase;

    fn tiny_corpus(dir: &Path, n: usize, extent: usize, seed: u64) {
        let mut ds = DatasetSpec::desk_default();
        ds.height = extent;
        ds.width = extent;
        make_dataset(dir, &ds, n, seed).unwrap();
    }

    fn tiny_config(data: PathBuf, out: PathBuf, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::desk_preset(data, out, seed);
        cfg.model = ModelConfig::compact(2, 4);
        cfg.phases = vec![TrainPhase::new(2e-4, 4, 16, 1), TrainPhase::new(1e-4, 2, 16, 1)];
        cfg.val_pairs = 2;
        cfg.val_every = 3;
        cfg
    }

    #[test]
    fn zero_step_run_checkpoints_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_corpus(&data, 3, 16, 5);
        let mut cfg = tiny_config(data, dir.path().join("out"), 5);
        cfg.phases = vec![TrainPhase::new(1e-4, 0, 16, 1)];
        cfg.val_pairs = 1;

        let summary = train(&cfg, &TrainOptions::default()).unwrap();
        assert_eq!(summary.steps_run, 0);

        let init = load_checkpoint(&dir.path().join("out/init.sfck")).unwrap();
        let fin = load_checkpoint(&summary.final_checkpoint).unwrap();
        for ((an, at), (bn, bt)) in init.params.iter().zip(&fin.params) {
            assert_eq!(an, bn);
            assert_eq!(at.data(), bt.data(), "{an} drifted with zero steps");
        }
    }

    #[test]
    fn same_seed_runs_are_bitwise_identical_and_seeds_differ() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_corpus(&data, 4, 16, 42);

        // Identical config (including paths) twice: rename the first output
        // aside, rerun, and demand bitwise-equal checkpoints and logs.
        let cfg = tiny_config(data.clone(), dir.path().join("out"), 7);
        let a = train(&cfg, &TrainOptions::default()).unwrap();
        std::fs::rename(dir.path().join("out"), dir.path().join("first")).unwrap();
        let b = train(&cfg, &TrainOptions::default()).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(
            std::fs::read(dir.path().join("first/final.sfck")).unwrap(),
            std::fs::read(dir.path().join("out/final.sfck")).unwrap(),
            "same-seed checkpoints must match bitwise"
        );
        assert_eq!(
            std::fs::read_to_string(dir.path().join("first/train.log")).unwrap(),
            std::fs::read_to_string(&b.log_path).unwrap()
        );

        let other = tiny_config(data.clone(), dir.path().join("c"), 8);
        let c = train(&other, &TrainOptions::default()).unwrap();
        assert_ne!(a.loss_trace, c.loss_trace, "different seeds must diverge");
    }

    #[test]
    fn resume_matches_uninterrupted_training() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_corpus(&data, 4, 16, 11);

        // Uninterrupted reference: all 6 steps.
        let full_cfg = tiny_config(data.clone(), dir.path().join("full"), 13);
        let full = train(&full_cfg, &TrainOptions::default()).unwrap();

        // Stop after 3, resume for the rest.
        let split_cfg = tiny_config(data.clone(), dir.path().join("split"), 13);
        let part =
            train(&split_cfg, &TrainOptions { resume: None, max_steps: Some(3) }).unwrap();
        assert_eq!(part.steps_run, 3);
        let rest = train(
            &split_cfg,
            &TrainOptions { resume: Some(part.final_checkpoint.clone()), max_steps: None },
        )
        .unwrap();
        assert_eq!(rest.global_step, 6);

        let mut trace = part.loss_trace.clone();
        trace.extend(&rest.loss_trace);
        assert_eq!(full.loss_trace, trace, "resumed trajectory must match");

        // Final parameters and training state agree exactly; the serialized
        // configs differ only in their output paths.
        let a = load_checkpoint(&dir.path().join("full/final.sfck")).unwrap();
        let b = load_checkpoint(&dir.path().join("split/final.sfck")).unwrap();
        for ((an, at), (bn, bt)) in a.params.iter().zip(&b.params) {
            assert_eq!(an, bn);
            assert_eq!(at.data(), bt.data(), "{an} differs after resume");
        }
        assert_eq!(a.train, b.train);
    }

    #[test]
    fn resume_rejects_a_different_configuration() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_corpus(&data, 3, 16, 3);
        let cfg = tiny_config(data.clone(), dir.path().join("out"), 3);
        let summary =
            train(&cfg, &TrainOptions { resume: None, max_steps: Some(1) }).unwrap();

        let mut other = cfg.clone();
        other.seed = 4;
        let err = train(
            &other,
            &TrainOptions { resume: Some(summary.final_checkpoint), max_steps: None },
        )
        .unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{err}");
    }

    #[test]
    fn oversized_patch_is_rejected_upfront() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        tiny_corpus(&data, 3, 16, 9);
        let mut cfg = tiny_config(data, dir.path().join("out"), 9);
        cfg.phases = vec![TrainPhase::new(1e-4, 1, 32, 1)];
        let err = train(&cfg, &TrainOptions::default()).unwrap_err();
        assert!(err.to_string().contains("patch"), "{err}");
    }
}
